#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "cssl/experiment.hpp"

namespace py = pybind11;
using namespace cssl;

namespace {

// Samples as a dict of arrays: payload (n x d), id, source, class_label, arrival_tick.
py::dict samples_to_dict(const std::vector<Sample>& xs) {
  const Eigen::Index d = xs.empty() ? 0 : xs.front().payload.size();
  Matrix payload(static_cast<Eigen::Index>(xs.size()), d);
  std::vector<std::int64_t> ids, sources, ticks;
  std::vector<int> labels;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    payload.row(static_cast<Eigen::Index>(i)) = xs[i].payload.transpose();
    ids.push_back(xs[i].id);
    sources.push_back(xs[i].source);
    labels.push_back(xs[i].class_label);
    ticks.push_back(xs[i].arrival_tick);
  }
  py::dict out;
  out["payload"] = payload;
  out["id"] = py::array(py::cast(ids));
  out["source"] = py::array(py::cast(sources));
  out["class_label"] = py::array(py::cast(labels));
  out["arrival_tick"] = py::array(py::cast(ticks));
  return out;
}

std::vector<Sample> dict_to_samples(const Matrix& payload, const std::vector<std::int64_t>& ids,
                                    const std::vector<std::int64_t>& sources, const std::vector<int>& labels) {
  const auto n = static_cast<std::size_t>(payload.rows());
  if (ids.size() != n || sources.size() != n || (!labels.empty() && labels.size() != n))
    throw ConfigError("payload rows, ids, sources and labels must have equal length");
  std::vector<Sample> xs(n);
  for (std::size_t i = 0; i < n; ++i) {
    xs[i].payload = payload.row(static_cast<Eigen::Index>(i)).transpose();
    xs[i].id = ids[i];
    xs[i].source = sources[i];
    xs[i].class_label = labels.empty() ? 0 : labels[i];
    xs[i].arrival_tick = ids[i];
  }
  return xs;
}

py::object json_to_py(const Json& j) { return py::module_::import("json").attr("loads")(j.dump()); }
Json py_to_json(const py::object& o) {
  return Json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

py::dict summary_to_dict(const RunSummary& s) {
  py::dict d;
  d["method"] = s.method;
  d["seed"] = s.seed;
  d["permutation"] = s.permutation;
  d["completed"] = s.completed;
  d["stop_reason"] = s.stop_reason;
  d["final_accuracy"] = s.final_accuracy;
  d["steady_state_correlation"] = s.steady_state_correlation;
  d["idle_fraction"] = s.idle_fraction;
  d["training_steps"] = s.training_steps;
  d["stream_batches"] = s.stream_batches;
  d["effective_hyper_sampling"] = s.effective_hyper_sampling;
  d["single_pass"] = s.single_pass;
  d["elapsed"] = s.elapsed;
  d["forgetting"] = s.forgetting ? py::cast(*s.forgetting) : py::none();
  py::list openset;
  for (const auto& v : s.openset) openset.append(v ? py::cast(*v) : py::none());
  d["openset"] = openset;
  d["past_partition_share"] = s.past_partition_share;
  d["checkpoint_stage"] = s.checkpoint_stage;
  return d;
}

}  // namespace

PYBIND11_MODULE(_cssl, m) {
  m.doc() = "Continuous self-supervised learning simulator";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<InsufficientDataError>(m, "InsufficientDataError", PyExc_RuntimeError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  // Analytics
  m.def("correlation_likelihood", &correlation_likelihood_closed, py::arg("b"), py::arg("p_c"));
  m.def("correlation_likelihood_exact", &correlation_likelihood_exact, py::arg("b"), py::arg("p_c"));
  m.def(
      "correlation_likelihood_monte_carlo",
      [](std::int64_t b, double p, std::int64_t trials, std::uint64_t seed) {
        const auto e = correlation_likelihood_monte_carlo(b, p, trials, seed);
        return py::make_tuple(e.estimate, e.sigma);
      },
      py::arg("b"), py::arg("p_c"), py::arg("trials") = 100000, py::arg("seed") = 0,
      "Returns (estimate, standard error).");
  m.def(
      "fifo_reduction",
      [](std::int64_t b, std::int64_t B, double p) {
        const auto r = fifo_reduction_check(b, B, p);
        return py::make_tuple(r.exact_ratio, r.approx_ratio);
      },
      py::arg("b"), py::arg("B"), py::arg("p_c"), "Returns (P_c(B) / P_c(b), b / B).");
  m.def(
      "batch_correlation",
      [](const std::vector<std::int64_t>& sources) {
        std::vector<Sample> xs(sources.size());
        for (std::size_t i = 0; i < xs.size(); ++i) xs[i].source = sources[i];
        return batch_correlation(xs);
      },
      py::arg("sources"), "Fraction of unordered pairs sharing a source id.");

  // Streams
  m.def(
      "generate_stream",
      [](const std::string& kind, int num_classes, int dim, std::uint64_t seed, py::kwargs kw) {
        ClassModelConfig cfg;
        cfg.num_classes = num_classes;
        cfg.dim = dim;
        cfg.seed = derive_seed(seed, 1);
        const ClassModel model = make_class_model(cfg);
        auto get = [&](const char* k, auto def) {
          return kw.contains(k) ? kw[k].cast<decltype(def)>() : def;
        };
        StreamPtr s;
        const std::uint64_t stream_seed = derive_seed(seed, 2);
        if (kind == "iid") {
          s = make_iid_stream(model, get("length", std::size_t{1024}), stream_seed);
        } else if (kind == "segment") {
          s = make_segment_stream(
              model, {get("n_seq", 64), get("drift", 0.05), get("num_segments", 16)}, stream_seed);
        } else if (kind == "markov") {
          s = make_markov_stream(model, {get("p_c", 0.5), get("drift", 0.05)}, get("length", std::size_t{1024}),
                                 stream_seed);
        } else if (kind == "walk") {
          s = make_walk_stream(model, get("trajectory_length", std::size_t{1024}), get("num_loops", 1), stream_seed);
        } else if (kind == "partitioned") {
          const auto sched = make_partition_schedule(model, get("num_partitions", 4),
                                                     get("samples_per_partition", std::size_t{1024}),
                                                     get("permutation", std::vector<int>{}),
                                                     get("transition_fraction", 0.10));
          s = make_partitioned_stream(model, sched, stream_seed);
        } else {
          throw ConfigError("unknown stream kind '" + kind + "'");
        }
        return samples_to_dict(materialize(*s));
      },
      py::arg("kind"), py::arg("num_classes") = 16, py::arg("dim") = 32, py::arg("seed") = 0,
      "Materializes a synthetic stream as a dict of numpy arrays.");

  // Buffer
  py::class_<ReplayBuffer>(m, "ReplayBuffer")
      .def(py::init([](std::size_t capacity, const std::string& policy, double alpha) {
             return ReplayBuffer(capacity, parse_eviction_policy(policy), alpha);
           }),
           py::arg("capacity"), py::arg("policy") = "fifo", py::arg("alpha") = 0.5)
      .def(
          "add",
          [](ReplayBuffer& b, const Matrix& payload, const std::vector<std::int64_t>& ids,
             const std::vector<std::int64_t>& sources, const std::vector<int>& labels) {
            return b.add(dict_to_samples(payload, ids, sources, labels));
          },
          py::arg("payload"), py::arg("ids"), py::arg("sources"), py::arg("labels") = std::vector<int>{},
          "Adds a batch (rows of payload) and returns the evicted ids.")
      .def(
          "track_features",
          [](ReplayBuffer& b, const std::vector<std::int64_t>& ids, const Matrix& features) {
            if (static_cast<std::size_t>(features.rows()) != ids.size())
              throw ConfigError("one feature row per id is required");
            std::vector<Vector> vs;
            for (Eigen::Index i = 0; i < features.rows(); ++i) vs.push_back(features.row(i).transpose());
            b.track_features(ids, vs);
          },
          py::arg("ids"), py::arg("features"))
      .def("evict_minred", &ReplayBuffer::evict_minred)
      .def("ids",
           [](const ReplayBuffer& b) {
             std::vector<std::int64_t> out;
             for (const auto& e : b.entries()) out.push_back(e.sample.id);
             return out;
           })
      .def("sample_ids",
           [](const ReplayBuffer& b, std::size_t n, std::uint64_t seed) {
             std::vector<std::int64_t> out;
             for (const auto& s : b.sample_batch(n, seed)) out.push_back(s.id);
             return out;
           },
           py::arg("n"), py::arg("seed") = 0)
      .def("__len__", &ReplayBuffer::size)
      .def_property_readonly("capacity", &ReplayBuffer::capacity)
      .def_property_readonly("initialized_count", &ReplayBuffer::initialized_count);

  m.def(
      "simsiam_loss",
      [](const Vector& z1, const Vector& z2, const Matrix& wp, const Vector& bp) {
        return simsiam_loss(z1, z2, wp, bp).loss;
      },
      py::arg("z1"), py::arg("z2"), py::arg("wp"), py::arg("bp"));

  // Experiments
  m.def(
      "validate_config",
      [](const py::object& config) {
        py::list out;
        try {
          parse_config(py_to_json(config));
        } catch (const ConfigValidationError& e) {
          for (const auto& d : e.diagnostics()) out.append(py::make_tuple(d.field, d.message));
        }
        return out;
      },
      py::arg("config"), "Returns a list of (field, message); empty when valid.");
  m.def(
      "resolve_config", [](const py::object& config) { return json_to_py(to_json(parse_config(py_to_json(config)))); },
      py::arg("config"), "Config with every default filled in.");
  m.def(
      "run_experiment",
      [](const py::object& config, bool write_outputs, std::vector<std::string> only) {
        ExperimentConfig c = parse_config(py_to_json(config));
        apply_env_overrides(c);
        ExecutionOptions opts;
        opts.write_outputs = write_outputs;
        opts.only_methods = std::move(only);
        ExperimentResult r;
        {
          py::gil_scoped_release release;
          r = run_experiment(c, opts);
        }
        py::dict out;
        py::list runs;
        for (const auto& run : r.runs) runs.append(summary_to_dict(run.summary));
        out["runs"] = runs;
        if (r.output_dir) out["output_dir"] = *r.output_dir;
        if (r.analytics) {
          py::list rows;
          for (const auto& row : r.analytics->rows) rows.append(row);
          out["analytics_header"] = r.analytics->header;
          out["analytics_rows"] = rows;
        }
        return out;
      },
      py::arg("config"), py::arg("write_outputs") = false, py::arg("only_methods") = std::vector<std::string>{});
  m.def(
      "compare_runs",
      [](const std::vector<std::filesystem::path>& dirs, std::optional<std::filesystem::path> out) {
        return json_to_py(compare_runs(dirs, out).summary);
      },
      py::arg("dirs"), py::arg("out_dir") = py::none());
}

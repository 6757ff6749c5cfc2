#include "cssl/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <iomanip>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <type_traits>

namespace cssl {

namespace fs = std::filesystem;

std::string to_string(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::efficiency: return "efficiency";
    case ExperimentKind::correlated: return "correlated";
    case ExperimentKind::lifelong: return "lifelong";
    case ExperimentKind::analytics_only: return "analytics_only";
  }
  return "unknown";
}

ExperimentKind parse_experiment_kind(const std::string& name) {
  if (name == "efficiency") return ExperimentKind::efficiency;
  if (name == "correlated") return ExperimentKind::correlated;
  if (name == "lifelong") return ExperimentKind::lifelong;
  if (name == "analytics_only") return ExperimentKind::analytics_only;
  throw ConfigError("unknown experiment kind '" + name + "'");
}

std::string to_string(StreamSection::Kind kind) {
  switch (kind) {
    case StreamSection::Kind::iid: return "iid";
    case StreamSection::Kind::segment: return "segment";
    case StreamSection::Kind::markov: return "markov";
    case StreamSection::Kind::walk: return "walk";
    case StreamSection::Kind::partitioned: return "partitioned";
  }
  return "unknown";
}

StreamSection::Kind parse_stream_kind(const std::string& name) {
  if (name == "iid") return StreamSection::Kind::iid;
  if (name == "segment") return StreamSection::Kind::segment;
  if (name == "markov") return StreamSection::Kind::markov;
  if (name == "walk") return StreamSection::Kind::walk;
  if (name == "partitioned") return StreamSection::Kind::partitioned;
  throw ConfigError("unknown stream type '" + name + "'");
}

namespace {

std::string join_diagnostics(const std::vector<Diagnostic>& diags) {
  std::string msg = "invalid experiment config:";
  for (const auto& d : diags) msg += "\n  " + d.field + ": " + d.message;
  return msg;
}

}  // namespace

ConfigValidationError::ConfigValidationError(std::vector<Diagnostic> diagnostics)
    : ConfigError(join_diagnostics(diagnostics)), diagnostics_(std::move(diagnostics)) {}

// ---------------------------------------------------------------------------
// Parsing

namespace {

class Reader {
 public:
  explicit Reader(std::vector<Diagnostic>& diags) : diags_(diags) {}

  void error(const std::string& field, const std::string& message) { diags_.push_back({field, message}); }

  // False (with a diagnostic) unless j is an object; flags keys outside allowed.
  bool object(const Json& j, const std::string& path, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) {
      error(path.empty() ? "<root>" : path, "expected an object");
      return false;
    }
    for (const auto& item : j.items()) {
      const bool known = std::any_of(allowed.begin(), allowed.end(),
                                     [&](const char* k) { return item.key() == k; });
      if (!known) error(sub(path, item.key()), "unknown key");
    }
    return true;
  }

  template <typename T>
  void get(const Json& obj, const std::string& path, const char* key, T& out) {
    const auto it = obj.find(key);
    if (it == obj.end()) return;
    convert(*it, sub(path, key), out);
  }

  template <typename T>
  bool convert(const Json& j, const std::string& field, T& out) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!j.is_boolean()) return fail(field, "expected true or false");
      out = j.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!j.is_number_integer()) return fail(field, "expected an integer");
      // JSON text yields unsigned values for non-negative literals; values set
      // programmatically may be signed.
      if (j.is_number_unsigned()) {
        const auto v = j.get<std::uint64_t>();
        if (v > static_cast<std::uint64_t>(std::numeric_limits<T>::max())) return fail(field, "integer out of range");
        out = static_cast<T>(v);
      } else {
        const auto v = j.get<std::int64_t>();
        if constexpr (std::is_unsigned_v<T>) {
          if (v < 0) return fail(field, "expected a non-negative integer");
          if (static_cast<std::uint64_t>(v) > std::numeric_limits<T>::max()) return fail(field, "integer out of range");
        } else {
          if (v < std::numeric_limits<T>::min() || v > std::numeric_limits<T>::max())
            return fail(field, "integer out of range");
        }
        out = static_cast<T>(v);
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!j.is_number()) return fail(field, "expected a number");
      out = j.get<double>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!j.is_string()) return fail(field, "expected a string");
      out = j.get<std::string>();
    } else {
      // std::vector<U>
      if (!j.is_array()) return fail(field, "expected an array");
      T tmp;
      bool ok = true;
      for (std::size_t i = 0; i < j.size(); ++i) {
        typename T::value_type v{};
        ok = convert(j[i], field + "[" + std::to_string(i) + "]", v) && ok;
        tmp.push_back(std::move(v));
      }
      if (!ok) return false;
      out = std::move(tmp);
    }
    return true;
  }

  template <typename Enum, typename Parse>
  void get_enum(const Json& obj, const std::string& path, const char* key, Enum& out, Parse parse) {
    std::string name;
    const auto it = obj.find(key);
    if (it == obj.end()) return;
    if (!convert(*it, sub(path, key), name)) return;
    try {
      out = parse(name);
    } catch (const ConfigError& e) {
      error(sub(path, key), e.what());
    }
  }

  static std::string sub(const std::string& path, const std::string& key) {
    return path.empty() ? key : path + "." + key;
  }

 private:
  bool fail(const std::string& field, const std::string& message) {
    error(field, message);
    return false;
  }

  std::vector<Diagnostic>& diags_;
};

// Either an explicit list or {"from", "to", "step"}.
template <typename T>
void read_grid(Reader& r, const Json& obj, const std::string& path, const char* key, std::vector<T>& out) {
  const auto it = obj.find(key);
  if (it == obj.end()) return;
  const std::string field = Reader::sub(path, key);
  if (it->is_array()) {
    r.convert(*it, field, out);
    return;
  }
  if (!r.object(*it, field, {"from", "to", "step"})) return;
  T from{}, to{}, step{};
  bool ok = true;
  for (const char* k : {"from", "to", "step"}) {
    if (!it->contains(k)) {
      r.error(Reader::sub(field, k), "required in a range");
      ok = false;
    }
  }
  if (!ok) return;
  r.get(*it, field, "from", from);
  r.get(*it, field, "to", to);
  r.get(*it, field, "step", step);
  if (!(step > T{0})) {
    r.error(Reader::sub(field, "step"), "must be positive");
    return;
  }
  if (to < from) {
    r.error(field, "'to' is below 'from'");
    return;
  }
  out.clear();
  const auto count = static_cast<std::int64_t>(std::floor(static_cast<double>(to - from) / static_cast<double>(step) + 1e-9));
  for (std::int64_t i = 0; i <= count; ++i) {
    if constexpr (std::is_floating_point_v<T>) {
      // Rounded to 12 decimals so 0.1 steps land on 0.3 rather than 0.30000000000000004.
      const double v = static_cast<double>(from) + static_cast<double>(i) * static_cast<double>(step);
      out.push_back(std::round(v * 1e12) / 1e12);
    } else {
      out.push_back(from + static_cast<T>(i) * step);
    }
  }
}

void read_buffer_fields(Reader& r, const Json& j, const std::string& path, BufferSection& b) {
  r.get(j, path, "capacity", b.capacity);
  r.get_enum(j, path, "policy", b.policy, parse_eviction_policy);
  r.get(j, path, "alpha", b.alpha);
}

}  // namespace

ExperimentConfig parse_config(const Json& j) {
  std::vector<Diagnostic> diags;
  Reader r(diags);
  ExperimentConfig c;
  if (!r.object(j, "", {"name", "kind", "seeds", "output_dir", "data", "stream", "buffer", "methods", "learner",
                        "bandwidth", "evaluation", "analytics", "description"}))
    throw ConfigValidationError(std::move(diags));

  r.get(j, "", "name", c.name);
  r.get_enum(j, "", "kind", c.kind, parse_experiment_kind);
  r.get(j, "", "seeds", c.seeds);
  r.get(j, "", "output_dir", c.output_dir);
  if (j.contains("description") && !j["description"].is_string()) r.error("description", "expected a string");

  if (j.contains("data") && r.object(j["data"], "data", {"num_classes", "dim", "within_class_scale", "separation", "seed"})) {
    const Json& d = j["data"];
    r.get(d, "data", "num_classes", c.data.num_classes);
    r.get(d, "data", "dim", c.data.dim);
    r.get(d, "data", "within_class_scale", c.data.within_class_scale);
    r.get(d, "data", "separation", c.data.separation);
    r.get(d, "data", "seed", c.data.seed);
  }

  if (j.contains("stream") &&
      r.object(j["stream"], "stream", {"type", "length", "fetch_size", "segment", "markov", "walk", "partitions"})) {
    const Json& s = j["stream"];
    auto& st = c.stream;
    r.get_enum(s, "stream", "type", st.kind, parse_stream_kind);
    r.get(s, "stream", "length", st.length);
    r.get(s, "stream", "fetch_size", st.fetch_size);
    if (s.contains("segment") &&
        r.object(s["segment"], "stream.segment", {"n_seq", "within_segment_drift", "num_segments"})) {
      r.get(s["segment"], "stream.segment", "n_seq", st.segment.n_seq);
      r.get(s["segment"], "stream.segment", "within_segment_drift", st.segment.within_segment_drift);
      r.get(s["segment"], "stream.segment", "num_segments", st.segment.num_segments);
    }
    if (s.contains("markov") && r.object(s["markov"], "stream.markov", {"p_c", "within_chain_drift"})) {
      r.get(s["markov"], "stream.markov", "p_c", st.markov.p_c);
      r.get(s["markov"], "stream.markov", "within_chain_drift", st.markov.within_chain_drift);
    }
    if (s.contains("walk") &&
        r.object(s["walk"], "stream.walk", {"trajectory_length", "num_loops", "switch_prob", "drift"})) {
      r.get(s["walk"], "stream.walk", "trajectory_length", st.walk.trajectory_length);
      r.get(s["walk"], "stream.walk", "num_loops", st.walk.num_loops);
      r.get(s["walk"], "stream.walk", "switch_prob", st.walk.switch_prob);
      r.get(s["walk"], "stream.walk", "drift", st.walk.drift);
    }
    if (s.contains("partitions") &&
        r.object(s["partitions"], "stream.partitions",
                 {"count", "samples_per_partition", "transition_fraction", "permutations"})) {
      const Json& p = s["partitions"];
      r.get(p, "stream.partitions", "count", st.num_partitions);
      r.get(p, "stream.partitions", "samples_per_partition", st.samples_per_partition);
      r.get(p, "stream.partitions", "transition_fraction", st.transition_fraction);
      r.get(p, "stream.partitions", "permutations", st.permutations);
    }
  }

  BufferSection default_buffer;
  if (j.contains("buffer") && r.object(j["buffer"], "buffer", {"capacity", "policy", "alpha"}))
    read_buffer_fields(r, j["buffer"], "buffer", default_buffer);

  if (j.contains("methods")) {
    const Json& ms = j["methods"];
    if (!ms.is_array()) {
      r.error("methods", "expected an array");
    } else {
      for (std::size_t i = 0; i < ms.size(); ++i) {
        const std::string path = "methods[" + std::to_string(i) + "]";
        MethodConfig m;
        if (!r.object(ms[i], path, {"name", "mode", "epochs", "k", "shuffle_stream", "buffer"})) continue;
        r.get(ms[i], path, "name", m.name);
        r.get_enum(ms[i], path, "mode", m.mode.kind, parse_run_mode);
        r.get(ms[i], path, "epochs", m.mode.epochs);
        r.get(ms[i], path, "k", m.hyper_sampling_k);
        r.get(ms[i], path, "shuffle_stream", m.shuffle_stream);
        if (m.mode.kind == RunMode::Kind::buffered) {
          BufferSection b = default_buffer;
          if (ms[i].contains("buffer") && r.object(ms[i]["buffer"], path + ".buffer", {"capacity", "policy", "alpha"}))
            read_buffer_fields(r, ms[i]["buffer"], path + ".buffer", b);
          m.buffer = b;
        } else if (ms[i].contains("buffer")) {
          r.error(path + ".buffer", "only buffered methods take a buffer");
        }
        if (m.name.empty()) m.name = to_string(m.mode.kind);
        c.methods.push_back(std::move(m));
      }
    }
  }

  if (j.contains("learner") &&
      r.object(j["learner"], "learner", {"hidden", "embedding", "batch_size", "optimizer", "schedule", "augmentation"})) {
    const Json& l = j["learner"];
    auto& ls = c.learner;
    r.get(l, "learner", "hidden", ls.hidden);
    r.get(l, "learner", "embedding", ls.embedding);
    r.get(l, "learner", "batch_size", ls.batch_size);
    if (l.contains("optimizer") && r.object(l["optimizer"], "learner.optimizer", {"momentum", "weight_decay"})) {
      r.get(l["optimizer"], "learner.optimizer", "momentum", ls.optimizer.momentum);
      r.get(l["optimizer"], "learner.optimizer", "weight_decay", ls.optimizer.weight_decay);
    }
    if (l.contains("schedule") &&
        r.object(l["schedule"], "learner.schedule", {"kind", "base_lr", "total_steps", "decay_start_fraction"})) {
      const Json& s = l["schedule"];
      r.get_enum(s, "learner.schedule", "kind", ls.schedule.kind, parse_schedule_kind);
      r.get(s, "learner.schedule", "base_lr", ls.schedule.base_lr);
      r.get(s, "learner.schedule", "total_steps", ls.schedule.total_steps);
      r.get(s, "learner.schedule", "decay_start_fraction", ls.schedule.decay_start_fraction);
    }
    if (l.contains("augmentation") &&
        r.object(l["augmentation"], "learner.augmentation", {"noise_scale", "dropout_prob", "scale_lo", "scale_hi"})) {
      const Json& a = l["augmentation"];
      r.get(a, "learner.augmentation", "noise_scale", ls.augmentation.noise_scale);
      r.get(a, "learner.augmentation", "dropout_prob", ls.augmentation.dropout_prob);
      r.get(a, "learner.augmentation", "scale_lo", ls.augmentation.scale_lo);
      r.get(a, "learner.augmentation", "scale_hi", ls.augmentation.scale_hi);
    }
  }

  if (j.contains("bandwidth") && r.object(j["bandwidth"], "bandwidth", {"t_data", "t_opt", "k"})) {
    r.get(j["bandwidth"], "bandwidth", "t_data", c.bandwidth.t_data);
    r.get(j["bandwidth"], "bandwidth", "t_opt", c.bandwidth.t_opt);
    r.get(j["bandwidth"], "bandwidth", "k", c.bandwidth.hyper_sampling_k);
  }

  if (j.contains("evaluation") &&
      r.object(j["evaluation"], "evaluation",
               {"checkpoint_fractions", "checkpoint_ticks", "probe_train_per_class", "probe_test_per_class",
                "probe_max_iters", "probe_grad_tol", "probe_every_checkpoint"})) {
    const Json& e = j["evaluation"];
    auto& ev = c.evaluation;
    if (e.contains("checkpoint_ticks") && !e.contains("checkpoint_fractions")) ev.checkpoint_fractions.clear();
    read_grid(r, e, "evaluation", "checkpoint_fractions", ev.checkpoint_fractions);
    read_grid(r, e, "evaluation", "checkpoint_ticks", ev.checkpoint_ticks);
    r.get(e, "evaluation", "probe_train_per_class", ev.probe_train_per_class);
    r.get(e, "evaluation", "probe_test_per_class", ev.probe_test_per_class);
    r.get(e, "evaluation", "probe_max_iters", ev.probe.max_iters);
    r.get(e, "evaluation", "probe_grad_tol", ev.probe.grad_tol);
    r.get(e, "evaluation", "probe_every_checkpoint", ev.probe_every_checkpoint);
  }

  if (j.contains("analytics") &&
      r.object(j["analytics"], "analytics", {"b_values", "p_c_values", "trials", "fifo_multiple", "seed"})) {
    const Json& a = j["analytics"];
    read_grid(r, a, "analytics", "b_values", c.analytics.b_values);
    read_grid(r, a, "analytics", "p_c_values", c.analytics.p_c_values);
    r.get(a, "analytics", "trials", c.analytics.trials);
    r.get(a, "analytics", "fifo_multiple", c.analytics.fifo_multiple);
    r.get(a, "analytics", "seed", c.analytics.seed);
  }

  if (!diags.empty()) throw ConfigValidationError(std::move(diags));
  std::vector<Diagnostic> checks = validate(c);
  if (!checks.empty()) throw ConfigValidationError(std::move(checks));
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  Json j;
  try {
    j = read_json(path);
  } catch (const IoError& e) {
    throw ConfigValidationError(std::vector<Diagnostic>{{"<file>", e.what()}});
  }
  return parse_config(j);
}

// ---------------------------------------------------------------------------
// Validation

namespace {

template <typename Check>
void module_check(std::vector<Diagnostic>& out, const std::string& field, Check check) {
  try {
    check();
  } catch (const std::exception& e) {
    out.push_back({field, e.what()});
  }
}

bool valid_name(const std::string& s) {
  if (s.empty()) return false;
  return std::all_of(s.begin(), s.end(), [](char ch) {
    return std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-' || ch == '.';
  });
}

}  // namespace

std::vector<Diagnostic> validate(const ExperimentConfig& c) {
  std::vector<Diagnostic> d;
  auto bad = [&](const std::string& field, const std::string& message) { d.push_back({field, message}); };

  if (!valid_name(c.name)) bad("name", "must be non-empty and use only letters, digits, '-', '_' or '.'");
  if (c.seeds.empty()) bad("seeds", "at least one seed is required");
  if (std::set<std::uint64_t>(c.seeds.begin(), c.seeds.end()).size() != c.seeds.size()) bad("seeds", "duplicate seed");
  if (c.output_dir.empty()) bad("output_dir", "must not be empty");

  if (c.kind == ExperimentKind::analytics_only) {
    const auto& a = c.analytics;
    if (a.b_values.empty()) bad("analytics.b_values", "at least one window length is required");
    for (std::size_t i = 0; i < a.b_values.size(); ++i)
      if (a.b_values[i] < 2) bad("analytics.b_values[" + std::to_string(i) + "]", "window length must be >= 2");
    if (a.p_c_values.empty()) bad("analytics.p_c_values", "at least one p_c is required");
    for (std::size_t i = 0; i < a.p_c_values.size(); ++i)
      if (!(a.p_c_values[i] >= 0.0 && a.p_c_values[i] <= 1.0))
        bad("analytics.p_c_values[" + std::to_string(i) + "]", "p_c must lie in [0, 1]");
    if (a.trials < 1) bad("analytics.trials", "must be >= 1");
    if (a.fifo_multiple < 2) bad("analytics.fifo_multiple", "must be >= 2");
    return d;
  }

  // data
  if (c.data.num_classes < 2) bad("data.num_classes", "must be >= 2");
  if (c.data.dim < 1) bad("data.dim", "must be >= 1");
  if (!(c.data.within_class_scale > 0.0)) bad("data.within_class_scale", "must be positive");
  if (!(c.data.separation > 4.0)) bad("data.separation", "must exceed 4 (class means closer than 4 sigma overlap)");

  // stream
  const auto& s = c.stream;
  switch (s.kind) {
    case StreamSection::Kind::iid:
      if (s.length < 1) bad("stream.length", "must be >= 1");
      break;
    case StreamSection::Kind::markov:
      if (s.length < 1) bad("stream.length", "must be >= 1");
      if (!(s.markov.p_c >= 0.0 && s.markov.p_c <= 1.0)) bad("stream.markov.p_c", "must lie in [0, 1]");
      if (!(s.markov.within_chain_drift >= 0.0)) bad("stream.markov.within_chain_drift", "must be >= 0");
      break;
    case StreamSection::Kind::segment:
      if (s.segment.n_seq < 1) bad("stream.segment.n_seq", "must be >= 1");
      if (s.segment.num_segments < 1) bad("stream.segment.num_segments", "must be >= 1");
      if (!(s.segment.within_segment_drift >= 0.0)) bad("stream.segment.within_segment_drift", "must be >= 0");
      break;
    case StreamSection::Kind::walk:
      if (s.walk.trajectory_length < 1) bad("stream.walk.trajectory_length", "must be >= 1");
      if (s.walk.num_loops < 1) bad("stream.walk.num_loops", "must be >= 1");
      if (!(s.walk.switch_prob >= 0.0 && s.walk.switch_prob <= 1.0)) bad("stream.walk.switch_prob", "must lie in [0, 1]");
      if (!(s.walk.drift >= 0.0)) bad("stream.walk.drift", "must be >= 0");
      break;
    case StreamSection::Kind::partitioned: {
      if (s.num_partitions < 1 || s.num_partitions > c.data.num_classes)
        bad("stream.partitions.count", "must lie in [1, data.num_classes]");
      if (s.samples_per_partition < 1) bad("stream.partitions.samples_per_partition", "must be >= 1");
      if (!(s.transition_fraction >= 0.0 && s.transition_fraction <= 0.5))
        bad("stream.partitions.transition_fraction", "must lie in [0, 0.5]");
      for (std::size_t i = 0; i < s.permutations.size(); ++i) {
        std::vector<int> sorted = s.permutations[i];
        std::sort(sorted.begin(), sorted.end());
        bool ok = static_cast<int>(sorted.size()) == s.num_partitions;
        for (std::size_t k = 0; ok && k < sorted.size(); ++k) ok = sorted[k] == static_cast<int>(k);
        if (!ok)
          bad("stream.partitions.permutations[" + std::to_string(i) + "]",
              "must be a permutation of 0.." + std::to_string(s.num_partitions - 1));
      }
      break;
    }
  }
  if (s.kind != StreamSection::Kind::partitioned && !s.permutations.empty())
    bad("stream.partitions", "permutations apply to partitioned streams only");

  // learner
  const auto& l = c.learner;
  if (l.hidden < 1) bad("learner.hidden", "must be >= 1");
  if (l.embedding < 1) bad("learner.embedding", "must be >= 1");
  if (l.batch_size < 2) bad("learner.batch_size", "must be >= 2");
  if (!(l.optimizer.momentum >= 0.0 && l.optimizer.momentum < 1.0)) bad("learner.optimizer.momentum", "must lie in [0, 1)");
  if (!(l.optimizer.weight_decay >= 0.0)) bad("learner.optimizer.weight_decay", "must be >= 0");
  if (!(l.schedule.base_lr > 0.0)) bad("learner.schedule.base_lr", "must be positive");
  if (l.schedule.total_steps < 0) bad("learner.schedule.total_steps", "must be >= 0 (0 means automatic)");
  if (!(l.schedule.decay_start_fraction >= 0.0 && l.schedule.decay_start_fraction <= 1.0))
    bad("learner.schedule.decay_start_fraction", "must lie in [0, 1]");
  module_check(d, "learner.augmentation", [&] { l.augmentation.validate(); });
  module_check(d, "bandwidth", [&] { c.bandwidth.validate(); });
  const std::size_t fetch = s.fetch_size ? s.fetch_size : l.batch_size;

  // methods
  if (c.methods.empty()) bad("methods", "at least one method is required");
  std::set<std::string> names;
  for (std::size_t i = 0; i < c.methods.size(); ++i) {
    const auto& m = c.methods[i];
    const std::string path = "methods[" + std::to_string(i) + "]";
    if (!valid_name(m.name)) bad(path + ".name", "must use only letters, digits, '-', '_' or '.'");
    if (!names.insert(m.name).second) bad(path + ".name", "duplicate method name '" + m.name + "'");
    if (m.mode.kind == RunMode::Kind::epoch_oracle && m.mode.epochs < 1) bad(path + ".epochs", "must be >= 1");
    if (m.hyper_sampling_k < 0) bad(path + ".k", "must be >= 0 (0 takes bandwidth.k)");
    if (m.mode.kind != RunMode::Kind::buffered && m.hyper_sampling_k > 1)
      bad(path + ".k", "only buffered methods take more than one step per fetch");
    if (m.mode.kind == RunMode::Kind::buffered) {
      if (!m.buffer) {
        bad(path + ".buffer", "buffered methods need a buffer");
      } else {
        if (m.buffer->capacity < l.batch_size) bad(path + ".buffer.capacity", "smaller than learner.batch_size");
        if (m.buffer->capacity < fetch) bad(path + ".buffer.capacity", "smaller than the stream fetch size");
        if (!(m.buffer->alpha >= 0.0 && m.buffer->alpha < 1.0)) bad(path + ".buffer.alpha", "must lie in [0, 1)");
      }
    }
    if (m.mode.kind == RunMode::Kind::epoch_oracle && c.kind == ExperimentKind::lifelong)
      bad(path + ".mode", "the epoch oracle has no stage structure; not allowed in lifelong experiments");
  }

  // evaluation
  const auto& e = c.evaluation;
  if (e.checkpoint_fractions.empty() && e.checkpoint_ticks.empty())
    bad("evaluation", "give checkpoint_fractions or checkpoint_ticks");
  for (std::size_t i = 0; i < e.checkpoint_fractions.size(); ++i)
    if (!(e.checkpoint_fractions[i] > 0.0 && e.checkpoint_fractions[i] <= 1.0))
      bad("evaluation.checkpoint_fractions[" + std::to_string(i) + "]", "must lie in (0, 1]");
  for (std::size_t i = 0; i < e.checkpoint_ticks.size(); ++i)
    if (e.checkpoint_ticks[i] < 0) bad("evaluation.checkpoint_ticks[" + std::to_string(i) + "]", "must be >= 0");
  if (e.probe_train_per_class < 1) bad("evaluation.probe_train_per_class", "must be >= 1");
  if (e.probe_test_per_class < 1) bad("evaluation.probe_test_per_class", "must be >= 1");
  if (e.probe.max_iters < 1) bad("evaluation.probe_max_iters", "must be >= 1");
  if (!(e.probe.grad_tol > 0.0)) bad("evaluation.probe_grad_tol", "must be positive");

  if (c.kind == ExperimentKind::lifelong) {
    if (s.kind != StreamSection::Kind::partitioned) bad("stream.type", "lifelong experiments need a partitioned stream");
    if (!e.probe_every_checkpoint) bad("evaluation.probe_every_checkpoint", "lifelong experiments probe every checkpoint");
  }
  return d;
}

// ---------------------------------------------------------------------------
// Resolved JSON

namespace {

Json buffer_json(const BufferSection& b) {
  return Json{{"capacity", b.capacity}, {"policy", to_string(b.policy)}, {"alpha", b.alpha}};
}

}  // namespace

Json to_json(const ExperimentConfig& c) {
  Json j;
  j["name"] = c.name;
  j["kind"] = to_string(c.kind);
  j["seeds"] = c.seeds;
  j["output_dir"] = c.output_dir;
  j["data"] = {{"num_classes", c.data.num_classes},
               {"dim", c.data.dim},
               {"within_class_scale", c.data.within_class_scale},
               {"separation", c.data.separation},
               {"seed", c.data.seed}};
  const auto& s = c.stream;
  j["stream"] = {{"type", to_string(s.kind)},
                 {"length", s.length},
                 {"fetch_size", s.fetch_size},
                 {"segment",
                  {{"n_seq", s.segment.n_seq},
                   {"within_segment_drift", s.segment.within_segment_drift},
                   {"num_segments", s.segment.num_segments}}},
                 {"markov", {{"p_c", s.markov.p_c}, {"within_chain_drift", s.markov.within_chain_drift}}},
                 {"walk",
                  {{"trajectory_length", s.walk.trajectory_length},
                   {"num_loops", s.walk.num_loops},
                   {"switch_prob", s.walk.switch_prob},
                   {"drift", s.walk.drift}}},
                 {"partitions",
                  {{"count", s.num_partitions},
                   {"samples_per_partition", s.samples_per_partition},
                   {"transition_fraction", s.transition_fraction},
                   {"permutations", s.permutations}}}};
  j["methods"] = Json::array();
  for (const auto& m : c.methods) {
    Json mj{{"name", m.name}, {"mode", to_string(m.mode.kind)}, {"epochs", m.mode.epochs},
            {"k", m.hyper_sampling_k}, {"shuffle_stream", m.shuffle_stream}};
    if (m.buffer) mj["buffer"] = buffer_json(*m.buffer);
    j["methods"].push_back(std::move(mj));
  }
  const auto& l = c.learner;
  j["learner"] = {{"hidden", l.hidden},
                  {"embedding", l.embedding},
                  {"batch_size", l.batch_size},
                  {"optimizer", {{"momentum", l.optimizer.momentum}, {"weight_decay", l.optimizer.weight_decay}}},
                  {"schedule",
                   {{"kind", to_string(l.schedule.kind)},
                    {"base_lr", l.schedule.base_lr},
                    {"total_steps", l.schedule.total_steps},
                    {"decay_start_fraction", l.schedule.decay_start_fraction}}},
                  {"augmentation",
                   {{"noise_scale", l.augmentation.noise_scale},
                    {"dropout_prob", l.augmentation.dropout_prob},
                    {"scale_lo", l.augmentation.scale_lo},
                    {"scale_hi", l.augmentation.scale_hi}}}};
  j["bandwidth"] = {{"t_data", c.bandwidth.t_data}, {"t_opt", c.bandwidth.t_opt}, {"k", c.bandwidth.hyper_sampling_k}};
  const auto& e = c.evaluation;
  j["evaluation"] = {{"checkpoint_fractions", e.checkpoint_fractions},
                     {"checkpoint_ticks", e.checkpoint_ticks},
                     {"probe_train_per_class", e.probe_train_per_class},
                     {"probe_test_per_class", e.probe_test_per_class},
                     {"probe_max_iters", e.probe.max_iters},
                     {"probe_grad_tol", e.probe.grad_tol},
                     {"probe_every_checkpoint", e.probe_every_checkpoint}};
  j["analytics"] = {{"b_values", c.analytics.b_values},
                    {"p_c_values", c.analytics.p_c_values},
                    {"trials", c.analytics.trials},
                    {"fifo_multiple", c.analytics.fifo_multiple},
                    {"seed", c.analytics.seed}};
  return j;
}

void apply_env_overrides(ExperimentConfig& config) {
  if (const char* dir = std::getenv("CSSL_OUTPUT_DIR"); dir && *dir) config.output_dir = dir;
  if (const char* seed = std::getenv("CSSL_SEED"); seed && *seed) {
    std::uint64_t v = 0;
    const std::string text(seed);
    const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
    if (res.ec != std::errc() || res.ptr != text.data() + text.size())
      throw ConfigValidationError(std::vector<Diagnostic>{{"CSSL_SEED", "expected a non-negative integer, got '" + text + "'"}});
    config.seeds = {v};
  }
}

// ---------------------------------------------------------------------------
// Planning

std::size_t stream_length(const ExperimentConfig& c) {
  const auto& s = c.stream;
  switch (s.kind) {
    case StreamSection::Kind::iid:
    case StreamSection::Kind::markov: return s.length;
    case StreamSection::Kind::segment:
      return static_cast<std::size_t>(s.segment.n_seq) * static_cast<std::size_t>(s.segment.num_segments);
    case StreamSection::Kind::walk: return s.walk.trajectory_length * static_cast<std::size_t>(s.walk.num_loops);
    case StreamSection::Kind::partitioned:
      return static_cast<std::size_t>(s.num_partitions) * s.samples_per_partition;
  }
  return 0;
}

namespace {

std::size_t fetch_size(const ExperimentConfig& c) {
  return c.stream.fetch_size ? c.stream.fetch_size : c.learner.batch_size;
}

int method_k(const ExperimentConfig& c, const MethodConfig& m) {
  if (m.mode.kind != RunMode::Kind::buffered) return 1;
  return m.hyper_sampling_k > 0 ? m.hyper_sampling_k : c.bandwidth.hyper_sampling_k;
}

BandwidthConfig method_bandwidth(const ExperimentConfig& c, const MethodConfig& m) {
  BandwidthConfig bw = c.bandwidth;
  bw.hyper_sampling_k = method_k(c, m);
  return bw;
}

std::size_t num_fetches(const ExperimentConfig& c, std::size_t length) {
  const std::size_t f = fetch_size(c);
  return (length + f - 1) / f;
}

}  // namespace

std::int64_t planned_steps(const ExperimentConfig& c, const MethodConfig& m, std::size_t length) {
  const auto nf = static_cast<std::int64_t>(num_fetches(c, length));
  switch (m.mode.kind) {
    case RunMode::Kind::conventional: return nf;
    case RunMode::Kind::buffered: return nf * method_k(c, m);
    case RunMode::Kind::epoch_oracle: {
      const std::size_t b = std::min(c.learner.batch_size, length);
      return b ? static_cast<std::int64_t>(m.mode.epochs) * static_cast<std::int64_t>(length / b) : 0;
    }
  }
  return 0;
}

std::vector<Tick> checkpoint_ticks_for(const ExperimentConfig& c, const MethodConfig& m, std::size_t length) {
  std::vector<Tick> ticks;
  if (c.evaluation.checkpoint_fractions.empty()) {
    ticks = c.evaluation.checkpoint_ticks;
  } else {
    const auto nf = static_cast<std::int64_t>(num_fetches(c, length));
    const BandwidthConfig bw = method_bandwidth(c, m);
    for (double f : c.evaluation.checkpoint_fractions) {
      if (m.mode.kind == RunMode::Kind::epoch_oracle) {
        const auto steps = static_cast<double>(planned_steps(c, m, length));
        ticks.push_back(nf * bw.t_data + static_cast<Tick>(std::llround(f * steps)) * bw.t_opt);
      } else {
        const Tick cycle = std::max<Tick>(bw.t_data, static_cast<Tick>(bw.hyper_sampling_k) * bw.t_opt);
        ticks.push_back(bw.t_data + static_cast<Tick>(std::llround(f * static_cast<double>(nf))) * cycle);
      }
    }
  }
  std::sort(ticks.begin(), ticks.end());
  ticks.erase(std::unique(ticks.begin(), ticks.end()), ticks.end());
  return ticks;
}

// ---------------------------------------------------------------------------
// Analytics sweep

CsvTable run_analytics(const AnalyticsSection& a) {
  CsvTable t;
  t.header = {"b",         "p_c",     "exact",   "closed", "abs_diff", "monte_carlo", "mc_sigma", "mc_z",
              "B",         "fifo_closed", "ratio_exact", "ratio_approx", "ratio_rel_err"};
  const std::int64_t max_b = a.b_values.empty() ? 2 : *std::max_element(a.b_values.begin(), a.b_values.end());
  for (std::size_t pi = 0; pi < a.p_c_values.size(); ++pi) {
    const double p = a.p_c_values[pi];
    const auto mc = correlation_likelihood_monte_carlo_prefixes(max_b, p, a.trials, derive_seed(a.seed, pi));
    for (const std::int64_t b : a.b_values) {
      const double exact = correlation_likelihood_exact(b, p);
      const double closed = correlation_likelihood_closed(b, p);
      const MonteCarloEstimate& est = mc[static_cast<std::size_t>(b)];
      const double diff = est.estimate - exact;
      const double z = est.sigma > 0.0 ? diff / est.sigma : (diff == 0.0 ? 0.0 : std::copysign(INFINITY, diff));
      const std::int64_t big = a.fifo_multiple * b;
      const double fifo = correlation_likelihood_closed(big, p);
      std::vector<std::string> row{std::to_string(b), format_double(p), format_double(exact), format_double(closed),
                                   format_double(std::abs(closed - exact)), format_double(est.estimate),
                                   format_double(est.sigma), format_double(z), std::to_string(big), format_double(fifo)};
      if (closed > 0.0) {
        const double ratio = fifo / closed;
        const double approx = static_cast<double>(b) / static_cast<double>(big);
        row.push_back(format_double(ratio));
        row.push_back(format_double(approx));
        row.push_back(format_double(std::abs(ratio - approx) / approx));
      } else {
        row.insert(row.end(), {"", "", ""});
      }
      t.rows.push_back(std::move(row));
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Execution

namespace {

// Salts for derive_seed so every component draws from its own generator.
enum Salt : std::uint64_t {
  kModel = 1,
  kStream = 2,
  kShuffle = 3,
  kProbeTrain = 4,
  kProbeTest = 5,
  kInit = 6,
  kRun = 7,
};

std::string timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  localtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y%m%d-%H%M%S");
  return os.str();
}

fs::path fresh_directory(const fs::path& root, const std::string& stem) {
  fs::path dir = root / stem;
  for (int n = 2; fs::exists(dir); ++n) dir = root / (stem + "-" + std::to_string(n));
  fs::create_directories(dir);
  return dir;
}

std::string run_dir_name(std::uint64_t seed, int perm) {
  std::string name = "seed-" + std::to_string(seed);
  if (perm >= 0) name += "-perm-" + std::to_string(perm);
  return name;
}

Matrix columns_of(const std::vector<Sample>& samples, std::vector<int>& labels) {
  Matrix x(samples.empty() ? 0 : samples.front().payload.size(), static_cast<Eigen::Index>(samples.size()));
  labels.clear();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    x.col(static_cast<Eigen::Index>(i)) = samples[i].payload;
    labels.push_back(samples[i].class_label);
  }
  return x;
}

std::string opt_cell(const std::optional<double>& v) { return v ? format_double(*v) : ""; }

Json opt_json(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

Json opt_vector_json(const std::vector<std::optional<double>>& xs) {
  Json out = Json::array();
  for (const auto& x : xs) out.push_back(opt_json(x));
  return out;
}

class RunExecutor {
 public:
  RunExecutor(const ExperimentConfig& c, const MethodConfig& m, std::uint64_t seed, int perm,
              std::optional<fs::path> dir)
      : c_(c), m_(m), seed_(seed), perm_(perm), dir_(std::move(dir)) {}

  RunRecord execute() {
    ClassModelConfig mc = c_.data;
    mc.seed = derive_seed(c_.data.seed, derive_seed(seed_, kModel));
    model_ = make_class_model(mc);
    if (c_.stream.kind == StreamSection::Kind::partitioned) {
      std::vector<int> order;
      if (perm_ >= 0) order = c_.stream.permutations[static_cast<std::size_t>(perm_)];
      schedule_ = make_partition_schedule(model_, c_.stream.num_partitions, c_.stream.samples_per_partition, order,
                                          c_.stream.transition_fraction);
      class_to_partition_ = schedule_->class_to_partition(model_.num_classes);
    }

    StreamPtr stream = make_stream();
    if (m_.shuffle_stream) stream = make_shuffled_stream(*stream, derive_seed(seed_, kShuffle));
    const std::size_t length = stream->length();

    std::vector<int> train_labels, test_labels;
    train_x_ = columns_of(draw_labelled_set(model_, c_.evaluation.probe_train_per_class, derive_seed(seed_, kProbeTrain)),
                          train_labels);
    test_x_ = columns_of(draw_labelled_set(model_, c_.evaluation.probe_test_per_class, derive_seed(seed_, kProbeTest)),
                         test_labels);
    train_y_ = std::move(train_labels);
    test_y_ = std::move(test_labels);

    LearnerDims dims{c_.data.dim, c_.learner.hidden, c_.learner.embedding};
    LearnerState learner = make_learner(dims, c_.learner.optimizer, derive_seed(seed_, kInit));

    planned_ = planned_steps(c_, m_, length);
    RunOptions opts;
    opts.batch_size = c_.learner.batch_size;
    opts.stream_batch_size = c_.stream.fetch_size;
    opts.augmentation = c_.learner.augmentation;
    opts.schedule = c_.learner.schedule;
    if (opts.schedule.total_steps == 0) opts.schedule.total_steps = std::max<std::int64_t>(planned_, 1);
    opts.checkpoints = checkpoint_ticks_for(c_, m_, length);
    opts.seed = derive_seed(seed_, kRun);
    opts.class_to_partition = class_to_partition_;
    opts.composition_window = composition_window();
    opts.evaluator = [this](const LearnerState& s) { return evaluate(s); };

    std::optional<CsvAppender> metrics;
    if (dir_) {
      metrics.emplace(*dir_ / "metrics.csv", metrics_header());
      opts.on_checkpoint = [&](const CheckpointRecord& rec) { metrics->append(metrics_row(rec)); };
    }

    std::optional<ReplayBuffer> buffer;
    if (m_.buffer) buffer.emplace(m_.buffer->capacity, m_.buffer->policy, m_.buffer->alpha);

    RunRecord out;
    out.log = run(m_.mode, *stream, buffer ? &*buffer : nullptr, learner, method_bandwidth(c_, m_), opts);
    // Final-only probing keys on the planned step count; a run that ended
    // short of it is probed here instead and its metrics rewritten.
    if (!out.log.checkpoints.empty()) {
      CheckpointRecord& last = out.log.checkpoints.back();
      if (!last.eval || std::isnan(last.eval->accuracy)) {
        force_probe_ = true;
        last.eval = evaluate(learner);
        if (metrics) {
          metrics.reset();
          metrics.emplace(*dir_ / "metrics.csv", metrics_header());
          for (const auto& rec : out.log.checkpoints) metrics->append(metrics_row(rec));
        }
      }
    }
    if (buffer) out.final_buffer = buffer->entries();
    out.summary = summarize(out.log);

    if (dir_) {
      write_json(*dir_ / "summary.json", summary_json(out.summary));
      if (buffer) write_buffer_snapshot(*dir_ / "buffer.csv", out.final_buffer);
      // After a numerical failure this is the last good state.
      save_learner(*dir_ / "learner.json", learner);
    }
    return out;
  }

 private:
  StreamPtr make_stream() const {
    const std::uint64_t s = derive_seed(seed_, kStream);
    switch (c_.stream.kind) {
      case StreamSection::Kind::iid: return make_iid_stream(model_, c_.stream.length, s);
      case StreamSection::Kind::segment: return make_segment_stream(model_, c_.stream.segment, s);
      case StreamSection::Kind::markov: return make_markov_stream(model_, c_.stream.markov, c_.stream.length, s);
      case StreamSection::Kind::walk: return make_walk_stream(model_, c_.stream.walk, s);
      case StreamSection::Kind::partitioned: return make_partitioned_stream(model_, *schedule_, s);
    }
    throw ConfigError("unknown stream type");
  }

  // Buffered runs report their buffer; others the same number of most
  // recently trained samples, so compositions are comparable.
  std::size_t composition_window() const {
    std::size_t w = 0;
    for (const auto& m : c_.methods)
      if (m.buffer) w = std::max(w, m.buffer->capacity);
    return w ? w : c_.learner.batch_size;
  }

  EvalSnapshot evaluate(const LearnerState& s) const {
    EvalSnapshot e;
    if (!force_probe_ && !c_.evaluation.probe_every_checkpoint && s.step_count < planned_) {
      e.accuracy = std::numeric_limits<double>::quiet_NaN();
      return e;
    }
    const ProbeResult r = linear_probe(encode(s.params, train_x_), train_y_, encode(s.params, test_x_), test_y_,
                                       model_.num_classes, c_.evaluation.probe, class_to_partition_);
    e.accuracy = r.accuracy;
    e.per_class = r.per_class;
    e.per_partition = r.per_group;
    return e;
  }

  int num_partitions() const { return schedule_ ? static_cast<int>(schedule_->partitions.size()) : 0; }

  int stage_of(const CheckpointRecord& rec) const {
    if (!schedule_ || rec.samples_fetched == 0) return 0;
    return schedule_->stage_at(std::min(rec.samples_fetched, schedule_->length()) - 1);
  }

  double past_share(const CheckpointRecord& rec, int stage) const {
    if (!schedule_ || rec.buffer_size == 0) return 0.0;
    std::size_t past = 0;
    for (int k = 0; k < stage; ++k) {
      const auto it = rec.composition.find(schedule_->permutation[static_cast<std::size_t>(k)]);
      if (it != rec.composition.end()) past += it->second;
    }
    return static_cast<double>(past) / static_cast<double>(rec.buffer_size);
  }

  std::vector<std::string> metrics_header() const {
    std::vector<std::string> h{"checkpoint",    "tick",        "fetch_ticks",  "train_ticks",
                               "idle_ticks",    "step_count",  "stream_batches", "samples_fetched",
                               "within_batch_correlation", "batches_measured", "mean_loss", "lr",
                               "buffer_size",   "distinct_sources", "buffer_pair_correlation", "accuracy"};
    if (schedule_) {
      h.push_back("stage");
      h.push_back("past_partition_share");
      for (int p = 0; p < num_partitions(); ++p) h.push_back("acc_p" + std::to_string(p));
      for (int p = 0; p < num_partitions(); ++p) h.push_back("held_p" + std::to_string(p));
    }
    return h;
  }

  std::vector<std::string> metrics_row(const CheckpointRecord& r) const {
    const bool probed = r.eval && !std::isnan(r.eval->accuracy);
    std::vector<std::string> row{std::to_string(r.index),
                                 std::to_string(r.tick),
                                 std::to_string(r.fetch_ticks),
                                 std::to_string(r.train_ticks),
                                 std::to_string(r.idle_ticks),
                                 std::to_string(r.step_count),
                                 std::to_string(r.stream_batches),
                                 std::to_string(r.samples_fetched),
                                 format_double(r.within_batch_correlation),
                                 std::to_string(r.batches_measured),
                                 format_double(r.mean_loss),
                                 format_double(r.lr),
                                 std::to_string(r.buffer_size),
                                 std::to_string(r.distinct_sources),
                                 format_double(r.buffer_pair_correlation),
                                 probed ? format_double(r.eval->accuracy) : ""};
    if (schedule_) {
      const int stage = stage_of(r);
      row.push_back(std::to_string(stage));
      row.push_back(format_double(past_share(r, stage)));
      for (int p = 0; p < num_partitions(); ++p)
        row.push_back(probed && p < static_cast<int>(r.eval->per_partition.size())
                          ? format_double(r.eval->per_partition[static_cast<std::size_t>(p)])
                          : "");
      for (int p = 0; p < num_partitions(); ++p) {
        const auto it = r.composition.find(p);
        row.push_back(std::to_string(it == r.composition.end() ? 0 : it->second));
      }
    }
    return row;
  }

  RunSummary summarize(const RunLog& log) const {
    RunSummary s;
    s.method = m_.name;
    s.seed = seed_;
    s.permutation = perm_;
    s.completed = log.completed;
    s.stop_reason = log.stop_reason;
    s.idle_fraction = log.idle_fraction();
    const DataUsage u = data_usage(log);
    s.training_steps = u.training_steps;
    s.stream_batches = log.stream_batches_fetched;
    s.effective_hyper_sampling = u.effective_hyper_sampling;
    s.single_pass = single_pass_guarantee(log);
    s.elapsed = log.elapsed;
    s.final_accuracy = std::numeric_limits<double>::quiet_NaN();
    if (!log.checkpoints.empty()) {
      const CheckpointRecord& last = log.checkpoints.back();
      if (last.eval) s.final_accuracy = last.eval->accuracy;
      s.steady_state_correlation = last.within_batch_correlation;
    }
    if (!schedule_) return s;

    const auto& cps = log.checkpoints;
    std::vector<std::vector<double>> per_partition;
    for (const auto& rec : cps) {
      const int stage = stage_of(rec);
      s.checkpoint_stage.push_back(stage);
      s.past_partition_share.push_back(past_share(rec, stage));
      per_partition.push_back(rec.eval ? rec.eval->per_partition : std::vector<double>{});
      per_partition.back().resize(static_cast<std::size_t>(num_partitions()), std::numeric_limits<double>::quiet_NaN());
    }
    s.openset = openset_accuracy(per_partition, s.checkpoint_stage, *schedule_);

    // Baseline for a partition: the last checkpoint still inside its stage.
    std::vector<PartitionAccuracySeries> series;
    const int stages = static_cast<int>(schedule_->num_stages());
    for (int k = 0; k + 1 < stages; ++k) {
      std::optional<std::size_t> end;
      for (std::size_t i = 0; i < cps.size(); ++i)
        if (s.checkpoint_stage[i] == k) end = i;
      if (!end) continue;
      PartitionAccuracySeries ps;
      ps.partition = schedule_->permutation[static_cast<std::size_t>(k)];
      ps.end_of_training_checkpoint = *end;
      for (const auto& acc : per_partition) ps.accuracy.push_back(acc[static_cast<std::size_t>(ps.partition)]);
      series.push_back(std::move(ps));
    }
    if (!cps.empty() && !series.empty())
      s.forgetting = mean_relative_drop(forgetting_curve(series), cps.size() - 1);
    return s;
  }

  Json summary_json(const RunSummary& s) const {
    Json j;
    j["method"] = s.method;
    j["mode"] = to_string(m_.mode.kind);
    j["streaming"] = m_.mode.streaming() && !m_.shuffle_stream;
    j["seed"] = s.seed;
    j["permutation"] = s.permutation;
    if (schedule_) j["permutation_order"] = schedule_->permutation;
    j["completed"] = s.completed;
    j["stop_reason"] = s.stop_reason;
    j["final_accuracy"] = std::isnan(s.final_accuracy) ? Json(nullptr) : Json(s.final_accuracy);
    j["steady_state_correlation"] = s.steady_state_correlation;
    j["idle_fraction"] = s.idle_fraction;
    j["training_steps"] = s.training_steps;
    j["stream_batches"] = s.stream_batches;
    j["effective_hyper_sampling"] = s.effective_hyper_sampling;
    j["single_pass"] = s.single_pass;
    j["elapsed_ticks"] = s.elapsed;
    if (schedule_) {
      j["forgetting"] = opt_json(s.forgetting);
      j["openset"] = opt_vector_json(s.openset);
      j["past_partition_share"] = s.past_partition_share;
      j["checkpoint_stage"] = s.checkpoint_stage;
    }
    return j;
  }

  const ExperimentConfig& c_;
  const MethodConfig& m_;
  std::uint64_t seed_;
  int perm_;
  std::optional<fs::path> dir_;
  ClassModel model_;
  std::optional<PartitionSchedule> schedule_;
  std::vector<int> class_to_partition_;
  Matrix train_x_, test_x_;
  std::vector<int> train_y_, test_y_;
  std::int64_t planned_ = 0;
  bool force_probe_ = false;
};

MethodAggregate aggregate_runs(const std::string& method, const std::vector<const RunRecord*>& runs) {
  MethodAggregate a;
  a.method = method;
  a.runs = runs.size();
  std::vector<double> acc, corr, idle, forget;
  std::size_t n_cp = 0;
  for (const RunRecord* r : runs) {
    if (!std::isnan(r->summary.final_accuracy)) acc.push_back(r->summary.final_accuracy);
    corr.push_back(r->summary.steady_state_correlation);
    idle.push_back(r->summary.idle_fraction);
    if (r->summary.forgetting) forget.push_back(*r->summary.forgetting);
    n_cp = std::max(n_cp, r->summary.openset.size());
  }
  a.final_accuracy_mean = acc.empty() ? std::numeric_limits<double>::quiet_NaN() : mean(acc);
  a.final_accuracy_std = sample_stddev(acc);
  a.steady_state_correlation_mean = mean(corr);
  a.steady_state_correlation_std = sample_stddev(corr);
  a.idle_fraction_mean = mean(idle);
  if (!forget.empty()) a.forgetting_mean = mean(forget);
  for (std::size_t c = 0; c < n_cp; ++c) {
    std::vector<double> open, share;
    for (const RunRecord* r : runs) {
      if (c < r->summary.openset.size() && r->summary.openset[c]) open.push_back(*r->summary.openset[c]);
      if (c < r->summary.past_partition_share.size()) share.push_back(r->summary.past_partition_share[c]);
    }
    a.openset_mean.push_back(open.empty() ? std::nullopt : std::optional<double>(mean(open)));
    a.past_partition_share_mean.push_back(mean(share));
  }
  return a;
}

Json aggregate_json(const MethodAggregate& a) {
  Json j;
  j["method"] = a.method;
  j["runs"] = a.runs;
  j["final_accuracy_mean"] = std::isnan(a.final_accuracy_mean) ? Json(nullptr) : Json(a.final_accuracy_mean);
  j["final_accuracy_std"] = a.final_accuracy_std;
  j["steady_state_correlation_mean"] = a.steady_state_correlation_mean;
  j["steady_state_correlation_std"] = a.steady_state_correlation_std;
  j["idle_fraction_mean"] = a.idle_fraction_mean;
  if (!a.openset_mean.empty()) {
    j["forgetting_mean"] = opt_json(a.forgetting_mean);
    j["openset_mean"] = opt_vector_json(a.openset_mean);
    j["past_partition_share_mean"] = a.past_partition_share_mean;
  }
  return j;
}

}  // namespace

bool ExperimentResult::all_completed() const {
  return std::all_of(runs.begin(), runs.end(), [](const RunRecord& r) { return r.summary.completed; });
}

const MethodAggregate* ExperimentResult::aggregate(const std::string& method) const {
  for (const auto& a : aggregates)
    if (a.method == method) return &a;
  return nullptr;
}

std::vector<const RunRecord*> ExperimentResult::runs_of(const std::string& method) const {
  std::vector<const RunRecord*> out;
  for (const auto& r : runs)
    if (r.summary.method == method) out.push_back(&r);
  return out;
}

ExperimentResult run_experiment(const ExperimentConfig& config, const ExecutionOptions& options) {
  std::vector<Diagnostic> diags = validate(config);
  if (!diags.empty()) throw ConfigValidationError(std::move(diags));
  for (const auto& name : options.only_methods) {
    const bool known = std::any_of(config.methods.begin(), config.methods.end(),
                                   [&](const MethodConfig& m) { return m.name == name; });
    if (!known) throw ConfigValidationError(std::vector<Diagnostic>{{"methods", "no method named '" + name + "'"}});
  }

  ExperimentResult result;
  result.config = config;
  std::optional<fs::path> root;
  if (options.write_outputs) {
    root = fresh_directory(config.output_dir, config.name + "-" + timestamp());
    write_text(*root / "config.json", options.config_text.empty() ? to_json(config).dump(2) + "\n" : options.config_text);
    write_json(*root / "resolved_config.json", to_json(config));
    result.output_dir = root;
  }

  if (config.kind == ExperimentKind::analytics_only) {
    result.analytics = run_analytics(config.analytics);
    if (root) write_csv(*root / "analytics.csv", *result.analytics);
    return result;
  }

  std::vector<int> perms{-1};
  if (config.stream.kind == StreamSection::Kind::partitioned && !config.stream.permutations.empty()) {
    perms.clear();
    for (std::size_t p = 0; p < config.stream.permutations.size(); ++p) perms.push_back(static_cast<int>(p));
  }

  for (const auto& method : config.methods) {
    if (!options.only_methods.empty() &&
        std::find(options.only_methods.begin(), options.only_methods.end(), method.name) == options.only_methods.end())
      continue;
    for (std::uint64_t seed : config.seeds) {
      for (int perm : perms) {
        std::optional<fs::path> dir;
        if (root) {
          dir = *root / method.name / run_dir_name(seed, perm);
          fs::create_directories(*dir);
        }
        const auto t0 = std::chrono::steady_clock::now();
        RunExecutor exec(config, method, seed, perm, dir);
        result.runs.push_back(exec.execute());
        if (options.progress) {
          const auto& s = result.runs.back().summary;
          const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
          *options.progress << method.name << " " << run_dir_name(seed, perm) << ": accuracy "
                            << (std::isnan(s.final_accuracy) ? std::string("n/a") : format_double(s.final_accuracy))
                            << ", correlation " << s.steady_state_correlation << ", steps " << s.training_steps
                            << (s.completed ? "" : ", STOPPED: " + s.stop_reason) << " (" << std::fixed
                            << std::setprecision(1) << secs << " s)" << std::defaultfloat << std::setprecision(6)
                            << "\n";
        }
      }
    }
  }

  for (const auto& method : config.methods) {
    const auto runs = result.runs_of(method.name);
    if (!runs.empty()) result.aggregates.push_back(aggregate_runs(method.name, runs));
  }

  if (root) {
    Json summary;
    summary["name"] = config.name;
    summary["kind"] = to_string(config.kind);
    summary["seeds"] = config.seeds;
    summary["methods"] = Json::array();
    for (const auto& a : result.aggregates) summary["methods"].push_back(aggregate_json(a));
    summary["runs"] = Json::array();
    for (const auto& r : result.runs) {
      const auto& s = r.summary;
      summary["runs"].push_back({{"method", s.method},
                                 {"seed", s.seed},
                                 {"permutation", s.permutation},
                                 {"dir", s.method + "/" + run_dir_name(s.seed, s.permutation)},
                                 {"completed", s.completed},
                                 {"final_accuracy", std::isnan(s.final_accuracy) ? Json(nullptr) : Json(s.final_accuracy)},
                                 {"steady_state_correlation", s.steady_state_correlation},
                                 {"forgetting", opt_json(s.forgetting)}});
    }
    write_json(*root / "summary.json", summary);

    CsvTable table;
    table.header = {"method", "runs", "final_accuracy_mean", "final_accuracy_std", "steady_state_correlation_mean",
                    "steady_state_correlation_std", "idle_fraction_mean", "forgetting_mean"};
    for (const auto& a : result.aggregates)
      table.rows.push_back({a.method, std::to_string(a.runs), format_double(a.final_accuracy_mean),
                            format_double(a.final_accuracy_std), format_double(a.steady_state_correlation_mean),
                            format_double(a.steady_state_correlation_std), format_double(a.idle_fraction_mean),
                            opt_cell(a.forgetting_mean)});
    write_csv(*root / "summary.csv", table);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Comparison

namespace {

struct LoadedRun {
  std::string label;
  fs::path dir;
  CsvTable metrics;
  Json summary;
};

void collect_runs(const fs::path& dir, const fs::path& base, std::vector<LoadedRun>& out) {
  if (fs::exists(dir / "metrics.csv")) {
    LoadedRun r;
    r.dir = dir;
    std::string label = fs::relative(dir, base.has_parent_path() ? base.parent_path() : base).generic_string();
    if (label.empty() || label == ".") label = dir.filename().string();
    r.label = label;
    r.metrics = read_csv(dir / "metrics.csv");
    if (fs::exists(dir / "summary.json")) r.summary = read_json(dir / "summary.json");
    out.push_back(std::move(r));
    return;
  }
  std::vector<fs::path> children;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_directory()) children.push_back(entry.path());
  std::sort(children.begin(), children.end());
  for (const auto& child : children) collect_runs(child, base, out);
}

std::optional<double> cell_number(const std::string& s) {
  if (s.empty()) return std::nullopt;
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) return std::nullopt;
    return v;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

std::optional<double> json_number(const Json& j, const char* key) {
  if (!j.is_object() || !j.contains(key) || !j[key].is_number()) return std::nullopt;
  return j[key].get<double>();
}

}  // namespace

ComparisonResult compare_runs(const std::vector<fs::path>& dirs, const std::optional<fs::path>& out_dir) {
  if (dirs.empty()) throw ConfigError("compare: no run directories given");
  std::vector<LoadedRun> runs;
  for (const auto& d : dirs) {
    if (!fs::is_directory(d)) throw IoError("compare: not a directory: " + d.string());
    const std::size_t before = runs.size();
    collect_runs(d, fs::absolute(d).lexically_normal(), runs);
    if (runs.size() == before) throw IoError("compare: no metrics.csv under " + d.string());
  }

  ComparisonResult res;
  for (const auto& r : runs) res.labels.push_back(r.label);

  // Ticks present in every run.
  std::vector<std::map<Tick, std::size_t>> row_of(runs.size());
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const int col = runs[i].metrics.column("tick");
    if (col < 0) throw IoError("compare: " + runs[i].dir.string() + "/metrics.csv has no tick column");
    for (std::size_t k = 0; k < runs[i].metrics.rows.size(); ++k)
      row_of[i][std::stoll(runs[i].metrics.rows[k][static_cast<std::size_t>(col)])] = k;
  }
  std::set<Tick> all_ticks;
  for (const auto& m : row_of)
    for (const auto& kv : m) all_ticks.insert(kv.first);
  for (Tick t : all_ticks) {
    const bool everywhere = std::all_of(row_of.begin(), row_of.end(), [&](const auto& m) { return m.count(t) > 0; });
    if (everywhere) res.common_ticks.push_back(t);
  }
  if (res.common_ticks.size() != all_ticks.size()) {
    res.warnings.push_back("checkpoint grids differ; kept " + std::to_string(res.common_ticks.size()) + " of " +
                           std::to_string(all_ticks.size()) + " ticks common to every run");
    if (res.common_ticks.empty()) res.warnings.push_back("no checkpoint tick is shared by all runs");
  }

  // Metrics: columns present in every run, except the alignment keys.
  std::vector<std::string> metrics;
  for (const auto& name : runs.front().metrics.header) {
    if (name == "tick" || name == "checkpoint") continue;
    const bool shared = std::all_of(runs.begin(), runs.end(), [&](const LoadedRun& r) { return r.metrics.column(name) >= 0; });
    if (shared) metrics.push_back(name);
  }

  res.table.header = {"metric", "tick"};
  for (const auto& l : res.labels) res.table.header.push_back(l);
  for (const auto& metric : metrics) {
    for (Tick t : res.common_ticks) {
      std::vector<std::string> row{metric, std::to_string(t)};
      for (std::size_t i = 0; i < runs.size(); ++i) {
        const int col = runs[i].metrics.column(metric);
        row.push_back(runs[i].metrics.rows[row_of[i][t]][static_cast<std::size_t>(col)]);
      }
      res.table.rows.push_back(std::move(row));
    }
  }

  // Final accuracy and forgetting, with deltas against the first run.
  Json entries = Json::array();
  std::optional<double> ref_acc, ref_forget;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& r = runs[i];
    std::optional<double> acc = json_number(r.summary, "final_accuracy");
    if (!acc && !r.metrics.rows.empty()) {
      const int col = r.metrics.column("accuracy");
      if (col >= 0) acc = cell_number(r.metrics.rows.back()[static_cast<std::size_t>(col)]);
    }
    const std::optional<double> forget = json_number(r.summary, "forgetting");
    if (i == 0) {
      ref_acc = acc;
      ref_forget = forget;
    }
    Json e{{"label", r.label}, {"dir", r.dir.generic_string()}, {"final_accuracy", opt_json(acc)},
           {"forgetting", opt_json(forget)}};
    e["final_accuracy_delta"] = acc && ref_acc ? Json(*acc - *ref_acc) : Json(nullptr);
    e["forgetting_delta"] = forget && ref_forget ? Json(*forget - *ref_forget) : Json(nullptr);
    entries.push_back(std::move(e));
  }
  res.summary["reference"] = res.labels.front();
  res.summary["common_ticks"] = res.common_ticks;
  res.summary["warnings"] = res.warnings;
  res.summary["runs"] = std::move(entries);

  if (out_dir) {
    write_csv(*out_dir / "comparison.csv", res.table);
    write_json(*out_dir / "comparison.json", res.summary);
  }
  return res;
}

}  // namespace cssl

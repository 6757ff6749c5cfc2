// Runs the eleven acceptance criteria and prints one PASS/FAIL line each.
// Experiments run in memory from the configs in --configs (default:
// configs/acceptance under the source tree). Exit status is nonzero when any
// criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "checks.hpp"
#include "cssl/experiment.hpp"

using namespace cssl;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os.precision(digits);
  os << v;
  return os.str();
}

struct Timed {
  ExperimentResult result;
  double seconds = 0.0;
};

Timed run_config(const fs::path& path) {
  const ExperimentConfig config = load_config(path);
  ExecutionOptions opts;
  opts.write_outputs = false;
  const auto t0 = Clock::now();
  Timed t{run_experiment(config, opts), 0.0};
  t.seconds = seconds_since(t0);
  return t;
}

std::vector<double> per_run(const ExperimentResult& r, const std::string& method,
                            const std::function<double(const RunSummary&)>& field) {
  std::vector<double> out;
  for (const RunRecord* run : r.runs_of(method)) out.push_back(field(run->summary));
  return out;
}

const MethodAggregate& agg(const ExperimentResult& r, const std::string& method) {
  const MethodAggregate* a = r.aggregate(method);
  if (!a) throw std::runtime_error("no method '" + method + "' in " + r.config.name);
  return *a;
}

double column(const CsvTable& t, const std::vector<std::string>& row, const std::string& name) {
  const int c = t.column(name);
  if (c < 0) throw std::runtime_error("analytics table has no column " + name);
  return std::stod(row[static_cast<std::size_t>(c)]);
}

// ---------------------------------------------------------------------------

Verdict ac1(const CsvTable& table, double seconds) {
  std::size_t points = 0, closed_ok = 0, mc_ok = 0;
  double worst = 0.0;
  for (const auto& row : table.rows) {
    ++points;
    const double diff = std::abs(column(table, row, "closed") - column(table, row, "exact"));
    worst = std::max(worst, diff);
    closed_ok += diff <= 1e-12;
    // p_c in {0, 1} is deterministic: sigma is 0 and z is 0 when the estimate is exact.
    mc_ok += std::abs(column(table, row, "mc_z")) <= 3.0;
  }
  const double mc_share = points ? static_cast<double>(mc_ok) / static_cast<double>(points) : 0.0;
  Verdict v;
  v.pass = points > 0 && closed_ok == points && mc_share >= 0.99 && seconds < 60.0;
  v.detail = std::to_string(points) + " points, max |closed - exact| " + fmt(worst, 3) + ", Monte Carlo within 3 sigma at " +
             fmt(100.0 * mc_share, 4) + "%, " + fmt(seconds, 3) + " s";
  return v;
}

Verdict ac2(const CsvTable& table) {
  std::size_t interior = 0, reduced = 0, ratio_points = 0, ratio_ok = 0;
  std::size_t misses_small_window = 0;
  double worst_err = 0.0;
  std::string worst_at;
  for (const auto& row : table.rows) {
    const double p = column(table, row, "p_c");
    if (!(p > 0.0 && p < 1.0)) continue;
    const double b = column(table, row, "b");
    ++interior;
    reduced += column(table, row, "fifo_closed") < column(table, row, "closed");
    if (p > 0.9 + 1e-12) continue;
    ++ratio_points;
    const double err = column(table, row, "ratio_rel_err");
    if (err <= 0.10) {
      ++ratio_ok;
    } else {
      // b / B is the large-window limit; its relative error is about
      // p / (b (1 - p)).
      misses_small_window += b * (1.0 - p) < 10.0 * p + 1e-9;
    }
    if (err > worst_err) {
      worst_err = err;
      worst_at = "b=" + fmt(b) + " p_c=" + fmt(p, 2);
    }
  }
  Verdict v;
  v.pass = interior > 0 && reduced == interior && ratio_ok == ratio_points;
  v.detail = "P_c(16b) < P_c(b) at " + std::to_string(reduced) + "/" + std::to_string(interior) +
             " points; ratio within 10% of b/B at " + std::to_string(ratio_ok) + "/" + std::to_string(ratio_points) +
             " points with p_c <= 0.9 (worst " + fmt(100.0 * worst_err, 3) + "% at " + worst_at + "); " +
             std::to_string(misses_small_window) + " of " + std::to_string(ratio_points - ratio_ok) +
             " misses have b(1 - p_c) < 10 p_c";
  return v;
}

Verdict ac3(const Timed& t) {
  const auto& r = t.result;
  auto corr = [&](const std::string& m) {
    return per_run(r, m, [](const RunSummary& s) { return s.steady_state_correlation; });
  };
  const auto seq = corr("sequential"), fifo = corr("fifo"), minred = corr("minred");
  const double p1 = welch_t_test_greater(seq, fifo);
  const double p2 = welch_t_test_greater(fifo, minred);
  Verdict v;
  v.pass = seq.size() >= 10 && fifo.size() >= 10 && minred.size() >= 10 && p1 < 0.01 && p2 < 0.01 && t.seconds < 120.0;
  v.detail = "correlation sequential " + fmt(mean(seq)) + " > fifo " + fmt(mean(fifo)) + " (p=" + fmt(p1, 2) +
             ") > minred " + fmt(mean(minred)) + " (p=" + fmt(p2, 2) + "), " + std::to_string(seq.size()) +
             " seeds, " + fmt(t.seconds, 3) + " s";
  return v;
}

Verdict ac4(const Timed& t) {
  const auto& r = t.result;
  const double conv = agg(r, "conventional").final_accuracy_mean;
  const double fifo = agg(r, "fifo").final_accuracy_mean;
  const double minred = agg(r, "minred").final_accuracy_mean;
  const double oracle = agg(r, "oracle").final_accuracy_mean;
  Verdict v;
  v.pass = minred > fifo && fifo > conv && std::abs(minred - oracle) <= 0.02 && agg(r, "minred").runs >= 5 &&
           t.seconds < 300.0;
  v.detail = "accuracy minred " + fmt(minred) + ", fifo " + fmt(fifo) + ", conventional " + fmt(conv) +
             ", shuffled oracle " + fmt(oracle) + ", " + std::to_string(agg(r, "minred").runs) + " seeds, " +
             fmt(t.seconds, 3) + " s";
  return v;
}

Verdict ac5(const Timed& t) {
  const auto& r = t.result;
  const double conv = agg(r, "conventional").final_accuracy_mean;
  const double buffered = agg(r, "buffered").final_accuracy_mean;
  const double oracle = agg(r, "oracle").final_accuracy_mean;
  Verdict v;
  v.pass = std::abs(buffered - oracle) <= 0.02 && buffered - conv >= 0.05 && agg(r, "buffered").runs >= 5;
  v.detail = "accuracy buffered " + fmt(buffered) + ", epoch oracle " + fmt(oracle) + ", conventional " + fmt(conv) +
             ", " + std::to_string(agg(r, "buffered").runs) + " seeds";
  return v;
}

Verdict ac6(const Timed& t) {
  const auto& r = t.result;
  const auto conv = agg(r, "conventional").forgetting_mean;
  const auto fifo = agg(r, "fifo").forgetting_mean;
  const auto minred = agg(r, "minred").forgetting_mean;
  Verdict v;
  if (!conv || !fifo || !minred) {
    v.detail = "forgetting undefined for some method";
    return v;
  }
  v.pass = *minred > *fifo && *fifo > *conv && r.config.stream.permutations.size() >= 3;
  v.detail = "mean relative drop on past partitions: minred " + fmt(*minred) + ", fifo " + fmt(*fifo) +
             ", conventional " + fmt(*conv) + " over " + std::to_string(agg(r, "minred").runs) + " runs (" +
             std::to_string(r.config.stream.permutations.size()) + " permutations)";
  return v;
}

// Share of held entries from the two earlier partitions at the last
// checkpoint inside the third partition's span, per run.
std::vector<double> third_stage_past_share(const ExperimentResult& r, const std::string& method) {
  std::vector<double> out;
  for (const RunRecord* run : r.runs_of(method)) {
    const auto& st = run->summary.checkpoint_stage;
    for (std::size_t c = st.size(); c-- > 0;) {
      if (st[c] == 2) {
        out.push_back(run->summary.past_partition_share[c]);
        break;
      }
    }
  }
  return out;
}

Verdict ac7(const Timed& t) {
  const auto& r = t.result;
  const auto fifo = third_stage_past_share(r, "fifo");
  const auto minred = third_stage_past_share(r, "minred");
  const std::size_t expected = r.runs_of("fifo").size();
  Verdict v;
  if (fifo.size() != expected || minred.size() != expected || fifo.empty()) {
    v.detail = "no checkpoint inside the third partition's span";
    return v;
  }
  const double fifo_max = *std::max_element(fifo.begin(), fifo.end());
  const double minred_min = *std::min_element(minred.begin(), minred.end());
  const std::size_t capacity = r.config.methods[1].buffer ? r.config.methods[1].buffer->capacity : 0;
  v.pass = minred_min > 0.10 && fifo_max < 0.01 && capacity < r.config.stream.samples_per_partition;
  v.detail = "held share from partitions 1-2 at the end of partition 3: minred min " + fmt(minred_min) +
             " (mean " + fmt(mean(minred)) + "), fifo max " + fmt(fifo_max) + ", capacity " +
             std::to_string(capacity) + " < " + std::to_string(r.config.stream.samples_per_partition);
  return v;
}

Verdict ac8(const Timed& t) {
  const auto& r = t.result;
  const auto& fifo = agg(r, "fifo").openset_mean;
  const auto& minred = agg(r, "minred").openset_mean;
  const RunRecord* any = r.runs_of("minred").front();
  const auto& stage = any->summary.checkpoint_stage;
  std::size_t compared = 0, higher = 0;
  std::ostringstream gaps;
  for (std::size_t c = 0; c < minred.size() && c < stage.size(); ++c) {
    if (stage[c] < 1 || !minred[c] || !fifo[c]) continue;
    ++compared;
    higher += *minred[c] > *fifo[c];
    gaps << (compared > 1 ? ", " : "") << fmt(*minred[c] - *fifo[c], 2);
  }
  Verdict v;
  v.pass = compared > 0 && higher == compared && r.config.stream.permutations.size() >= 3;
  v.detail = "minred above fifo on unseen partitions at " + std::to_string(higher) + "/" + std::to_string(compared) +
             " checkpoints after the first partition (minred - fifo: " + gaps.str() + ")";
  return v;
}

Verdict ac9() {
  const auto g = checks::gradient_check(100, 2024);
  const auto l = checks::loss_properties(1000, 7);

  // With a constant predictor (wp = 0) the live branch carries no gradient
  // into the encoder, so under stop-gradient the encoder gradient must be
  // exactly zero, while letting gradient through the targets gives a
  // nonzero one.
  std::mt19937_64 rng(5);
  std::normal_distribution<double> normal(0.0, 1.0);
  int nonzero_encoder = 0, silent_targets = 0;
  for (int trial = 0; trial < 20; ++trial) {
    LearnerState st = make_learner({5, 4, 3}, {}, rng());
    st.params.wp.setZero();
    for (Eigen::Index i = 0; i < st.params.bp.size(); ++i) st.params.bp[i] = normal(rng);
    Matrix v1(5, 4), v2(5, 4);
    for (Eigen::Index i = 0; i < v1.size(); ++i) {
      v1.data()[i] = normal(rng);
      v2.data()[i] = normal(rng);
    }
    const BatchLoss sg = batch_loss(st.params, v1, v2, GradientFlow::stop_gradient);
    const BatchLoss full = batch_loss(st.params, v1, v2, GradientFlow::through_targets);
    const bool zero = sg.grad.w1.isZero(0.0) && sg.grad.b1.isZero(0.0) && sg.grad.w2.isZero(0.0) &&
                      sg.grad.b2.isZero(0.0);
    nonzero_encoder += !zero;
    silent_targets += full.grad.w2.isZero(0.0);
  }

  Verdict v;
  v.pass = g.points == 100 && g.max_rel_err_stop_gradient < 1e-4 && g.max_rel_err_through_targets < 1e-4 &&
           nonzero_encoder == 0 && silent_targets == 0 && l.asymmetric == 0 && l.out_of_range == 0 &&
           l.max_rel_err_pair_gradient < 1e-4;
  v.detail = "max relative gradient error " + fmt(g.max_rel_err_stop_gradient, 2) + " (stop-gradient), " +
             fmt(g.max_rel_err_through_targets, 2) + " (through targets) at " + std::to_string(g.points) +
             " points; stop-gradient leaks into the encoder in " + std::to_string(nonzero_encoder) +
             "/20 cases; loss asymmetric in " + std::to_string(l.asymmetric) + ", outside [-2, 2] in " +
             std::to_string(l.out_of_range) + " of " + std::to_string(l.cases) + " (range " + fmt(l.min_loss) +
             " .. " + fmt(l.max_loss) + ")";
  return v;
}

Verdict ac10() {
  int violations = 0, uninit = 0, capacity = 0, evictions = 0, ops = 0;
  std::string first;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto r = checks::minred_property_check(1000, 256, seed);
    violations += r.violations;
    uninit += r.uninitialized_evicted_while_initialized_present;
    capacity += r.capacity_violations;
    evictions += r.minred_evictions;
    ops += r.operations;
    if (first.empty()) first = r.first_violation;
  }
  const auto small = checks::minred_property_check(1000, 8, 11);
  violations += small.violations;
  uninit += small.uninitialized_evicted_while_initialized_present;
  evictions += small.minred_evictions;
  const auto fifo = checks::fifo_property_check(2000, 256, 4);
  Verdict v;
  v.pass = violations == 0 && uninit == 0 && capacity == 0 && fifo.mismatches == 0 && evictions > 0;
  v.detail = "fifo kept the last B inserts in every check (" + std::to_string(fifo.mismatches) + " mismatches over " +
             std::to_string(fifo.inserts) + " inserts); " + std::to_string(evictions) +
             " minred evictions checked by exhaustive pair enumeration, " + std::to_string(violations) +
             " not in a minimum-distance pair, " + std::to_string(uninit) +
             " uninitialized while initialized present" + (first.empty() ? "" : " (" + first + ")");
  return v;
}

Verdict ac11(const std::vector<const ExperimentResult*>& results) {
  std::size_t runs = 0, conserved = 0, k_exact = 0, buffered = 0, single = 0, streaming = 0;
  for (const ExperimentResult* r : results) {
    for (const RunRecord& run : r->runs) {
      ++runs;
      const RunLog& log = run.log;
      bool ok = log.elapsed == log.fetch_ticks + log.train_ticks + log.idle_ticks;
      for (const auto& c : log.checkpoints) ok = ok && c.tick == c.fetch_ticks + c.train_ticks + c.idle_ticks;
      conserved += ok;
      if (log.mode.kind == RunMode::Kind::buffered) {
        ++buffered;
        const MethodConfig* m = nullptr;
        for (const auto& mc : r->config.methods)
          if (mc.name == run.summary.method) m = &mc;
        const int k = m && m->hyper_sampling_k > 0 ? m->hyper_sampling_k : r->config.bandwidth.hyper_sampling_k;
        k_exact += log.training_steps == static_cast<std::int64_t>(k) * static_cast<std::int64_t>(log.stream_batches_fetched);
      }
      if (log.mode.kind != RunMode::Kind::epoch_oracle) {
        ++streaming;
        single += single_pass_guarantee(log);
      }
    }
  }
  Verdict v;
  v.pass = runs > 0 && conserved == runs && k_exact == buffered && single == streaming;
  v.detail = "tick conservation in " + std::to_string(conserved) + "/" + std::to_string(runs) + " runs; steps = K x fetches in " +
             std::to_string(k_exact) + "/" + std::to_string(buffered) + " buffered runs; single pass in " +
             std::to_string(single) + "/" + std::to_string(streaming) + " streaming runs";
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string configs = std::string(CSSL_SOURCE_DIR) + "/configs/acceptance";
  app.add_option("--configs", configs, "Directory with the acceptance experiment configs");
  CLI11_PARSE(app, argc, argv);
  const fs::path dir(configs);

  std::map<int, Verdict> verdicts;
  auto guarded = [&](int id, const std::function<Verdict()>& f) {
    try {
      verdicts[id] = f();
    } catch (const std::exception& e) {
      verdicts[id] = {false, std::string("error: ") + e.what()};
    }
    std::printf("AC%-2d %s  %s\n", id, verdicts[id].pass ? "PASS" : "FAIL", verdicts[id].detail.c_str());
    std::fflush(stdout);
  };

  CsvTable analytics;
  double analytics_seconds = 0.0;
  guarded(1, [&] {
    const ExperimentConfig c = load_config(dir / "ac1_analytics.json");
    const auto t0 = Clock::now();
    analytics = run_analytics(c.analytics);
    analytics_seconds = seconds_since(t0);
    return ac1(analytics, analytics_seconds);
  });
  guarded(2, [&] { return ac2(analytics); });

  std::optional<Timed> r3, r4, r5, r6;
  guarded(3, [&] { return ac3(*(r3 = run_config(dir / "ac3_correlation.json"))); });
  guarded(4, [&] { return ac4(*(r4 = run_config(dir / "ac4_correlated_probe.json"))); });
  guarded(5, [&] { return ac5(*(r5 = run_config(dir / "ac5_efficiency.json"))); });
  guarded(6, [&] { return ac6(*(r6 = run_config(dir / "ac6_lifelong.json"))); });
  guarded(7, [&] {
    if (!r6) throw std::runtime_error("lifelong experiment did not run");
    return ac7(*r6);
  });
  guarded(8, [&] {
    if (!r6) throw std::runtime_error("lifelong experiment did not run");
    return ac8(*r6);
  });
  guarded(9, [] { return ac9(); });
  guarded(10, [] { return ac10(); });
  guarded(11, [&] {
    std::vector<const ExperimentResult*> all;
    for (const auto* r : {&r3, &r4, &r5, &r6})
      if (*r) all.push_back(&(*r)->result);
    if (all.empty()) throw std::runtime_error("no experiment ran");
    return ac11(all);
  });

  const auto failed = std::count_if(verdicts.begin(), verdicts.end(), [](const auto& kv) { return !kv.second.pass; });
  std::printf("%zu/%zu criteria passed\n", verdicts.size() - static_cast<std::size_t>(failed), verdicts.size());
  return failed == 0 ? 0 : 1;
}

#include "cssl/analytics.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include <boost/math/distributions/students_t.hpp>

namespace cssl {

namespace {

void check_window(std::int64_t b, double p_c) {
  if (b < 2) throw DomainError("correlation likelihood: window size b must be >= 2");
  if (!(p_c >= 0.0 && p_c <= 1.0)) throw DomainError("correlation likelihood: p_c must lie in [0, 1]");
}

// Neumaier compensated accumulator.
struct CompensatedSum {
  double sum = 0.0;
  double carry = 0.0;
  void add(double x) {
    const double t = sum + x;
    if (std::abs(sum) >= std::abs(x)) carry += (sum - t) + x;
    else carry += (x - t) + sum;
    sum = t;
  }
  double value() const { return sum + carry; }
};

inline double unit_uniform(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

struct Welford {
  std::int64_t n = 0;
  double mean = 0.0;
  double m2 = 0.0;
  void add(double x) {
    ++n;
    const double delta = x - mean;
    mean += delta / static_cast<double>(n);
    m2 += delta * (x - mean);
  }
  MonteCarloEstimate estimate() const {
    if (n < 2) return {mean, 0.0};
    const double var = m2 / static_cast<double>(n - 1);
    return {mean, std::sqrt(std::max(var, 0.0) / static_cast<double>(n))};
  }
};

}  // namespace

double correlation_likelihood_exact(std::int64_t b, double p_c) {
  check_window(b, p_c);
  std::vector<double> power(static_cast<std::size_t>(b));
  for (std::int64_t d = 0; d < b; ++d) power[d] = std::pow(p_c, static_cast<double>(d));
  CompensatedSum total;
  for (std::int64_t i = 1; i < b; ++i)
    for (std::int64_t j = i + 1; j <= b; ++j) total.add(power[j - i]);
  return 2.0 * total.value() / (static_cast<double>(b) * static_cast<double>(b - 1));
}

double correlation_likelihood_closed(std::int64_t b, double p_c) {
  check_window(b, p_c);
  const double p = p_c;
  const double q = 1.0 - p;
  const double m = static_cast<double>(b - 1);
  if (p == 0.0) return 0.0;

  if (q * m < 0.5) {
    // p * sum_k (-q)^k C(b, k+2) / C(b, 2); a finite sum (k <= b-2) whose
    // terms shrink by at least a factor q (b-1) / 3 each step.
    double ratio = 1.0;  // C(b, k+2) / C(b, 2) * (-q)^k
    CompensatedSum series;
    series.add(ratio);
    for (std::int64_t k = 1; k <= b - 2; ++k) {
      ratio *= -q * static_cast<double>(b - k - 1) / static_cast<double>(k + 2);
      series.add(ratio);
      if (std::abs(ratio) < 1e-18 * std::abs(series.value())) break;
    }
    return p * series.value();
  }

  const double tail = -std::expm1(m * std::log1p(-q));  // 1 - p^(b-1)
  const double bracket = m - p * tail / q;
  return 2.0 * p * bracket / (static_cast<double>(b) * m * q);
}

MonteCarloEstimate correlation_likelihood_monte_carlo(std::int64_t b, double p_c, std::int64_t trials,
                                                      std::uint64_t seed) {
  check_window(b, p_c);
  if (trials < 1) throw DomainError("monte carlo: trials must be >= 1");
  if (p_c == 0.0) return {0.0, 0.0};
  if (p_c == 1.0) return {1.0, 0.0};
  std::mt19937_64 rng(seed);
  const double pairs_total = 0.5 * static_cast<double>(b) * static_cast<double>(b - 1);
  Welford acc;
  for (std::int64_t t = 0; t < trials; ++t) {
    std::int64_t run = 1;
    std::int64_t pairs = 0;
    for (std::int64_t i = 1; i < b; ++i) {
      if (unit_uniform(rng) < p_c) {
        pairs += run;
        ++run;
      } else {
        run = 1;
      }
    }
    acc.add(static_cast<double>(pairs) / pairs_total);
  }
  return acc.estimate();
}

std::vector<MonteCarloEstimate> correlation_likelihood_monte_carlo_prefixes(std::int64_t max_b, double p_c,
                                                                            std::int64_t trials,
                                                                            std::uint64_t seed) {
  check_window(max_b, p_c);
  if (trials < 1) throw DomainError("monte carlo: trials must be >= 1");
  std::vector<MonteCarloEstimate> out(static_cast<std::size_t>(max_b + 1));
  if (p_c == 0.0 || p_c == 1.0) {
    for (std::int64_t w = 2; w <= max_b; ++w) out[w] = {p_c, 0.0};
    return out;
  }
  std::vector<double> inv_pairs(out.size(), 0.0);
  for (std::int64_t w = 2; w <= max_b; ++w)
    inv_pairs[w] = 2.0 / (static_cast<double>(w) * static_cast<double>(w - 1));
  std::vector<Welford> acc(out.size());
  std::mt19937_64 rng(seed);
  for (std::int64_t t = 0; t < trials; ++t) {
    std::int64_t run = 1;
    std::int64_t pairs = 0;
    for (std::int64_t i = 1; i < max_b; ++i) {
      if (unit_uniform(rng) < p_c) {
        pairs += run;
        ++run;
      } else {
        run = 1;
      }
      acc[i + 1].add(static_cast<double>(pairs) * inv_pairs[i + 1]);
    }
  }
  for (std::int64_t w = 2; w <= max_b; ++w) out[w] = acc[w].estimate();
  return out;
}

FifoReduction fifo_reduction_check(std::int64_t b, std::int64_t B, double p_c) {
  if (b < 2 || B < b) throw DomainError("fifo reduction: requires B >= b >= 2");
  if (!(p_c > 0.0 && p_c <= 1.0)) throw DomainError("fifo reduction: p_c must lie in (0, 1]");
  const double small = correlation_likelihood_closed(b, p_c);
  const double large = correlation_likelihood_closed(B, p_c);
  if (B > b && p_c < 1.0 && !(large < small)) {
    std::ostringstream msg;
    msg << "fifo reduction: P_c(" << B << ") = " << large << " is not below P_c(" << b << ") = " << small;
    throw std::logic_error(msg.str());
  }
  return {large / small, static_cast<double>(b) / static_cast<double>(B)};
}

// ---------------------------------------------------------------------------

namespace {

template <typename Range, typename SourceOf>
double pair_fraction(const Range& items, SourceOf source_of) {
  const std::size_t n = items.size();
  if (n < 2) return 0.0;
  std::unordered_map<SourceId, std::size_t> counts;
  for (const auto& item : items) ++counts[source_of(item)];
  double same = 0.0;
  for (const auto& kv : counts) same += 0.5 * static_cast<double>(kv.second) * static_cast<double>(kv.second - 1);
  return same / (0.5 * static_cast<double>(n) * static_cast<double>(n - 1));
}

}  // namespace

double batch_correlation(std::span<const Sample> batch) {
  return pair_fraction(batch, [](const Sample& s) { return s.source; });
}

double measure_batch_correlation(std::span<const std::vector<Sample>> batches, std::size_t* skipped) {
  double total = 0.0;
  std::size_t used = 0;
  std::size_t skip = 0;
  for (const auto& batch : batches) {
    if (batch.size() < 2) {
      ++skip;
      continue;
    }
    total += batch_correlation(batch);
    ++used;
  }
  if (skipped) *skipped = skip;
  return used ? total / static_cast<double>(used) : 0.0;
}

double buffer_pair_correlation(std::span<const BufferEntry> entries) {
  return pair_fraction(entries, [](const BufferEntry& e) { return e.sample.source; });
}

double buffer_consecutive_correlation(std::span<const BufferEntry> entries) {
  if (entries.size() < 2) return 0.0;
  std::size_t same = 0;
  for (std::size_t i = 1; i < entries.size(); ++i)
    same += entries[i].sample.source == entries[i - 1].sample.source;
  return static_cast<double>(same) / static_cast<double>(entries.size() - 1);
}

double stream_consecutive_correlation(std::span<const Sample> samples) {
  if (samples.size() < 2) return 0.0;
  std::size_t same = 0;
  for (std::size_t i = 1; i < samples.size(); ++i) same += samples[i].source == samples[i - 1].source;
  return static_cast<double>(same) / static_cast<double>(samples.size() - 1);
}

CorrelationReport correlation_report(std::int64_t b, std::int64_t B, double p_c,
                                     std::span<const BufferEntry> buffer_contents, double raw_consecutive) {
  CorrelationReport r;
  r.l_seq = correlation_likelihood_closed(b, p_c);
  r.l_fifo = correlation_likelihood_closed(B, p_c);
  r.l_minred_measured = buffer_pair_correlation(buffer_contents);
  const double buffered = buffer_consecutive_correlation(buffer_contents);
  r.eta_effective = raw_consecutive > 0.0 ? buffered / raw_consecutive : 0.0;
  const double n = static_cast<double>(buffer_contents.size());
  if (n >= 2) {
    const double pairs = 0.5 * n * (n - 1);
    r.sigma = std::sqrt(r.l_minred_measured * (1.0 - r.l_minred_measured) / pairs);
  }
  return r;
}

// ---------------------------------------------------------------------------

std::vector<ForgettingRecord> forgetting_curve(std::span<const PartitionAccuracySeries> probe_results) {
  std::vector<ForgettingRecord> out;
  for (const auto& series : probe_results) {
    if (series.end_of_training_checkpoint >= series.accuracy.size())
      throw ConfigError("forgetting_curve: no reading at the end of the partition's training span");
    const double base = series.accuracy[series.end_of_training_checkpoint];
    for (std::size_t c = series.end_of_training_checkpoint + 1; c < series.accuracy.size(); ++c) {
      ForgettingRecord r;
      r.partition = series.partition;
      r.checkpoint = c;
      r.acc_at_end_of_own_training = base;
      r.acc_now = series.accuracy[c];
      if (base > 0.0) r.relative_drop = (r.acc_now - base) / base;
      out.push_back(r);
    }
  }
  return out;
}

std::optional<double> mean_relative_drop(std::span<const ForgettingRecord> records, std::size_t checkpoint) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& r : records) {
    if (r.checkpoint != checkpoint || !r.relative_drop) continue;
    total += *r.relative_drop;
    ++n;
  }
  if (n == 0) return std::nullopt;
  return total / static_cast<double>(n);
}

std::vector<std::optional<double>> openset_accuracy(const std::vector<std::vector<double>>& per_partition_accuracy,
                                                    std::span<const int> checkpoint_stage,
                                                    const PartitionSchedule& schedule) {
  if (checkpoint_stage.size() != per_partition_accuracy.size())
    throw ConfigError("openset_accuracy: one stage per checkpoint required");
  std::vector<std::optional<double>> out;
  out.reserve(per_partition_accuracy.size());
  const int stages = static_cast<int>(schedule.num_stages());
  for (std::size_t c = 0; c < per_partition_accuracy.size(); ++c) {
    const int stage = checkpoint_stage[c];
    if (stage + 1 >= stages) {
      out.emplace_back(std::nullopt);
      continue;
    }
    double total = 0.0;
    for (int k = stage + 1; k < stages; ++k) total += per_partition_accuracy[c].at(schedule.permutation[k]);
    out.emplace_back(total / static_cast<double>(stages - stage - 1));
  }
  return out;
}

// ---------------------------------------------------------------------------

double mean(std::span<const double> xs) {
  if (xs.empty()) return 0.0;
  double total = 0.0;
  for (double x : xs) total += x;
  return total / static_cast<double>(xs.size());
}

double sample_stddev(std::span<const double> xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean(xs);
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

double welch_t_test_greater(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw DomainError("welch t-test: need at least two samples per group");
  const double ma = mean(a);
  const double mb = mean(b);
  const double va = sample_stddev(a) * sample_stddev(a) / static_cast<double>(a.size());
  const double vb = sample_stddev(b) * sample_stddev(b) / static_cast<double>(b.size());
  const double se2 = va + vb;
  if (se2 == 0.0) return ma > mb ? 0.0 : 1.0;
  const double t = (ma - mb) / std::sqrt(se2);
  const double df = se2 * se2 /
                    ((va > 0 ? va * va / static_cast<double>(a.size() - 1) : 0.0) +
                     (vb > 0 ? vb * vb / static_cast<double>(b.size() - 1) : 0.0));
  boost::math::students_t dist(df);
  return boost::math::cdf(boost::math::complement(dist, t));
}

}  // namespace cssl

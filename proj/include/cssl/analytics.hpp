#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "cssl/buffer.hpp"
#include "cssl/core.hpp"
#include "cssl/streams.hpp"

namespace cssl {

// ---------------------------------------------------------------------------
// Correlation likelihood P_c(b, p_c): probability that a uniformly random pair
// inside a window of b consecutive samples of a Markov source is correlated,
// where consecutive samples continue the same source with probability p_c.
// The pair at lag d is correlated with probability p_c^d.

// Reference definition: 2 / (b (b - 1)) * sum_{i<j} p_c^(j - i), evaluated
// term by term.
double correlation_likelihood_exact(std::int64_t b, double p_c);

// O(1) closed form of the same quantity,
//   P = 2 p / (b (b-1) q) * ((b-1) - p (1 - p^(b-1)) / q),   q = 1 - p,
// switching to the equivalent alternating binomial series
//   P = p * sum_k (-q)^k C(b, k+2) / C(b, 2)
// when q (b-1) is small and the closed form would cancel.
double correlation_likelihood_closed(std::int64_t b, double p_c);

struct MonteCarloEstimate {
  double estimate = 0.0;
  double sigma = 0.0;  // standard error of the mean
};

// Simulates `trials` independent length-b chains and averages the fraction of
// correlated pairs.
MonteCarloEstimate correlation_likelihood_monte_carlo(std::int64_t b, double p_c, std::int64_t trials,
                                                      std::uint64_t seed);

// Same estimator for every window length 2..max_b at once: each simulated
// chain of length max_b contributes one trial to every prefix length. Trials
// are independent within a window length; estimates for different lengths
// share chains. Entry w of the result is the estimate for b = w (entries 0
// and 1 are unused).
std::vector<MonteCarloEstimate> correlation_likelihood_monte_carlo_prefixes(std::int64_t max_b, double p_c,
                                                                            std::int64_t trials,
                                                                            std::uint64_t seed);

struct FifoReduction {
  double exact_ratio = 0.0;   // P_c(B, p_c) / P_c(b, p_c)
  double approx_ratio = 0.0;  // b / B
};

// Throws DomainError when B >= b >= 2 or p_c in [0, 1] is violated, and
// std::logic_error if P_c(B) < P_c(b) fails for B > b and p_c in (0, 1).
FifoReduction fifo_reduction_check(std::int64_t b, std::int64_t B, double p_c);

// ---------------------------------------------------------------------------
// Measured correlation

// Mean over batches of the fraction of unordered within-batch pairs that share
// a source id. Batches with fewer than two samples are skipped and counted in
// *skipped when provided. Returns 0 when no batch qualifies.
double measure_batch_correlation(std::span<const std::vector<Sample>> batches,
                                 std::size_t* skipped = nullptr);
double batch_correlation(std::span<const Sample> batch);

// Fraction of unordered pairs of buffered entries sharing a source.
double buffer_pair_correlation(std::span<const BufferEntry> entries);
// Fraction of insert-order-adjacent buffered entries sharing a source.
double buffer_consecutive_correlation(std::span<const BufferEntry> entries);
// Fraction of adjacent stream samples sharing a source.
double stream_consecutive_correlation(std::span<const Sample> samples);

struct CorrelationReport {
  double l_seq = 0.0;              // P_c(b, p_c)
  double l_fifo = 0.0;             // P_c(B, p_c)
  double l_minred_measured = 0.0;  // pair correlation of the buffer contents
  double eta_effective = 0.0;      // buffered / raw consecutive correlation
  double sigma = 0.0;
};

CorrelationReport correlation_report(std::int64_t b, std::int64_t B, double p_c,
                                     std::span<const BufferEntry> buffer_contents, double raw_consecutive);

// ---------------------------------------------------------------------------
// Forgetting and open-set generalization

struct PartitionAccuracySeries {
  int partition = 0;
  // Checkpoint index at which the partition's own training span ended.
  std::size_t end_of_training_checkpoint = 0;
  // Accuracy on the partition at every checkpoint.
  std::vector<double> accuracy;
};

struct ForgettingRecord {
  int partition = 0;
  std::size_t checkpoint = 0;
  double acc_at_end_of_own_training = 0.0;
  double acc_now = 0.0;
  // (acc_now - baseline) / baseline; nullopt when the baseline is zero.
  std::optional<double> relative_drop;
};

// One record per partition per checkpoint after its own training span.
std::vector<ForgettingRecord> forgetting_curve(std::span<const PartitionAccuracySeries> probe_results);

// Mean relative drop over partitions at a given checkpoint (defined records
// only). nullopt when no partition has a defined record there.
std::optional<double> mean_relative_drop(std::span<const ForgettingRecord> records, std::size_t checkpoint);

// per_partition_accuracy[c][p]: accuracy on partition p at checkpoint c.
// checkpoint_stage[c]: stage in training at checkpoint c. Result entry c is the
// mean accuracy over partitions scheduled after that stage, nullopt during the
// last stage.
std::vector<std::optional<double>> openset_accuracy(const std::vector<std::vector<double>>& per_partition_accuracy,
                                                    std::span<const int> checkpoint_stage,
                                                    const PartitionSchedule& schedule);

// ---------------------------------------------------------------------------
// Small-sample statistics used by experiment summaries.

double mean(std::span<const double> xs);
double sample_stddev(std::span<const double> xs);

// One-sided Welch t-test of H1: mean(a) > mean(b). Returns the p-value.
double welch_t_test_greater(std::span<const double> a, std::span<const double> b);

}  // namespace cssl

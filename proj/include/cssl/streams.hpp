#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "cssl/core.hpp"

namespace cssl {

// Balanced binary tree over class indices. Node 0 is the root; each node
// covers the half-open class range [lo, hi).
struct ClassHierarchy {
  struct Node {
    int lo = 0;
    int hi = 0;
    int left = -1;
    int right = -1;
    int depth = 0;
  };

  std::vector<Node> nodes;

  static ClassHierarchy balanced(int num_classes);

  bool is_leaf(int node) const { return nodes[node].left < 0; }
  std::vector<int> dfs_leaf_order() const;
};

struct ClassModelConfig {
  int num_classes = 16;
  int dim = 32;
  double within_class_scale = 1.0;
  // Minimum pairwise distance between class means, in units of
  // within_class_scale. Must exceed 4.
  double separation = 6.0;
  std::uint64_t seed = 0;
};

// Gaussian class-conditional generator. Row c of class_means is the mean of
// class c; within_class_scale is the per-coordinate standard deviation.
struct ClassModel {
  int num_classes = 0;
  Matrix class_means;
  double within_class_scale = 1.0;
  ClassHierarchy hierarchy;

  int dim() const { return static_cast<int>(class_means.cols()); }
  double min_mean_separation() const;
  // Throws ConfigError when dimensions disagree or the separation invariant
  // (> 4 * within_class_scale) is violated.
  void validate() const;
};

// Means are sums of +-s * u_node over the root-to-leaf path, one direction per
// internal hierarchy node (orthonormal when dim allows), rescaled so the
// closest pair sits exactly at separation * within_class_scale.
ClassModel make_class_model(const ClassModelConfig& cfg);

struct SegmentStreamConfig {
  int n_seq = 64;
  double within_segment_drift = 0.05;
  int num_segments = 16;
};

struct MarkovStreamConfig {
  double p_c = 0.5;
  double within_chain_drift = 0.05;
};

struct WalkStreamConfig {
  std::size_t trajectory_length = 1024;
  int num_loops = 1;
  // Per-step probability of leaving the current class region for an adjacent
  // one in the hierarchy's leaf order.
  double switch_prob = 1.0 / 64.0;
  double drift = 0.05;
};

// Splits of the class set presented one after another, with linear mixing
// across each boundary.
struct PartitionSchedule {
  // Class-index sets in hierarchy DFS order.
  std::vector<std::vector<int>> partitions;
  // permutation[k] is the partition trained during stage k.
  std::vector<int> permutation;
  std::size_t samples_per_partition = 0;
  double transition_fraction = 0.10;

  std::size_t num_stages() const { return permutation.size(); }
  std::size_t length() const { return num_stages() * samples_per_partition; }

  // Per-stage sampling probabilities at a stream position. Inside a window
  // spanning the last transition_fraction of stage k and the first of stage
  // k+1 the weight moves linearly from k to k+1.
  std::vector<double> sampling_probabilities(std::size_t pos) const;
  // Stage whose nominal span contains pos.
  int stage_at(std::size_t pos) const;
  // First and last (exclusive) position of a stage's pure, non-mixed span.
  std::pair<std::size_t, std::size_t> pure_span(int stage) const;
  std::size_t window_half_width() const;
  // Partition index of every class; -1 for classes outside all partitions.
  std::vector<int> class_to_partition(int num_classes) const;

  void validate(int num_classes) const;
};

// Contiguous, near-equal split of the DFS leaf order; the first
// num_classes % num_partitions groups receive one extra class.
std::vector<std::vector<int>> partition_classes(const ClassModel& model, int num_partitions);

PartitionSchedule make_partition_schedule(const ClassModel& model, int num_partitions,
                                          std::size_t samples_per_partition,
                                          std::vector<int> permutation = {},
                                          double transition_fraction = 0.10);

// Pull-based, single-consumer sample source. Ids and arrival ticks equal the
// stream position.
class StreamSource {
 public:
  virtual ~StreamSource() = default;

  virtual std::optional<Sample> next() = 0;
  virtual std::size_t length() const = 0;
  virtual std::size_t position() const = 0;

  bool exhausted() const { return position() >= length(); }
  // Up to n samples; fewer only at the end of the stream.
  std::vector<Sample> take(std::size_t n);
};

using StreamPtr = std::unique_ptr<StreamSource>;

StreamPtr make_iid_stream(const ClassModel& model, std::size_t length, std::uint64_t seed);
StreamPtr make_segment_stream(const ClassModel& model, const SegmentStreamConfig& cfg,
                              std::uint64_t seed);
StreamPtr make_markov_stream(const ClassModel& model, const MarkovStreamConfig& cfg,
                             std::size_t length, std::uint64_t seed);
StreamPtr make_walk_stream(const ClassModel& model, const WalkStreamConfig& cfg, std::uint64_t seed);
StreamPtr make_walk_stream(const ClassModel& model, std::size_t trajectory_length, int num_loops,
                           std::uint64_t seed);
StreamPtr make_partitioned_stream(const ClassModel& model, const PartitionSchedule& sched,
                                  std::uint64_t seed);

// Replays a fixed sequence. Ids and ticks are re-stamped by position.
StreamPtr make_vector_stream(std::vector<Sample> samples);

// Drains a stream into memory.
std::vector<Sample> materialize(StreamSource& stream);

// Same samples in a random order: the decorrelated reference for a correlated
// stream. Non-streaming by construction.
StreamPtr make_shuffled_stream(StreamSource& stream, std::uint64_t seed);

// Draws n labelled samples per class from the model's class-conditional
// distribution (evaluation sets).
std::vector<Sample> draw_labelled_set(const ClassModel& model, int per_class, std::uint64_t seed);

}  // namespace cssl

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "cssl/core.hpp"

namespace cssl {

enum class EvictionPolicy { fifo, minred };

std::string to_string(EvictionPolicy policy);
EvictionPolicy parse_eviction_policy(const std::string& name);

// Exponential moving average of a sample's embeddings.
struct TrackedFeature {
  Vector value;
  double alpha = 0.5;
  bool initialized = false;
};

struct BufferEntry {
  Sample sample;
  TrackedFeature feature;
  std::uint64_t insert_order = 0;
};

// Bounded replay buffer. Every public member function is atomic with respect
// to the others, so one ingest thread and one training thread may share an
// instance.
//
// MinRed eviction removes a member of the closest pair (cosine distance of the
// tracked features) among entries whose features have been initialized. The
// older member of the pair goes; exact ties across pairs resolve to the
// oldest entry involved. Nearest-neighbour distances are cached and repaired
// incrementally, which gives the same victim as recomputing every pairwise
// distance before each eviction.
class ReplayBuffer {
 public:
  ReplayBuffer(std::size_t capacity, EvictionPolicy policy, double alpha = 0.5);

  ReplayBuffer(ReplayBuffer&&) noexcept;
  ReplayBuffer& operator=(ReplayBuffer&&) noexcept;
  ~ReplayBuffer();

  // Evicts as many entries as the batch overflows (one at a time, re-checking
  // distances between MinRed evictions), then inserts the batch. Returns the
  // evicted ids in eviction order.
  std::vector<SampleId> add(std::span<const Sample> batch);

  // Removes the MinRed victim. Returns nullopt, leaving the buffer untouched,
  // when fewer than two entries have initialized features.
  std::optional<SampleId> evict_minred();

  // EMA update of tracked features. Ids no longer present are skipped and
  // counted in skipped_updates().
  void track_features(std::span<const SampleId> ids, std::span<const Vector> embeddings);

  // Uniform sample of b entries without replacement, in random order.
  std::vector<Sample> sample_batch(std::size_t b, std::uint64_t rng_seed) const;
  std::vector<Sample> sample_batch(std::size_t b, std::mt19937_64& rng) const;

  // Entries ordered by insert_order.
  std::vector<BufferEntry> entries() const;
  std::optional<BufferEntry> find(SampleId id) const;
  bool contains(SampleId id) const;

  std::size_t size() const;
  std::size_t capacity() const { return capacity_; }
  EvictionPolicy policy() const { return policy_; }
  double alpha() const { return alpha_; }
  std::size_t initialized_count() const;

  std::uint64_t total_inserts() const;
  std::uint64_t skipped_updates() const;
  std::uint64_t zero_feature_warnings() const;
  std::uint64_t fallback_evictions() const;

 private:
  struct Slot {
    BufferEntry entry;
    bool occupied = false;
    bool zero = false;
    double nn_dist = 0.0;
    std::size_t nn_slot = 0;
  };

  static constexpr std::size_t kNone = static_cast<std::size_t>(-1);

  SampleId evict_one_locked();
  std::optional<SampleId> evict_minred_locked();
  SampleId evict_oldest_locked(bool initialized_only);
  void remove_slot_locked(std::size_t slot);
  void insert_locked(const Sample& s);
  void update_feature_locked(std::size_t slot, const Vector& embedding);
  // Fills dots_[j] with the dot product of unit features of `slot` and j.
  void dots_from(std::size_t slot);
  double distance_from_dots(std::size_t slot, std::size_t j) const;
  void recompute_nn(std::size_t slot);

  std::size_t capacity_;
  EvictionPolicy policy_;
  double alpha_;

  std::unique_ptr<std::mutex> mutex_;
  std::vector<Slot> slots_;
  std::vector<std::size_t> free_;
  std::map<std::uint64_t, std::size_t> by_order_;
  std::unordered_map<SampleId, std::size_t> by_id_;
  // Unit-normalized features stored dimension-major: unit_[k * capacity_ + slot].
  // Every dot product sums over k in ascending order, so d(a, b) == d(b, a)
  // bit for bit whichever side computes it.
  std::size_t dim_ = 0;
  std::vector<double> unit_;
  std::vector<double> dots_;
  std::vector<std::size_t> eligible_;
  std::vector<std::size_t> eligible_pos_;

  std::uint64_t next_order_ = 0;
  std::uint64_t skipped_ = 0;
  std::uint64_t zero_warnings_ = 0;
  std::uint64_t fallbacks_ = 0;
};

enum class Grouping { by_source, by_partition };

// Histogram of buffered samples per source id, or per partition index
// (class_to_partition maps class label to partition; unmapped labels land in
// bucket -1).
std::map<std::int64_t, std::size_t> composition(const ReplayBuffer& buffer, Grouping grouping,
                                                std::span<const int> class_to_partition = {});
std::map<std::int64_t, std::size_t> composition(std::span<const Sample> samples, Grouping grouping,
                                                std::span<const int> class_to_partition = {});

// Cosine distance 1 - cos(a, b); 1 when either vector is zero.
double cosine_distance(const Vector& a, const Vector& b);

}  // namespace cssl

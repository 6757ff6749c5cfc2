#include "cssl/buffer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace cssl {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

std::string to_string(EvictionPolicy policy) {
  return policy == EvictionPolicy::fifo ? "fifo" : "minred";
}

EvictionPolicy parse_eviction_policy(const std::string& name) {
  if (name == "fifo") return EvictionPolicy::fifo;
  if (name == "minred") return EvictionPolicy::minred;
  throw ConfigError("unknown eviction policy '" + name + "' (expected fifo or minred)");
}

double cosine_distance(const Vector& a, const Vector& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 1.0;
  return 1.0 - a.dot(b) / (na * nb);
}

ReplayBuffer::ReplayBuffer(std::size_t capacity, EvictionPolicy policy, double alpha)
    : capacity_(capacity), policy_(policy), alpha_(alpha), mutex_(std::make_unique<std::mutex>()) {
  if (capacity < 1) throw ConfigError("replay buffer: capacity must be >= 1");
  if (!(alpha >= 0.0 && alpha < 1.0)) throw ConfigError("replay buffer: alpha must lie in [0, 1)");
  slots_.resize(capacity);
  eligible_pos_.assign(capacity, kNone);
  free_.reserve(capacity);
  for (std::size_t i = capacity; i-- > 0;) free_.push_back(i);
}

ReplayBuffer::ReplayBuffer(ReplayBuffer&&) noexcept = default;
ReplayBuffer& ReplayBuffer::operator=(ReplayBuffer&&) noexcept = default;
ReplayBuffer::~ReplayBuffer() = default;

std::vector<SampleId> ReplayBuffer::add(std::span<const Sample> batch) {
  std::lock_guard lock(*mutex_);
  if (batch.empty()) throw ConfigError("replay buffer: add called with an empty batch");
  if (batch.size() > capacity_) {
    std::ostringstream msg;
    msg << "replay buffer: batch of " << batch.size() << " exceeds capacity " << capacity_;
    throw ConfigError(msg.str());
  }
  for (const Sample& s : batch)
    if (by_id_.count(s.id)) throw ConfigError("replay buffer: sample id already buffered");

  std::vector<SampleId> evicted;
  const std::size_t held = by_id_.size();
  if (held + batch.size() > capacity_) {
    const std::size_t excess = held + batch.size() - capacity_;
    evicted.reserve(excess);
    for (std::size_t i = 0; i < excess; ++i) evicted.push_back(evict_one_locked());
  }
  for (const Sample& s : batch) insert_locked(s);
  return evicted;
}

std::optional<SampleId> ReplayBuffer::evict_minred() {
  std::lock_guard lock(*mutex_);
  return evict_minred_locked();
}

SampleId ReplayBuffer::evict_one_locked() {
  if (policy_ == EvictionPolicy::minred) {
    if (auto victim = evict_minred_locked()) return *victim;
    ++fallbacks_;
    return evict_oldest_locked(!eligible_.empty());
  }
  return evict_oldest_locked(false);
}

std::optional<SampleId> ReplayBuffer::evict_minred_locked() {
  if (eligible_.size() < 2) return std::nullopt;
  std::size_t victim = kNone;
  for (std::size_t slot : eligible_) {
    if (victim == kNone) {
      victim = slot;
      continue;
    }
    const Slot& cand = slots_[slot];
    const Slot& best = slots_[victim];
    if (cand.nn_dist < best.nn_dist ||
        (cand.nn_dist == best.nn_dist && cand.entry.insert_order < best.entry.insert_order))
      victim = slot;
  }
  const SampleId id = slots_[victim].entry.sample.id;
  remove_slot_locked(victim);
  return id;
}

SampleId ReplayBuffer::evict_oldest_locked(bool initialized_only) {
  for (const auto& [order, slot] : by_order_) {
    if (initialized_only && !slots_[slot].entry.feature.initialized) continue;
    const SampleId id = slots_[slot].entry.sample.id;
    remove_slot_locked(slot);
    return id;
  }
  throw InsufficientDataError("replay buffer: nothing to evict");
}

void ReplayBuffer::remove_slot_locked(std::size_t slot) {
  Slot& s = slots_[slot];
  by_order_.erase(s.entry.insert_order);
  by_id_.erase(s.entry.sample.id);
  const bool was_eligible = eligible_pos_[slot] != kNone;
  if (was_eligible) {
    const std::size_t pos = eligible_pos_[slot];
    eligible_pos_[eligible_.back()] = pos;
    eligible_[pos] = eligible_.back();
    eligible_.pop_back();
    eligible_pos_[slot] = kNone;
  }
  s = Slot{};
  free_.push_back(slot);
  if (was_eligible && policy_ == EvictionPolicy::minred) {
    for (std::size_t j : eligible_)
      if (slots_[j].nn_slot == slot) recompute_nn(j);
  }
}

void ReplayBuffer::insert_locked(const Sample& sample) {
  const std::size_t slot = free_.back();
  free_.pop_back();
  Slot& s = slots_[slot];
  s.occupied = true;
  s.entry.sample = sample;
  s.entry.feature = TrackedFeature{Vector(), alpha_, false};
  s.entry.insert_order = next_order_++;
  s.nn_dist = kInf;
  s.nn_slot = kNone;
  by_order_.emplace(s.entry.insert_order, slot);
  by_id_.emplace(sample.id, slot);
}

void ReplayBuffer::dots_from(std::size_t slot) {
  constexpr std::size_t kBlock = 256;
  dots_.resize(capacity_);
  double* out = dots_.data();
  const double* u = unit_.data();
  for (std::size_t j0 = 0; j0 < capacity_; j0 += kBlock) {
    const std::size_t j1 = std::min(j0 + kBlock, capacity_);
    for (std::size_t j = j0; j < j1; ++j) out[j] = 0.0;
    for (std::size_t k = 0; k < dim_; ++k) {
      const double* row = u + k * capacity_;
      const double q = row[slot];
      for (std::size_t j = j0; j < j1; ++j) out[j] += q * row[j];
    }
  }
}

double ReplayBuffer::distance_from_dots(std::size_t slot, std::size_t j) const {
  if (slots_[slot].zero || slots_[j].zero) return 1.0;
  return 1.0 - dots_[j];
}

void ReplayBuffer::recompute_nn(std::size_t slot) {
  Slot& s = slots_[slot];
  s.nn_dist = kInf;
  s.nn_slot = kNone;
  dots_from(slot);
  for (std::size_t j : eligible_) {
    if (j == slot) continue;
    const double d = distance_from_dots(slot, j);
    if (d < s.nn_dist) {
      s.nn_dist = d;
      s.nn_slot = j;
    }
  }
}

void ReplayBuffer::update_feature_locked(std::size_t slot, const Vector& embedding) {
  Slot& s = slots_[slot];
  TrackedFeature& f = s.entry.feature;
  if (!embedding.allFinite()) throw NumericalError("replay buffer: non-finite embedding");
  if (f.initialized) {
    if (embedding.size() != f.value.size())
      throw ConfigError("replay buffer: embedding dimension changed");
    f.value = f.alpha * f.value + (1.0 - f.alpha) * embedding;
  } else {
    if (dim_ == 0) {
      if (embedding.size() == 0) throw ConfigError("replay buffer: empty embedding");
      dim_ = static_cast<std::size_t>(embedding.size());
      unit_.assign(dim_ * capacity_, 0.0);
    } else if (static_cast<std::size_t>(embedding.size()) != dim_) {
      throw ConfigError("replay buffer: embedding dimension changed");
    }
    f.value = embedding;
    f.initialized = true;
    eligible_pos_[slot] = eligible_.size();
    eligible_.push_back(slot);
  }

  const double norm = f.value.norm();
  s.zero = !(norm > 0.0);
  if (s.zero) ++zero_warnings_;
  for (std::size_t k = 0; k < dim_; ++k)
    unit_[k * capacity_ + slot] = s.zero ? 0.0 : f.value[static_cast<Eigen::Index>(k)] / norm;

  if (policy_ != EvictionPolicy::minred) return;

  // Distances involving this slot changed; repair every cached nearest neighbour.
  s.nn_dist = kInf;
  s.nn_slot = kNone;
  dots_from(slot);
  std::vector<std::size_t> stale;
  for (std::size_t j : eligible_) {
    if (j == slot) continue;
    const double d = distance_from_dots(slot, j);
    if (d < s.nn_dist) {
      s.nn_dist = d;
      s.nn_slot = j;
    }
    Slot& o = slots_[j];
    if (d < o.nn_dist) {
      o.nn_dist = d;
      o.nn_slot = slot;
    } else if (o.nn_slot == slot && d != o.nn_dist) {
      stale.push_back(j);
    }
  }
  for (std::size_t j : stale) recompute_nn(j);
}

void ReplayBuffer::track_features(std::span<const SampleId> ids, std::span<const Vector> embeddings) {
  if (ids.size() != embeddings.size())
    throw ConfigError("replay buffer: ids and embeddings differ in length");
  std::lock_guard lock(*mutex_);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto it = by_id_.find(ids[i]);
    if (it == by_id_.end()) {
      ++skipped_;
      continue;
    }
    update_feature_locked(it->second, embeddings[i]);
  }
}

std::vector<Sample> ReplayBuffer::sample_batch(std::size_t b, std::uint64_t rng_seed) const {
  std::mt19937_64 rng(rng_seed);
  return sample_batch(b, rng);
}

std::vector<Sample> ReplayBuffer::sample_batch(std::size_t b, std::mt19937_64& rng) const {
  std::lock_guard lock(*mutex_);
  if (b > by_order_.size()) {
    std::ostringstream msg;
    msg << "replay buffer: requested " << b << " samples from " << by_order_.size() << " entries";
    throw InsufficientDataError(msg.str());
  }
  std::vector<std::size_t> all;
  all.reserve(by_order_.size());
  for (const auto& kv : by_order_) all.push_back(kv.second);
  std::vector<std::size_t> picked;
  picked.reserve(b);
  std::sample(all.begin(), all.end(), std::back_inserter(picked), b, rng);
  std::shuffle(picked.begin(), picked.end(), rng);
  std::vector<Sample> out;
  out.reserve(b);
  for (std::size_t slot : picked) out.push_back(slots_[slot].entry.sample);
  return out;
}

std::vector<BufferEntry> ReplayBuffer::entries() const {
  std::lock_guard lock(*mutex_);
  std::vector<BufferEntry> out;
  out.reserve(by_order_.size());
  for (const auto& kv : by_order_) out.push_back(slots_[kv.second].entry);
  return out;
}

std::optional<BufferEntry> ReplayBuffer::find(SampleId id) const {
  std::lock_guard lock(*mutex_);
  auto it = by_id_.find(id);
  if (it == by_id_.end()) return std::nullopt;
  return slots_[it->second].entry;
}

bool ReplayBuffer::contains(SampleId id) const {
  std::lock_guard lock(*mutex_);
  return by_id_.count(id) != 0;
}

std::size_t ReplayBuffer::size() const {
  std::lock_guard lock(*mutex_);
  return by_id_.size();
}

std::size_t ReplayBuffer::initialized_count() const {
  std::lock_guard lock(*mutex_);
  return eligible_.size();
}

std::uint64_t ReplayBuffer::total_inserts() const {
  std::lock_guard lock(*mutex_);
  return next_order_;
}

std::uint64_t ReplayBuffer::skipped_updates() const {
  std::lock_guard lock(*mutex_);
  return skipped_;
}

std::uint64_t ReplayBuffer::zero_feature_warnings() const {
  std::lock_guard lock(*mutex_);
  return zero_warnings_;
}

std::uint64_t ReplayBuffer::fallback_evictions() const {
  std::lock_guard lock(*mutex_);
  return fallbacks_;
}

std::map<std::int64_t, std::size_t> composition(std::span<const Sample> samples, Grouping grouping,
                                                std::span<const int> class_to_partition) {
  std::map<std::int64_t, std::size_t> hist;
  for (const Sample& s : samples) {
    std::int64_t key = s.source;
    if (grouping == Grouping::by_partition) {
      key = (s.class_label >= 0 && static_cast<std::size_t>(s.class_label) < class_to_partition.size())
                ? class_to_partition[s.class_label]
                : -1;
    }
    ++hist[key];
  }
  return hist;
}

std::map<std::int64_t, std::size_t> composition(const ReplayBuffer& buffer, Grouping grouping,
                                                std::span<const int> class_to_partition) {
  std::vector<Sample> samples;
  for (auto& e : buffer.entries()) samples.push_back(std::move(e.sample));
  return composition(samples, grouping, class_to_partition);
}

}  // namespace cssl

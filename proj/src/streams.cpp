#include "cssl/streams.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <Eigen/QR>

namespace cssl {

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t salt) {
  std::seed_seq seq{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32),
                    static_cast<std::uint32_t>(salt), static_cast<std::uint32_t>(salt >> 32)};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

// ---------------------------------------------------------------------------
// Hierarchy and class geometry

ClassHierarchy ClassHierarchy::balanced(int num_classes) {
  if (num_classes < 1) throw ConfigError("hierarchy needs at least one class");
  ClassHierarchy h;
  // Preorder construction keeps node 0 at the root and children after parents.
  auto build = [&h](auto&& self, int lo, int hi, int depth) -> int {
    const int idx = static_cast<int>(h.nodes.size());
    h.nodes.push_back({lo, hi, -1, -1, depth});
    if (hi - lo > 1) {
      const int mid = lo + (hi - lo + 1) / 2;
      const int left = self(self, lo, mid, depth + 1);
      const int right = self(self, mid, hi, depth + 1);
      h.nodes[idx].left = left;
      h.nodes[idx].right = right;
    }
    return idx;
  };
  build(build, 0, num_classes, 0);
  return h;
}

std::vector<int> ClassHierarchy::dfs_leaf_order() const {
  std::vector<int> order;
  if (nodes.empty()) return order;
  std::vector<int> stack{0};
  while (!stack.empty()) {
    const int n = stack.back();
    stack.pop_back();
    if (is_leaf(n)) {
      order.push_back(nodes[n].lo);
    } else {
      stack.push_back(nodes[n].right);
      stack.push_back(nodes[n].left);
    }
  }
  return order;
}

double ClassModel::min_mean_separation() const {
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < num_classes; ++i)
    for (int j = i + 1; j < num_classes; ++j)
      best = std::min(best, (class_means.row(i) - class_means.row(j)).norm());
  return best;
}

void ClassModel::validate() const {
  if (num_classes < 1) throw ConfigError("class model: num_classes must be >= 1");
  if (class_means.rows() != num_classes || class_means.cols() < 1)
    throw ConfigError("class model: class_means must be num_classes x dim");
  if (!(within_class_scale > 0.0) || !std::isfinite(within_class_scale))
    throw ConfigError("class model: within_class_scale must be positive");
  if (!class_means.allFinite()) throw ConfigError("class model: non-finite class means");
  if (num_classes > 1 && !(min_mean_separation() > 4.0 * within_class_scale)) {
    std::ostringstream msg;
    msg << "class model: minimum mean separation " << min_mean_separation()
        << " does not exceed 4 * within_class_scale";
    throw ConfigError(msg.str());
  }
  if (hierarchy.dfs_leaf_order().size() != static_cast<std::size_t>(num_classes))
    throw ConfigError("class model: hierarchy leaves do not match num_classes");
}

ClassModel make_class_model(const ClassModelConfig& cfg) {
  if (cfg.num_classes < 1) throw ConfigError("class model: num_classes must be >= 1");
  if (cfg.dim < 1) throw ConfigError("class model: dim must be >= 1");
  if (!(cfg.within_class_scale > 0.0)) throw ConfigError("class model: within_class_scale must be positive");
  if (!(cfg.separation > 4.0)) throw ConfigError("class model: separation must exceed 4");

  ClassModel model;
  model.num_classes = cfg.num_classes;
  model.within_class_scale = cfg.within_class_scale;
  model.hierarchy = ClassHierarchy::balanced(cfg.num_classes);
  model.class_means = Matrix::Zero(cfg.num_classes, cfg.dim);

  std::vector<int> internal;
  for (int n = 0; n < static_cast<int>(model.hierarchy.nodes.size()); ++n)
    if (!model.hierarchy.is_leaf(n)) internal.push_back(n);
  if (internal.empty()) return model;

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const int k = static_cast<int>(internal.size());
  Matrix gauss(cfg.dim, k);
  for (int c = 0; c < k; ++c)
    for (int r = 0; r < cfg.dim; ++r) gauss(r, c) = normal(rng);

  Matrix directions(cfg.dim, k);
  if (cfg.dim >= k) {
    Eigen::HouseholderQR<Matrix> qr(gauss);
    directions = qr.householderQ() * Matrix::Identity(cfg.dim, k);
  } else {
    directions = gauss.colwise().normalized();
  }

  for (int c = 0; c < cfg.num_classes; ++c) {
    Vector mean = Vector::Zero(cfg.dim);
    for (int i = 0; i < k; ++i) {
      const auto& node = model.hierarchy.nodes[internal[i]];
      if (c < node.lo || c >= node.hi) continue;
      const auto& left = model.hierarchy.nodes[node.left];
      mean += (c < left.hi ? 1.0 : -1.0) * directions.col(i);
    }
    model.class_means.row(c) = mean.transpose();
  }

  const double sep = model.min_mean_separation();
  if (!(sep > 1e-9)) throw ConfigError("class model: degenerate class geometry, increase dim");
  model.class_means *= cfg.separation * cfg.within_class_scale / sep;
  model.validate();
  return model;
}

// ---------------------------------------------------------------------------
// Partitions

std::vector<std::vector<int>> partition_classes(const ClassModel& model, int num_partitions) {
  if (num_partitions < 1) throw ConfigError("partition_classes: num_partitions must be >= 1");
  if (num_partitions > model.num_classes)
    throw ConfigError("partition_classes: more partitions than classes");
  const std::vector<int> order = model.hierarchy.dfs_leaf_order();
  const int base = model.num_classes / num_partitions;
  const int extra = model.num_classes % num_partitions;
  std::vector<std::vector<int>> groups;
  std::size_t at = 0;
  for (int p = 0; p < num_partitions; ++p) {
    const int size = base + (p < extra ? 1 : 0);
    groups.emplace_back(order.begin() + at, order.begin() + at + size);
    at += size;
  }
  return groups;
}

PartitionSchedule make_partition_schedule(const ClassModel& model, int num_partitions,
                                          std::size_t samples_per_partition,
                                          std::vector<int> permutation, double transition_fraction) {
  PartitionSchedule sched;
  sched.partitions = partition_classes(model, num_partitions);
  if (permutation.empty()) {
    permutation.resize(num_partitions);
    std::iota(permutation.begin(), permutation.end(), 0);
  }
  sched.permutation = std::move(permutation);
  sched.samples_per_partition = samples_per_partition;
  sched.transition_fraction = transition_fraction;
  sched.validate(model.num_classes);
  return sched;
}

std::size_t PartitionSchedule::window_half_width() const {
  return static_cast<std::size_t>(
      std::llround(transition_fraction * static_cast<double>(samples_per_partition)));
}

int PartitionSchedule::stage_at(std::size_t pos) const {
  const std::size_t stage = pos / samples_per_partition;
  return static_cast<int>(std::min(stage, num_stages() - 1));
}

std::vector<double> PartitionSchedule::sampling_probabilities(std::size_t pos) const {
  const std::size_t stages = num_stages();
  std::vector<double> probs(stages, 0.0);
  const std::size_t k = static_cast<std::size_t>(stage_at(pos));
  const std::size_t offset = pos - k * samples_per_partition;
  const std::size_t w = window_half_width();
  const double width = 2.0 * static_cast<double>(w);

  if (w > 0 && k + 1 < stages && offset + w >= samples_per_partition) {
    const double t = static_cast<double>(offset + w - samples_per_partition) / width;
    probs[k] = 1.0 - t;
    probs[k + 1] = t;
  } else if (w > 0 && k >= 1 && offset < w) {
    const double t = static_cast<double>(offset + w) / width;
    probs[k - 1] = 1.0 - t;
    probs[k] = t;
  } else {
    probs[k] = 1.0;
  }
  return probs;
}

std::pair<std::size_t, std::size_t> PartitionSchedule::pure_span(int stage) const {
  const std::size_t k = static_cast<std::size_t>(stage);
  const std::size_t w = window_half_width();
  const std::size_t lo = k * samples_per_partition + (k > 0 ? w : 0);
  const std::size_t hi = (k + 1) * samples_per_partition - (k + 1 < num_stages() ? w : 0);
  return {lo, hi};
}

std::vector<int> PartitionSchedule::class_to_partition(int num_classes) const {
  std::vector<int> map(num_classes, -1);
  for (std::size_t p = 0; p < partitions.size(); ++p)
    for (int c : partitions[p])
      if (c >= 0 && c < num_classes) map[c] = static_cast<int>(p);
  return map;
}

void PartitionSchedule::validate(int num_classes) const {
  if (partitions.empty()) throw ConfigError("partition schedule: no partitions");
  if (samples_per_partition < 1) throw ConfigError("partition schedule: samples_per_partition must be >= 1");
  if (!(transition_fraction >= 0.0 && transition_fraction <= 0.5))
    throw ConfigError("partition schedule: transition_fraction must lie in [0, 0.5]");

  std::vector<int> seen(num_classes, 0);
  for (const auto& part : partitions) {
    if (part.empty()) throw ConfigError("partition schedule: empty partition");
    for (std::size_t i = 0; i < part.size(); ++i) {
      const int c = part[i];
      if (c < 0 || c >= num_classes) throw ConfigError("partition schedule: class index out of range");
      if (seen[c]++) throw ConfigError("partition schedule: partitions are not disjoint");
      if (i > 0 && part[i] != part[i - 1] + 1)
        throw ConfigError("partition schedule: partition is not a contiguous DFS run");
    }
  }
  if (std::find(seen.begin(), seen.end(), 0) != seen.end())
    throw ConfigError("partition schedule: partitions do not cover all classes");

  std::vector<int> sorted = permutation;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i)
    if (sorted[i] != static_cast<int>(i))
      throw ConfigError("partition schedule: permutation is not a permutation of partition indices");
  if (sorted.size() != partitions.size())
    throw ConfigError("partition schedule: permutation length differs from partition count");
}

// ---------------------------------------------------------------------------
// Stream generators

std::vector<Sample> StreamSource::take(std::size_t n) {
  std::vector<Sample> out;
  out.reserve(n);
  while (out.size() < n) {
    auto s = next();
    if (!s) break;
    out.push_back(std::move(*s));
  }
  return out;
}

namespace {

// Folds x back into [-bound, bound] as a reflecting walk would.
double reflect(double x, double bound) {
  const double period = 4.0 * bound;
  double y = std::fmod(x + bound, period);
  if (y < 0.0) y += period;
  if (y > 2.0 * bound) y = period - y;
  return y - bound;
}

// Shared state for generators that draw Gaussian payloads around class means.
class ModelStream : public StreamSource {
 public:
  ModelStream(const ClassModel& model, std::size_t length, std::uint64_t seed)
      : model_(model), length_(length), rng_(seed) {
    model_.validate();
  }

  std::size_t length() const override { return length_; }
  std::size_t position() const override { return pos_; }

 protected:
  int uniform_class() {
    return std::uniform_int_distribution<int>(0, model_.num_classes - 1)(rng_);
  }

  Vector gaussian(double scale) {
    Vector v(model_.dim());
    for (auto& x : v) x = scale * normal_(rng_);
    return v;
  }

  // Offset from the class mean, bounded per coordinate at 2 * scale.
  Vector bounded_start() {
    Vector v = gaussian(model_.within_class_scale);
    for (auto& x : v) x = reflect(x, bound());
    return v;
  }

  void drift(Vector& offset, double step) {
    for (auto& x : offset) x = reflect(x + step * normal_(rng_), bound());
  }

  double bound() const { return 2.0 * model_.within_class_scale; }

  Sample emit(SourceId source, int cls, const Vector& offset) {
    Sample s;
    s.id = static_cast<SampleId>(pos_);
    s.arrival_tick = static_cast<Tick>(pos_);
    s.source = source;
    s.class_label = cls;
    s.payload = model_.class_means.row(cls).transpose() + offset;
    ++pos_;
    return s;
  }

  bool done() const { return pos_ >= length_; }

  ClassModel model_;
  std::size_t length_;
  std::size_t pos_ = 0;
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

class IidStream final : public ModelStream {
 public:
  using ModelStream::ModelStream;

  std::optional<Sample> next() override {
    if (done()) return std::nullopt;
    const int cls = uniform_class();
    return emit(static_cast<SourceId>(pos_), cls, gaussian(model_.within_class_scale));
  }
};

class SegmentStream final : public ModelStream {
 public:
  SegmentStream(const ClassModel& model, const SegmentStreamConfig& cfg, std::uint64_t seed)
      : ModelStream(model, static_cast<std::size_t>(cfg.n_seq) * cfg.num_segments, seed), cfg_(cfg) {}

  std::optional<Sample> next() override {
    if (done()) return std::nullopt;
    const auto n_seq = static_cast<std::size_t>(cfg_.n_seq);
    if (pos_ % n_seq == 0) {
      cls_ = uniform_class();
      offset_ = bounded_start();
    } else {
      drift(offset_, cfg_.within_segment_drift);
    }
    return emit(static_cast<SourceId>(pos_ / n_seq), cls_, offset_);
  }

 private:
  SegmentStreamConfig cfg_;
  int cls_ = 0;
  Vector offset_;
};

class MarkovStream final : public ModelStream {
 public:
  MarkovStream(const ClassModel& model, const MarkovStreamConfig& cfg, std::size_t length,
               std::uint64_t seed)
      : ModelStream(model, length, seed), cfg_(cfg) {}

  std::optional<Sample> next() override {
    if (done()) return std::nullopt;
    const bool cont = pos_ > 0 && std::uniform_real_distribution<double>(0.0, 1.0)(rng_) < cfg_.p_c;
    if (cont) {
      drift(offset_, cfg_.within_chain_drift);
    } else {
      if (pos_ > 0) ++chain_;
      cls_ = uniform_class();
      offset_ = bounded_start();
    }
    return emit(chain_, cls_, offset_);
  }

 private:
  MarkovStreamConfig cfg_;
  SourceId chain_ = 0;
  int cls_ = 0;
  Vector offset_;
};

class VectorStream final : public StreamSource {
 public:
  explicit VectorStream(std::vector<Sample> samples) : samples_(std::move(samples)) {
    for (std::size_t i = 0; i < samples_.size(); ++i) {
      samples_[i].id = static_cast<SampleId>(i);
      samples_[i].arrival_tick = static_cast<Tick>(i);
    }
  }

  std::optional<Sample> next() override {
    if (pos_ >= samples_.size()) return std::nullopt;
    return samples_[pos_++];
  }
  std::size_t length() const override { return samples_.size(); }
  std::size_t position() const override { return pos_; }

 private:
  std::vector<Sample> samples_;
  std::size_t pos_ = 0;
};

// Trajectory generated once by a ModelStream-like walker, then replayed.
class WalkStream final : public ModelStream {
 public:
  WalkStream(const ClassModel& model, const WalkStreamConfig& cfg, std::uint64_t seed)
      : ModelStream(model, cfg.trajectory_length * static_cast<std::size_t>(cfg.num_loops), seed),
        cfg_(cfg) {
    build_trajectory();
  }

  std::optional<Sample> next() override {
    if (done()) return std::nullopt;
    Sample s = trajectory_[pos_ % trajectory_.size()];
    s.id = static_cast<SampleId>(pos_);
    s.arrival_tick = static_cast<Tick>(pos_);
    ++pos_;
    return s;
  }

 private:
  void build_trajectory() {
    const std::vector<int> order = model_.hierarchy.dfs_leaf_order();
    std::bernoulli_distribution leave(cfg_.switch_prob);
    std::bernoulli_distribution go_right(0.5);
    std::size_t region = std::uniform_int_distribution<std::size_t>(0, order.size() - 1)(rng_);
    SourceId visit = 0;
    Vector offset = bounded_start();
    trajectory_.reserve(cfg_.trajectory_length);
    for (std::size_t t = 0; t < cfg_.trajectory_length; ++t) {
      if (t > 0) {
        if (order.size() > 1 && leave(rng_)) {
          if (region == 0) region = 1;
          else if (region + 1 == order.size()) region -= 1;
          else region = go_right(rng_) ? region + 1 : region - 1;
          ++visit;
          offset = bounded_start();
        } else {
          drift(offset, cfg_.drift);
        }
      }
      Sample s;
      s.source = visit;
      s.class_label = order[region];
      s.payload = model_.class_means.row(s.class_label).transpose() + offset;
      trajectory_.push_back(std::move(s));
    }
  }

  WalkStreamConfig cfg_;
  std::vector<Sample> trajectory_;
};

class PartitionedStream final : public ModelStream {
 public:
  PartitionedStream(const ClassModel& model, const PartitionSchedule& sched, std::uint64_t seed)
      : ModelStream(model, sched.length(), seed), sched_(sched) {
    sched_.validate(model.num_classes);
  }

  std::optional<Sample> next() override {
    if (done()) return std::nullopt;
    const std::vector<double> probs = sched_.sampling_probabilities(pos_);
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng_);
    std::size_t stage = 0;
    double acc = 0.0;
    for (; stage + 1 < probs.size(); ++stage) {
      acc += probs[stage];
      if (u < acc) break;
    }
    while (probs[stage] == 0.0 && stage > 0) --stage;
    const auto& part = sched_.partitions[sched_.permutation[stage]];
    const int cls = part[std::uniform_int_distribution<std::size_t>(0, part.size() - 1)(rng_)];
    return emit(static_cast<SourceId>(pos_), cls, gaussian(model_.within_class_scale));
  }

 private:
  PartitionSchedule sched_;
};

}  // namespace

StreamPtr make_iid_stream(const ClassModel& model, std::size_t length, std::uint64_t seed) {
  if (length < 1) throw ConfigError("iid stream: length must be >= 1");
  return std::make_unique<IidStream>(model, length, seed);
}

StreamPtr make_segment_stream(const ClassModel& model, const SegmentStreamConfig& cfg,
                              std::uint64_t seed) {
  if (cfg.n_seq < 1) throw ConfigError("segment stream: n_seq must be >= 1");
  if (cfg.num_segments < 1) throw ConfigError("segment stream: num_segments must be >= 1");
  if (!(cfg.within_segment_drift >= 0.0)) throw ConfigError("segment stream: drift must be non-negative");
  return std::make_unique<SegmentStream>(model, cfg, seed);
}

StreamPtr make_markov_stream(const ClassModel& model, const MarkovStreamConfig& cfg,
                             std::size_t length, std::uint64_t seed) {
  if (length < 1) throw ConfigError("markov stream: length must be >= 1");
  if (!(cfg.p_c >= 0.0 && cfg.p_c <= 1.0)) throw ConfigError("markov stream: p_c must lie in [0, 1]");
  if (!(cfg.within_chain_drift >= 0.0)) throw ConfigError("markov stream: drift must be non-negative");
  return std::make_unique<MarkovStream>(model, cfg, length, seed);
}

StreamPtr make_walk_stream(const ClassModel& model, const WalkStreamConfig& cfg, std::uint64_t seed) {
  if (cfg.num_loops < 1) throw ConfigError("walk stream: num_loops must be >= 1");
  if (cfg.trajectory_length < 1) throw ConfigError("walk stream: trajectory_length must be >= 1");
  if (!(cfg.switch_prob >= 0.0 && cfg.switch_prob <= 1.0))
    throw ConfigError("walk stream: switch_prob must lie in [0, 1]");
  return std::make_unique<WalkStream>(model, cfg, seed);
}

StreamPtr make_walk_stream(const ClassModel& model, std::size_t trajectory_length, int num_loops,
                           std::uint64_t seed) {
  WalkStreamConfig cfg;
  cfg.trajectory_length = trajectory_length;
  cfg.num_loops = num_loops;
  return make_walk_stream(model, cfg, seed);
}

StreamPtr make_partitioned_stream(const ClassModel& model, const PartitionSchedule& sched,
                                  std::uint64_t seed) {
  return std::make_unique<PartitionedStream>(model, sched, seed);
}

StreamPtr make_vector_stream(std::vector<Sample> samples) {
  return std::make_unique<VectorStream>(std::move(samples));
}

std::vector<Sample> materialize(StreamSource& stream) {
  return stream.take(stream.length() - stream.position());
}

StreamPtr make_shuffled_stream(StreamSource& stream, std::uint64_t seed) {
  std::vector<Sample> all = materialize(stream);
  std::mt19937_64 rng(seed);
  std::shuffle(all.begin(), all.end(), rng);
  return make_vector_stream(std::move(all));
}

std::vector<Sample> draw_labelled_set(const ClassModel& model, int per_class, std::uint64_t seed) {
  model.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(per_class) * model.num_classes);
  for (int c = 0; c < model.num_classes; ++c) {
    for (int i = 0; i < per_class; ++i) {
      Sample s;
      s.id = static_cast<SampleId>(out.size());
      s.arrival_tick = s.id;
      s.source = s.id;
      s.class_label = c;
      s.payload = model.class_means.row(c).transpose();
      for (auto& x : s.payload) x += model.within_class_scale * normal(rng);
      out.push_back(std::move(s));
    }
  }
  return out;
}

}  // namespace cssl

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "cssl/streams.hpp"

using namespace cssl;

namespace {

ClassModel model_with(int classes, int dim = 8, std::uint64_t seed = 1) {
  ClassModelConfig cfg;
  cfg.num_classes = classes;
  cfg.dim = dim;
  cfg.seed = seed;
  return make_class_model(cfg);
}

bool same_samples(const std::vector<Sample>& a, const std::vector<Sample>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].id != b[i].id || a[i].source != b[i].source || a[i].class_label != b[i].class_label ||
        a[i].arrival_tick != b[i].arrival_tick || a[i].payload != b[i].payload)
      return false;
  }
  return true;
}

}  // namespace

TEST(ClassModel, SeparationInvariantHolds) {
  for (int classes : {2, 3, 10, 16, 33}) {
    for (int dim : {2, 8, 64}) {
      const ClassModel m = model_with(classes, dim);
      EXPECT_GT(m.min_mean_separation(), 4.0 * m.within_class_scale) << classes << " classes, dim " << dim;
      EXPECT_NO_THROW(m.validate());
    }
  }
}

TEST(ClassModel, HierarchyLeavesAreClassesInDfsOrder) {
  const ClassModel m = model_with(10);
  const std::vector<int> order = m.hierarchy.dfs_leaf_order();
  std::vector<int> expected(10);
  for (int i = 0; i < 10; ++i) expected[i] = i;
  EXPECT_EQ(order, expected);
}

TEST(ClassModel, RejectsTooSmallSeparation) {
  ClassModelConfig cfg;
  cfg.separation = 3.0;
  EXPECT_THROW(make_class_model(cfg), ConfigError);
}

TEST(IidStream, IdsAndTicksFollowPosition) {
  const ClassModel m = model_with(2);
  StreamPtr s = make_iid_stream(m, 4, 7);
  const std::vector<Sample> xs = materialize(*s);
  ASSERT_EQ(xs.size(), 4u);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    EXPECT_EQ(xs[i].id, static_cast<SampleId>(i));
    EXPECT_EQ(xs[i].arrival_tick, static_cast<Tick>(i));
  }
  EXPECT_TRUE(s->exhausted());
  EXPECT_FALSE(s->next().has_value());
}

TEST(IidStream, DeterministicForSeed) {
  const ClassModel m = model_with(4);
  auto a = make_iid_stream(m, 200, 11);
  auto b = make_iid_stream(m, 200, 11);
  auto c = make_iid_stream(m, 200, 12);
  const auto xa = materialize(*a), xb = materialize(*b), xc = materialize(*c);
  EXPECT_TRUE(same_samples(xa, xb));
  EXPECT_FALSE(same_samples(xa, xc));
}

TEST(IidStream, SourcesUniqueAndPayloadsFinite) {
  const ClassModel m = model_with(4);
  auto s = make_iid_stream(m, 500, 3);
  std::set<SourceId> sources;
  for (const Sample& x : materialize(*s)) {
    EXPECT_TRUE(sources.insert(x.source).second);
    EXPECT_TRUE(x.payload.allFinite());
    EXPECT_EQ(x.payload.size(), m.dim());
    EXPECT_GE(x.class_label, 0);
    EXPECT_LT(x.class_label, 4);
  }
}

TEST(IidStream, ClassFrequenciesWithinThreeSigma) {
  const ClassModel m = model_with(10, 4);
  const std::size_t n = 100000;
  auto s = make_iid_stream(m, n, 5);
  std::vector<std::size_t> counts(10, 0);
  for (const Sample& x : materialize(*s)) ++counts[static_cast<std::size_t>(x.class_label)];
  const double sigma = std::sqrt(n * 0.1 * 0.9);
  for (std::size_t c : counts) EXPECT_LT(std::abs(static_cast<double>(c) - 0.1 * n), 3.0 * sigma);
}

TEST(SegmentStream, SingleFrameSegmentsAreIid) {
  const ClassModel m = model_with(4);
  SegmentStreamConfig cfg{1, 0.05, 50};
  auto s = make_segment_stream(m, cfg, 1);
  std::set<SourceId> sources;
  for (const Sample& x : materialize(*s)) EXPECT_TRUE(sources.insert(x.source).second);
  EXPECT_EQ(sources.size(), 50u);
}

TEST(SegmentStream, RunsOfNSeqWithOneSourceAndClass) {
  const ClassModel m = model_with(4);
  SegmentStreamConfig cfg{64, 0.05, 10};
  auto s = make_segment_stream(m, cfg, 2);
  const auto xs = materialize(*s);
  ASSERT_EQ(xs.size(), 640u);
  std::set<SourceId> distinct;
  std::vector<std::size_t> runs;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    distinct.insert(xs[i].source);
    if (i == 0 || xs[i].source != xs[i - 1].source) runs.push_back(0);
    ++runs.back();
    if (i % 64 != 0) EXPECT_EQ(xs[i].class_label, xs[i - 1].class_label);
  }
  EXPECT_EQ(distinct.size(), 10u);
  EXPECT_EQ(runs, std::vector<std::size_t>(10, 64));
}

TEST(SegmentStream, DriftStaysWithinReflectionBound) {
  const ClassModel m = model_with(4);
  SegmentStreamConfig cfg{64, 0.5, 20};
  auto s = make_segment_stream(m, cfg, 9);
  for (const Sample& x : materialize(*s)) {
    const Vector offset = x.payload - m.class_means.row(x.class_label).transpose();
    EXPECT_LE(offset.cwiseAbs().maxCoeff(), 2.0 * m.within_class_scale + 1e-12);
  }
}

TEST(SegmentStream, RejectsZeroLengthSegments) {
  const ClassModel m = model_with(4);
  EXPECT_THROW(make_segment_stream(m, {0, 0.05, 4}, 1), ConfigError);
}

TEST(MarkovStream, BoundaryProbabilities) {
  const ClassModel m = model_with(4);
  {
    auto s = make_markov_stream(m, {0.0, 0.05}, 300, 1);
    std::set<SourceId> src;
    for (const Sample& x : materialize(*s)) EXPECT_TRUE(src.insert(x.source).second);
  }
  {
    auto s = make_markov_stream(m, {1.0, 0.05}, 300, 1);
    std::set<SourceId> src;
    for (const Sample& x : materialize(*s)) src.insert(x.source);
    EXPECT_EQ(src.size(), 1u);
  }
}

TEST(MarkovStream, ConsecutiveContinuationRateWithinThreeSigma) {
  const ClassModel m = model_with(4, 2);
  const std::size_t n = 100000;
  auto s = make_markov_stream(m, {0.5, 0.05}, n, 4);
  const auto xs = materialize(*s);
  std::size_t same = 0;
  for (std::size_t i = 1; i < xs.size(); ++i) same += xs[i].source == xs[i - 1].source;
  const double trials = static_cast<double>(n - 1);
  EXPECT_LT(std::abs(same - 0.5 * trials), 3.0 * std::sqrt(trials * 0.25));
}

TEST(MarkovStream, ChainLengthsAreGeometric) {
  // Kolmogorov-Smirnov against Geometric(1 - p_c) on 10^5 complete chains.
  const double p = 0.6;
  const ClassModel m = model_with(4, 2);
  auto s = make_markov_stream(m, {p, 0.05}, 260000, 8);
  const auto xs = materialize(*s);
  std::vector<std::size_t> lengths;
  std::size_t run = 1;
  for (std::size_t i = 1; i < xs.size(); ++i) {
    if (xs[i].source == xs[i - 1].source) {
      ++run;
    } else {
      lengths.push_back(run);
      run = 1;
    }
  }
  ASSERT_GE(lengths.size(), 100000u);
  lengths.resize(100000);
  std::map<std::size_t, std::size_t> hist;
  for (std::size_t l : lengths) ++hist[l];
  double cum = 0.0, d = 0.0;
  const double n = static_cast<double>(lengths.size());
  for (const auto& [len, count] : hist) {
    cum += static_cast<double>(count);
    const double model_cdf = 1.0 - std::pow(p, static_cast<double>(len));
    d = std::max(d, std::abs(cum / n - model_cdf));
  }
  EXPECT_LT(d, 1.628 / std::sqrt(n));  // alpha = 0.01
}

TEST(WalkStream, SingleLoopLength) {
  const ClassModel m = model_with(4);
  auto s = make_walk_stream(m, 500, 1, 3);
  EXPECT_EQ(s->length(), 500u);
  EXPECT_EQ(materialize(*s).size(), 500u);
}

TEST(WalkStream, LoopsRepeatTrajectory) {
  const ClassModel m = model_with(8);
  auto s = make_walk_stream(m, 300, 10, 3);
  const auto xs = materialize(*s);
  ASSERT_EQ(xs.size(), 3000u);
  for (std::size_t t = 0; t + 300 < xs.size(); ++t) {
    ASSERT_EQ(xs[t].payload, xs[t + 300].payload);
    ASSERT_EQ(xs[t].source, xs[t + 300].source);
    ASSERT_LT(xs[t].id, xs[t + 1].id);
  }
}

TEST(WalkStream, VisitsSeveralRegions) {
  const ClassModel m = model_with(2);
  WalkStreamConfig cfg;
  cfg.trajectory_length = 2000;
  cfg.switch_prob = 0.05;
  auto s = make_walk_stream(m, cfg, 4);
  std::set<int> labels;
  for (const Sample& x : materialize(*s)) labels.insert(x.class_label);
  EXPECT_EQ(labels, (std::set<int>{0, 1}));
}

TEST(Partitions, ContiguousDfsSplits) {
  const ClassModel m8 = model_with(8);
  EXPECT_EQ(partition_classes(m8, 4), (std::vector<std::vector<int>>{{0, 1}, {2, 3}, {4, 5}, {6, 7}}));
  const ClassModel m2 = model_with(2);
  EXPECT_EQ(partition_classes(m2, 2), (std::vector<std::vector<int>>{{0}, {1}}));
  const ClassModel m10 = model_with(10);
  std::vector<std::size_t> sizes;
  for (const auto& p : partition_classes(m10, 4)) sizes.push_back(p.size());
  EXPECT_EQ(sizes, (std::vector<std::size_t>{3, 3, 2, 2}));
  EXPECT_THROW(partition_classes(m2, 3), ConfigError);
}

TEST(Partitions, ScheduleProbabilities) {
  const ClassModel m = model_with(8);
  const PartitionSchedule sched = make_partition_schedule(m, 4, 1000);
  for (std::size_t pos = 0; pos < sched.length(); ++pos) {
    const auto probs = sched.sampling_probabilities(pos);
    double sum = 0.0;
    for (double q : probs) {
      EXPECT_GE(q, 0.0);
      sum += q;
    }
    ASSERT_NEAR(sum, 1.0, 1e-12);
  }
  // Midpoint of the window between stages 0 and 1.
  const auto mid = sched.sampling_probabilities(1000);
  EXPECT_NEAR(mid[0], 0.5, 1e-12);
  EXPECT_NEAR(mid[1], 0.5, 1e-12);
  // Halfway through stage 1: pure.
  const auto pure = sched.sampling_probabilities(1500);
  EXPECT_EQ(pure[1], 1.0);
  EXPECT_EQ(pure[0] + pure[2] + pure[3], 0.0);
}

TEST(Partitions, LinearInsideWindow) {
  const ClassModel m = model_with(8);
  const PartitionSchedule sched = make_partition_schedule(m, 4, 1000);
  const std::size_t w = sched.window_half_width();
  ASSERT_EQ(w, 100u);
  double prev = 1.0;
  for (std::size_t pos = 1000 - w; pos < 1000 + w; ++pos) {
    const double q = sched.sampling_probabilities(pos)[0];
    EXPECT_LE(q, prev + 1e-15);
    prev = q;
  }
  const double a = sched.sampling_probabilities(950)[0];
  const double b = sched.sampling_probabilities(1000)[0];
  const double c = sched.sampling_probabilities(1050)[0];
  EXPECT_NEAR(a - b, b - c, 1e-12);
}

TEST(Partitions, RejectsBadPermutation) {
  const ClassModel m = model_with(8);
  EXPECT_THROW(make_partition_schedule(m, 4, 100, {0, 1, 1, 3}), ConfigError);
}

TEST(PartitionedStream, PureSpanFrequenciesMatchSchedule) {
  const ClassModel m = model_with(8, 4);
  const PartitionSchedule sched = make_partition_schedule(m, 4, 5000, {2, 0, 3, 1});
  auto s = make_partitioned_stream(m, sched, 6);
  const auto xs = materialize(*s);
  const auto c2p = sched.class_to_partition(8);
  for (int stage = 0; stage < 4; ++stage) {
    const auto [lo, hi] = sched.pure_span(stage);
    const int expected = sched.permutation[static_cast<std::size_t>(stage)];
    for (std::size_t i = lo; i < hi; ++i) ASSERT_EQ(c2p[static_cast<std::size_t>(xs[i].class_label)], expected);
    // Classes within the partition stay uniform.
    std::map<int, std::size_t> counts;
    for (std::size_t i = lo; i < hi; ++i) ++counts[xs[i].class_label];
    const double n = static_cast<double>(hi - lo);
    for (const auto& [cls, cnt] : counts)
      EXPECT_LT(std::abs(static_cast<double>(cnt) - n / 2.0), 3.0 * std::sqrt(n * 0.25)) << "class " << cls;
  }
}

TEST(ShuffledStream, SameMultisetDifferentOrder) {
  const ClassModel m = model_with(4);
  auto base = make_segment_stream(m, {16, 0.05, 20}, 1);
  auto copy = make_segment_stream(m, {16, 0.05, 20}, 1);
  auto shuffled = make_shuffled_stream(*copy, 5);
  const auto a = materialize(*base);
  const auto b = materialize(*shuffled);
  ASSERT_EQ(a.size(), b.size());
  std::multiset<SourceId> sa, sb;
  std::size_t same_position = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sa.insert(a[i].source);
    sb.insert(b[i].source);
    EXPECT_EQ(b[i].id, static_cast<SampleId>(i));
    same_position += a[i].payload == b[i].payload;
  }
  EXPECT_EQ(sa, sb);
  EXPECT_LT(same_position, a.size() / 4);
}

TEST(LabelledSet, PerClassCounts) {
  const ClassModel m = model_with(5);
  const auto xs = draw_labelled_set(m, 7, 3);
  std::map<int, int> counts;
  for (const Sample& x : xs) ++counts[x.class_label];
  ASSERT_EQ(counts.size(), 5u);
  for (const auto& [c, n] : counts) EXPECT_EQ(n, 7);
}

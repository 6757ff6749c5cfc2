#include <gtest/gtest.h>

#include <set>

#include "cssl/scheduler.hpp"

using namespace cssl;

namespace {

struct Fixture {
  ClassModel model;
  LearnerState learner;
  RunOptions opts;

  explicit Fixture(std::size_t batch = 8) {
    ClassModelConfig cfg;
    cfg.num_classes = 4;
    cfg.dim = 6;
    model = make_class_model(cfg);
    learner = make_learner({6, 8, 4}, {}, 1);
    opts.batch_size = batch;
    opts.schedule = {LRSchedule::Kind::constant, 0.02, 1000, 0.8};
    opts.augmentation = {0.1, 0.0, 1.0, 1.0};
  }
};

void expect_conserved(const RunLog& log) {
  EXPECT_EQ(log.elapsed, log.fetch_ticks + log.train_ticks + log.idle_ticks);
  for (const auto& c : log.checkpoints) EXPECT_EQ(c.tick, c.fetch_ticks + c.train_ticks + c.idle_ticks);
}

}  // namespace

TEST(Bandwidth, IdleAndValidation) {
  EXPECT_EQ((BandwidthConfig{10, 1, 1}.t_idle()), 9);
  EXPECT_EQ((BandwidthConfig{1, 4, 1}.t_idle()), 0);
  EXPECT_THROW((BandwidthConfig{0, 1, 1}.validate()), ConfigError);
  EXPECT_THROW((BandwidthConfig{1, 1, 0}.validate()), ConfigError);
}

TEST(Run, ConventionalTrainsOncePerBatch) {
  Fixture f;
  auto stream = make_iid_stream(f.model, 80, 2);
  const RunLog log = run({RunMode::Kind::conventional}, *stream, nullptr, f.learner, {10, 1, 1}, f.opts);
  EXPECT_TRUE(log.completed);
  EXPECT_EQ(log.stream_batches_fetched, 10u);
  EXPECT_EQ(log.training_steps, 10);
  EXPECT_TRUE(single_pass_guarantee(log));
  expect_conserved(log);
  // First fetch, then ten cycles of one training tick and nine idle ticks.
  EXPECT_EQ(log.fetch_ticks, 10);
  EXPECT_EQ(log.train_ticks, 10);
  EXPECT_EQ(log.idle_ticks, 90);
  EXPECT_DOUBLE_EQ(log.idle_fraction(), 0.9);
}

TEST(Run, BufferedKContract) {
  for (int k : {1, 3, 10}) {
    Fixture f;
    auto stream = make_iid_stream(f.model, 96, 2);
    ReplayBuffer buf(32, EvictionPolicy::fifo);
    const RunLog log = run({RunMode::Kind::buffered}, *stream, &buf, f.learner, {10, 1, k}, f.opts);
    EXPECT_EQ(log.training_steps, static_cast<std::int64_t>(k) * static_cast<std::int64_t>(log.stream_batches_fetched));
    EXPECT_DOUBLE_EQ(data_usage(log).effective_hyper_sampling, k);
    EXPECT_EQ(data_usage(log).unique_samples_fetched, 96u);
    EXPECT_TRUE(single_pass_guarantee(log));
    expect_conserved(log);
    EXPECT_EQ(log.elapsed, 10 + 12 * std::max<Tick>(10, k));
  }
}

TEST(Run, StallWhenTrainingOutpacesStream) {
  Fixture f;
  auto stream = make_iid_stream(f.model, 32, 2);
  ReplayBuffer buf(16, EvictionPolicy::fifo);
  const RunLog log = run({RunMode::Kind::buffered}, *stream, &buf, f.learner, {2, 1, 5}, f.opts);
  EXPECT_EQ(log.idle_ticks, 0);
  EXPECT_EQ(log.stream_stall_ticks, 4 * 3);
  expect_conserved(log);
}

TEST(Run, MinredTracksFeatures) {
  Fixture f;
  auto stream = make_segment_stream(f.model, {8, 0.05, 12}, 3);
  ReplayBuffer buf(32, EvictionPolicy::minred);
  const RunLog log = run({RunMode::Kind::buffered}, *stream, &buf, f.learner, {4, 1, 4}, f.opts);
  EXPECT_TRUE(log.completed);
  EXPECT_GT(buf.initialized_count(), 0u);
  EXPECT_EQ(buf.size(), 32u);
}

TEST(Run, OracleRereadsStore) {
  Fixture f;
  auto stream = make_iid_stream(f.model, 40, 2);
  RunMode mode{RunMode::Kind::epoch_oracle, 3};
  const RunLog log = run(mode, *stream, nullptr, f.learner, {2, 1, 1}, f.opts);
  EXPECT_FALSE(log.streaming);
  EXPECT_FALSE(single_pass_guarantee(log));
  EXPECT_EQ(log.source_reads.size(), 120u);
  EXPECT_EQ(log.training_steps, 15);
  EXPECT_EQ(log.fetch_ticks, 10);
  expect_conserved(log);
}

TEST(Run, CheckpointsFireAtTicks) {
  Fixture f;
  auto stream = make_iid_stream(f.model, 80, 2);
  std::vector<std::size_t> seen;
  f.opts.checkpoints = {30, 10, 70};
  f.opts.evaluator = [](const LearnerState& s) { return EvalSnapshot{static_cast<double>(s.step_count)}; };
  f.opts.on_checkpoint = [&](const CheckpointRecord& c) { seen.push_back(c.index); };
  const RunLog log = run({RunMode::Kind::conventional}, *stream, nullptr, f.learner, {10, 1, 1}, f.opts);
  ASSERT_EQ(log.checkpoints.size(), 4u);
  EXPECT_EQ(seen, (std::vector<std::size_t>{0, 1, 2, 3}));
  EXPECT_EQ(log.checkpoints[0].tick, 10);
  EXPECT_EQ(log.checkpoints[0].step_count, 0);
  // Tick 30 = first fetch + two cycles, after the second batch trained.
  EXPECT_EQ(log.checkpoints[1].tick, 30);
  EXPECT_EQ(log.checkpoints[1].samples_fetched, 16u);
  EXPECT_EQ(log.checkpoints[1].step_count, 2);
  EXPECT_TRUE(log.checkpoints.back().is_final);
  EXPECT_EQ(log.checkpoints.back().tick, log.elapsed);
  ASSERT_TRUE(log.checkpoints.back().eval.has_value());
  EXPECT_EQ(log.checkpoints.back().eval->accuracy, 10.0);
}

TEST(Run, SequentialBatchesAreCorrelated) {
  Fixture f;
  auto stream = make_segment_stream(f.model, {64, 0.05, 4}, 3);
  const RunLog log = run({RunMode::Kind::conventional}, *stream, nullptr, f.learner, {1, 1, 1}, f.opts);
  ASSERT_FALSE(log.checkpoints.empty());
  EXPECT_DOUBLE_EQ(log.checkpoints.back().within_batch_correlation, 1.0);
}

TEST(Run, CompositionWindowWithoutBuffer) {
  Fixture f;
  auto stream = make_iid_stream(f.model, 64, 2);
  f.opts.composition_window = 20;
  f.opts.class_to_partition = {0, 0, 1, 1};
  const RunLog log = run({RunMode::Kind::conventional}, *stream, nullptr, f.learner, {1, 1, 1}, f.opts);
  const auto& last = log.checkpoints.back();
  EXPECT_EQ(last.buffer_size, 20u);
  std::size_t total = 0;
  for (const auto& [p, n] : last.composition) total += n;
  EXPECT_EQ(total, 20u);
}

TEST(Run, RejectsMismatchedBuffer) {
  Fixture f;
  auto stream = make_iid_stream(f.model, 16, 2);
  ReplayBuffer small(4, EvictionPolicy::fifo);
  EXPECT_THROW(run({RunMode::Kind::buffered}, *stream, &small, f.learner, {1, 1, 1}, f.opts), ConfigError);
  EXPECT_THROW(run({RunMode::Kind::buffered}, *stream, nullptr, f.learner, {1, 1, 1}, f.opts), ConfigError);
  ReplayBuffer ok(16, EvictionPolicy::fifo);
  EXPECT_THROW(run({RunMode::Kind::conventional}, *stream, &ok, f.learner, {1, 1, 1}, f.opts), ConfigError);
}

TEST(Run, DeterministicForSeed) {
  auto once = [] {
    Fixture f;
    auto stream = make_segment_stream(f.model, {8, 0.05, 10}, 3);
    ReplayBuffer buf(24, EvictionPolicy::minred);
    f.opts.seed = 5;
    run({RunMode::Kind::buffered}, *stream, &buf, f.learner, {4, 1, 3}, f.opts);
    return f.learner.params.flatten();
  };
  EXPECT_EQ(once(), once());
}

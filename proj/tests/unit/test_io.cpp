#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <limits>

#include "cssl/io.hpp"
#include "cssl/streams.hpp"

using namespace cssl;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "cssl-test-io";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(FormatDouble, RoundTrips) {
  for (double v : {0.0, -0.0, 0.1, 1.0 / 3.0, 1e-300, 6.02214076e23, -2.5}) {
    const std::string s = format_double(v);
    EXPECT_EQ(std::stod(s), v) << s;
  }
  EXPECT_EQ(format_double(std::numeric_limits<double>::quiet_NaN()), "nan");
  EXPECT_EQ(format_double(std::numeric_limits<double>::infinity()), "inf");
  EXPECT_EQ(format_double(-std::numeric_limits<double>::infinity()), "-inf");
}

TEST(Csv, AppendAndRead) {
  const fs::path p = scratch("sub/dir/a.csv");
  fs::remove_all(p.parent_path());
  {
    CsvAppender out(p, {"a", "b"});
    out.append({"1", "x"});
    // Rows are on disk before the appender closes.
    const CsvTable partial = read_csv(p);
    EXPECT_EQ(partial.rows.size(), 1u);
    out.append({"2", ""});
    EXPECT_THROW(out.append({"3"}), IoError);
    EXPECT_THROW(out.append({"3", "a,b"}), IoError);
  }
  const CsvTable t = read_csv(p);
  EXPECT_EQ(t.header, (std::vector<std::string>{"a", "b"}));
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(t.rows[1][1], "");
  EXPECT_EQ(t.column("b"), 1);
  EXPECT_EQ(t.column("zzz"), -1);
}

TEST(Csv, ReadErrors) {
  EXPECT_THROW(read_csv(scratch("missing.csv")), IoError);
  const fs::path p = scratch("ragged.csv");
  write_text(p, "a,b\n1,2\n3\n");
  try {
    read_csv(p);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("ragged.csv:3:"), std::string::npos) << e.what();
  }
}

TEST(Json, WriteRead) {
  const fs::path p = scratch("x.json");
  Json j = {{"b", 1}, {"a", {1.5, 2.5}}};
  write_json(p, j);
  EXPECT_EQ(read_json(p), j);
  write_text(p, "{not json");
  EXPECT_THROW(read_json(p), IoError);
}

TEST(BufferSnapshot, RoundTrip) {
  ReplayBuffer buf(4, EvictionPolicy::minred, 0.3);
  std::vector<Sample> xs(3);
  for (int i = 0; i < 3; ++i) {
    xs[i].id = 10 + i;
    xs[i].source = 7;
    xs[i].class_label = i;
    xs[i].arrival_tick = 100 + i;
    xs[i].payload = Vector::Zero(2);
  }
  buf.add(xs);
  const SampleId ids[] = {11};
  Vector f(3);
  f << 0.1, 1.0 / 3.0, -2.0;
  const Vector fs_[] = {f};
  buf.track_features(ids, fs_);
  const fs::path p = scratch("buffer.csv");
  const auto entries = buf.entries();
  write_buffer_snapshot(p, entries);
  const auto back = read_buffer_snapshot(p);
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].sample.id, entries[i].sample.id);
    EXPECT_EQ(back[i].sample.source, 7);
    EXPECT_EQ(back[i].sample.class_label, entries[i].sample.class_label);
    EXPECT_EQ(back[i].sample.arrival_tick, entries[i].sample.arrival_tick);
    EXPECT_EQ(back[i].insert_order, entries[i].insert_order);
    EXPECT_EQ(back[i].feature.initialized, entries[i].feature.initialized);
    EXPECT_EQ(back[i].feature.alpha, 0.3);
  }
  EXPECT_EQ(back[1].feature.value, f);
}

TEST(LearnerCheckpoint, ExactRoundTrip) {
  LearnerState st = make_learner({5, 4, 3}, {0.8, 1e-3}, 3);
  st.step_count = 17;
  for (double& v : st.velocity.w1.reshaped()) v = 1.0 / 7.0;
  const fs::path p = scratch("learner.json");
  save_learner(p, st);
  const LearnerState back = load_learner(p);
  EXPECT_EQ(back.params.flatten(), st.params.flatten());
  EXPECT_EQ(back.velocity.flatten(), st.velocity.flatten());
  EXPECT_EQ(back.step_count, 17);
  EXPECT_EQ(back.optimizer.momentum, 0.8);
  EXPECT_EQ(back.optimizer.weight_decay, 1e-3);
  EXPECT_EQ(back.dims.hidden, 4);
}

TEST(LearnerCheckpoint, RejectsShapeMismatch) {
  LearnerState st = make_learner({5, 4, 3}, {}, 3);
  Json j = learner_to_json(st);
  j["dims"]["hidden"] = 6;
  EXPECT_THROW(learner_from_json(j), IoError);
}

TEST(Samples, RoundTrip) {
  ClassModelConfig cfg;
  cfg.num_classes = 3;
  cfg.dim = 4;
  const ClassModel m = make_class_model(cfg);
  auto s = make_segment_stream(m, {5, 0.1, 4}, 2);
  const auto xs = materialize(*s);
  const fs::path p = scratch("samples.csv");
  write_samples(p, xs);
  const auto back = read_samples(p);
  ASSERT_EQ(back.size(), xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    EXPECT_EQ(back[i].id, xs[i].id);
    EXPECT_EQ(back[i].source, xs[i].source);
    EXPECT_EQ(back[i].class_label, xs[i].class_label);
    EXPECT_EQ(back[i].payload, xs[i].payload);
  }
}

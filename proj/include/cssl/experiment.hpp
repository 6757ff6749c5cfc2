#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cssl/analytics.hpp"
#include "cssl/buffer.hpp"
#include "cssl/io.hpp"
#include "cssl/learner.hpp"
#include "cssl/scheduler.hpp"
#include "cssl/streams.hpp"

namespace cssl {

enum class ExperimentKind { efficiency, correlated, lifelong, analytics_only };

std::string to_string(ExperimentKind kind);
ExperimentKind parse_experiment_kind(const std::string& name);

struct StreamSection {
  enum class Kind { iid, segment, markov, walk, partitioned };

  Kind kind = Kind::iid;
  // iid and markov streams.
  std::size_t length = 6400;
  SegmentStreamConfig segment;
  MarkovStreamConfig markov;
  WalkStreamConfig walk;
  // partitioned streams. Each permutation is a separate run per seed; empty
  // means the identity order.
  int num_partitions = 4;
  std::size_t samples_per_partition = 6400;
  double transition_fraction = 0.10;
  std::vector<std::vector<int>> permutations;
  // Samples per stream fetch; 0 means the training batch size.
  std::size_t fetch_size = 0;
};

std::string to_string(StreamSection::Kind kind);
StreamSection::Kind parse_stream_kind(const std::string& name);

struct BufferSection {
  std::size_t capacity = 1024;
  EvictionPolicy policy = EvictionPolicy::fifo;
  double alpha = 0.5;
};

struct MethodConfig {
  std::string name;
  RunMode mode;
  // Present for buffered methods only.
  std::optional<BufferSection> buffer;
  // Hyper-sampling rate; 0 takes bandwidth.hyper_sampling_k. Conventional
  // and oracle methods always use 1.
  int hyper_sampling_k = 0;
  // Train on a shuffled copy of the stream (decorrelated reference; not
  // streaming).
  bool shuffle_stream = false;
};

struct LearnerSection {
  int hidden = 64;
  int embedding = 16;
  OptimizerConfig optimizer;
  // total_steps == 0 means "the number of steps this method takes".
  LRSchedule schedule{LRSchedule::Kind::cosine_fixed_end, 0.05, 0, 0.8};
  AugmentationConfig augmentation{0.5, 0.1, 0.8, 1.2};
  std::size_t batch_size = 64;
};

struct EvaluationSection {
  // Fractions of each method's run; mapped to ticks per method. Used when
  // non-empty, otherwise checkpoint_ticks are taken as given.
  std::vector<double> checkpoint_fractions{1.0};
  std::vector<Tick> checkpoint_ticks;
  int probe_train_per_class = 50;
  int probe_test_per_class = 100;
  ProbeConfig probe;
  // Probe at every checkpoint, or only at the end of the run.
  bool probe_every_checkpoint = true;
};

struct AnalyticsSection {
  std::vector<std::int64_t> b_values;
  std::vector<double> p_c_values;
  std::int64_t trials = 100000;
  // B = fifo_multiple * b for the FIFO reduction columns.
  std::int64_t fifo_multiple = 16;
  std::uint64_t seed = 0;
};

struct ExperimentConfig {
  std::string name = "experiment";
  ExperimentKind kind = ExperimentKind::efficiency;
  ClassModelConfig data;
  StreamSection stream;
  std::vector<MethodConfig> methods;
  LearnerSection learner;
  BandwidthConfig bandwidth;
  EvaluationSection evaluation;
  AnalyticsSection analytics;
  std::vector<std::uint64_t> seeds{0};
  std::string output_dir = "runs";
};

struct Diagnostic {
  std::string field;  // dotted path, e.g. "methods[1].buffer.capacity"
  std::string message;
};

// Thrown with every problem found, not just the first.
class ConfigValidationError : public ConfigError {
 public:
  explicit ConfigValidationError(std::vector<Diagnostic> diagnostics);
  const std::vector<Diagnostic>& diagnostics() const { return diagnostics_; }

 private:
  std::vector<Diagnostic> diagnostics_;
};

// Parses and validates. Unknown keys are errors so typos do not pass
// silently. Missing keys take the defaults above.
ExperimentConfig parse_config(const Json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
// Module-level checks on an already parsed config; empty when valid.
std::vector<Diagnostic> validate(const ExperimentConfig& config);
// Fully resolved form: every field written out, parse_config(to_json(c)) == c.
Json to_json(const ExperimentConfig& config);

// CSSL_OUTPUT_DIR replaces output_dir; CSSL_SEED replaces the seed list by a
// single seed. Nothing else is read from the environment.
void apply_env_overrides(ExperimentConfig& config);

// ---------------------------------------------------------------------------

struct RunSummary {
  std::string method;
  std::uint64_t seed = 0;
  // Index into stream.permutations; -1 for non-partitioned streams.
  int permutation = -1;
  bool completed = true;
  std::string stop_reason;
  double final_accuracy = 0.0;
  // Within-batch correlation over the last checkpoint interval.
  double steady_state_correlation = 0.0;
  double idle_fraction = 0.0;
  std::int64_t training_steps = 0;
  std::size_t stream_batches = 0;
  double effective_hyper_sampling = 0.0;
  bool single_pass = true;
  Tick elapsed = 0;
  // Partitioned streams only.
  std::optional<double> forgetting;
  std::vector<std::optional<double>> openset;
  // Share of held samples from partitions scheduled before the current stage.
  std::vector<double> past_partition_share;
  std::vector<int> checkpoint_stage;
};

struct RunRecord {
  RunSummary summary;
  RunLog log;
  std::vector<BufferEntry> final_buffer;
};

struct MethodAggregate {
  std::string method;
  std::size_t runs = 0;
  double final_accuracy_mean = 0.0;
  double final_accuracy_std = 0.0;
  double steady_state_correlation_mean = 0.0;
  double steady_state_correlation_std = 0.0;
  double idle_fraction_mean = 0.0;
  std::optional<double> forgetting_mean;
  // Per checkpoint, over runs where defined.
  std::vector<std::optional<double>> openset_mean;
  std::vector<double> past_partition_share_mean;
};

struct ExperimentResult {
  ExperimentConfig config;
  std::vector<RunRecord> runs;
  std::vector<MethodAggregate> aggregates;
  // analytics_only experiments.
  std::optional<CsvTable> analytics;
  // Set when outputs were written.
  std::optional<std::filesystem::path> output_dir;

  bool all_completed() const;
  const MethodAggregate* aggregate(const std::string& method) const;
  std::vector<const RunRecord*> runs_of(const std::string& method) const;
};

struct ExecutionOptions {
  bool write_outputs = true;
  // Echoed verbatim as config.json; to_json(config) when empty.
  std::string config_text;
  // Restrict to these methods (all when empty).
  std::vector<std::string> only_methods;
  // Progress lines go here when set.
  std::ostream* progress = nullptr;
};

// Validates, then executes every (method, seed, permutation) run. Output
// layout under <output_dir>/<name>-<timestamp>/:
//   config.json, resolved_config.json, summary.json, summary.csv
//   <method>/seed-<s>[-perm-<p>]/{metrics.csv, summary.json, buffer.csv, learner.json}
//   analytics.csv (analytics_only)
// metrics.csv gains one flushed row per checkpoint, so a failed run leaves its
// rows on disk.
ExperimentResult run_experiment(const ExperimentConfig& config, const ExecutionOptions& options = {});

// Likelihood sweep over the analytics grid: exact, closed form, Monte Carlo
// and the FIFO reduction ratio per (b, p_c).
CsvTable run_analytics(const AnalyticsSection& section);

// Ticks at which a method's checkpoints fall, from the evaluation section.
std::vector<Tick> checkpoint_ticks_for(const ExperimentConfig& config, const MethodConfig& method,
                                       std::size_t stream_length);
// Training steps the method takes on a stream of this length.
std::int64_t planned_steps(const ExperimentConfig& config, const MethodConfig& method, std::size_t stream_length);
std::size_t stream_length(const ExperimentConfig& config);

// ---------------------------------------------------------------------------

struct ComparisonResult {
  std::vector<std::string> labels;
  std::vector<Tick> common_ticks;
  std::vector<std::string> warnings;
  // metric, tick, then one column per run.
  CsvTable table;
  Json summary;
};

// Each directory is a run directory (holding metrics.csv) or an experiment
// directory whose run directories are collected. Checkpoints are aligned on
// tick; ticks missing from any run are dropped with a warning. Writes
// comparison.csv and comparison.json into out_dir when given.
ComparisonResult compare_runs(const std::vector<std::filesystem::path>& dirs,
                              const std::optional<std::filesystem::path>& out_dir = std::nullopt);

}  // namespace cssl

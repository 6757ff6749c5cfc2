#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cssl/buffer.hpp"
#include "cssl/core.hpp"
#include "cssl/learner.hpp"
#include "cssl/streams.hpp"

namespace cssl {

// Virtual-time costs. t_opt is the unit; t_data is the delay between
// consecutive stream batches.
struct BandwidthConfig {
  Tick t_data = 1;
  Tick t_opt = 1;
  int hyper_sampling_k = 1;

  Tick t_idle() const { return t_data > t_opt ? t_data - t_opt : 0; }
  void validate() const;
};

struct RunMode {
  enum class Kind { conventional, buffered, epoch_oracle };
  Kind kind = Kind::conventional;
  int epochs = 1;

  bool streaming() const { return kind != Kind::epoch_oracle; }
};

std::string to_string(RunMode::Kind kind);
RunMode::Kind parse_run_mode(const std::string& name);

// Whatever the caller's evaluator measures at a checkpoint.
struct EvalSnapshot {
  double accuracy = 0.0;
  std::vector<double> per_partition;
  std::vector<double> per_class;
};

struct CheckpointRecord {
  std::size_t index = 0;
  bool is_final = false;
  Tick tick = 0;
  Tick fetch_ticks = 0;
  Tick train_ticks = 0;
  Tick idle_ticks = 0;
  std::int64_t step_count = 0;
  std::size_t stream_batches = 0;
  std::size_t samples_fetched = 0;
  // Mean over training batches since the previous checkpoint.
  double within_batch_correlation = 0.0;
  std::size_t batches_measured = 0;
  double mean_loss = 0.0;
  double lr = 0.0;
  // Buffer contents (or, without a buffer, the trailing composition window)
  // grouped by partition.
  std::map<std::int64_t, std::size_t> composition;
  std::size_t buffer_size = 0;
  std::size_t distinct_sources = 0;
  double buffer_pair_correlation = 0.0;
  std::optional<EvalSnapshot> eval;
};

struct RunOptions {
  std::size_t batch_size = 64;
  // Samples per stream fetch; 0 means batch_size.
  std::size_t stream_batch_size = 0;
  AugmentationConfig augmentation;
  LRSchedule schedule;
  std::vector<Tick> checkpoints;
  std::uint64_t seed = 0;
  std::vector<int> class_to_partition;
  // Without a buffer, composition is taken over this many most recently
  // trained samples (0 disables it).
  std::size_t composition_window = 0;
  std::function<EvalSnapshot(const LearnerState&)> evaluator;
  std::function<void(const CheckpointRecord&)> on_checkpoint;
};

struct RunLog {
  RunMode mode;
  bool streaming = true;
  bool completed = false;
  std::string stop_reason;
  std::vector<CheckpointRecord> checkpoints;
  // Every read of a sample from the data source, in order. The epoch oracle
  // re-reads its stored copy once per epoch.
  std::vector<SampleId> source_reads;
  std::size_t stream_batches_fetched = 0;
  std::int64_t training_steps = 0;
  Tick elapsed = 0;
  Tick fetch_ticks = 0;
  Tick train_ticks = 0;
  Tick idle_ticks = 0;
  Tick stream_stall_ticks = 0;

  // Idle share of the trainer's time once the pipeline is full.
  double idle_fraction() const;
};

// Runs one continuous-SSL training loop on a virtual clock.
//
// conventional: each stream batch is trained on once, then discarded.
// buffered:     each stream batch is added to the buffer, then K steps are
//               taken on uniform buffer samples, tracking features.
// epoch_oracle: stores the whole stream, then trains `epochs` shuffled
//               passes. Violates the streaming setting; reference only.
//
// The first batch costs t_data ticks of fetch latency (the whole stream for
// the oracle). Afterwards each batch opens a cycle of max(t_data, T) ticks
// where T = steps * t_opt, split into T training ticks and
// max(t_data - T, 0) idle ticks.
RunLog run(const RunMode& mode, StreamSource& stream, ReplayBuffer* buffer, LearnerState& learner,
           const BandwidthConfig& bandwidth, const RunOptions& options);

// True iff no sample id was read from the source more than once.
bool single_pass_guarantee(const RunLog& log);

struct DataUsage {
  std::size_t unique_samples_fetched = 0;
  std::int64_t training_steps = 0;
  double effective_hyper_sampling = 0.0;
};

DataUsage data_usage(const RunLog& log);

}  // namespace cssl

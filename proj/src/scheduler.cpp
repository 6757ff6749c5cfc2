#include "cssl/scheduler.hpp"

#include <algorithm>
#include <deque>
#include <random>
#include <unordered_set>

#include "cssl/analytics.hpp"

namespace cssl {

void BandwidthConfig::validate() const {
  if (t_data < 1) throw ConfigError("bandwidth: t_data must be >= 1");
  if (t_opt < 1) throw ConfigError("bandwidth: t_opt must be >= 1");
  if (hyper_sampling_k < 1) throw ConfigError("bandwidth: hyper_sampling_k must be >= 1");
}

std::string to_string(RunMode::Kind kind) {
  switch (kind) {
    case RunMode::Kind::conventional: return "conventional";
    case RunMode::Kind::buffered: return "buffered";
    case RunMode::Kind::epoch_oracle: return "epoch_oracle";
  }
  return "unknown";
}

RunMode::Kind parse_run_mode(const std::string& name) {
  if (name == "conventional") return RunMode::Kind::conventional;
  if (name == "buffered") return RunMode::Kind::buffered;
  if (name == "epoch_oracle") return RunMode::Kind::epoch_oracle;
  throw ConfigError("unknown run mode '" + name + "'");
}

double RunLog::idle_fraction() const {
  const Tick active = train_ticks + idle_ticks;
  return active > 0 ? static_cast<double>(idle_ticks) / static_cast<double>(active) : 0.0;
}

namespace {

class Runner {
 public:
  Runner(const RunMode& mode, StreamSource& stream, ReplayBuffer* buffer, LearnerState& learner,
         const BandwidthConfig& bw, const RunOptions& opts)
      : mode_(mode), stream_(stream), buffer_(buffer), learner_(learner), bw_(bw), opts_(opts),
        rng_(derive_seed(opts.seed, 0x5c4ed)) {
    log_.mode = mode;
    log_.streaming = mode.streaming();
    checkpoints_ = opts.checkpoints;
    std::sort(checkpoints_.begin(), checkpoints_.end());
  }

  RunLog execute() {
    try {
      switch (mode_.kind) {
        case RunMode::Kind::conventional: run_conventional(); break;
        case RunMode::Kind::buffered: run_buffered(); break;
        case RunMode::Kind::epoch_oracle: run_oracle(); break;
      }
      log_.completed = stop_reason_.empty();
      log_.stop_reason = stop_reason_;
    } catch (const NumericalError& e) {
      log_.completed = false;
      log_.stop_reason = e.what();
    }
    emit(true);
    return std::move(log_);
  }

 private:
  std::size_t stream_batch() const { return opts_.stream_batch_size ? opts_.stream_batch_size : opts_.batch_size; }

  std::vector<Sample> fetch(std::size_t n) {
    std::vector<Sample> batch = stream_.take(n);
    if (batch.empty()) return batch;
    ++log_.stream_batches_fetched;
    for (const Sample& s : batch) log_.source_reads.push_back(s.id);
    return batch;
  }

  void train_on(std::span<const Sample> batch) {
    const TrainStepResult r =
        train_step(learner_, batch, opts_.augmentation, opts_.schedule, rng_());
    ++log_.training_steps;
    last_lr_ = r.lr;
    loss_sum_ += r.loss;
    ++loss_count_;
    if (batch.size() >= 2) {
      corr_sum_ += batch_correlation(batch);
      ++corr_count_;
    }
    if (buffer_) {
      std::vector<SampleId> ids;
      ids.reserve(batch.size());
      for (const Sample& s : batch) ids.push_back(s.id);
      buffer_->track_features(ids, r.embeddings);
    } else if (opts_.composition_window > 0) {
      for (const Sample& s : batch) {
        window_.push_back(s);
        if (window_.size() > opts_.composition_window) window_.pop_front();
      }
    }
    advance(bw_.t_opt, log_.train_ticks);
  }

  void advance(Tick dt, Tick& bucket) {
    if (dt <= 0) return;
    bucket += dt;
    log_.elapsed += dt;
    if (next_checkpoint_ < checkpoints_.size() && log_.elapsed >= checkpoints_[next_checkpoint_]) {
      while (next_checkpoint_ < checkpoints_.size() && log_.elapsed >= checkpoints_[next_checkpoint_])
        ++next_checkpoint_;
      emit(false);
    }
  }

  // Ticks left in the current cycle after training T ticks.
  void close_cycle(Tick trained) {
    if (bw_.t_data > trained) advance(bw_.t_data - trained, log_.idle_ticks);
    else log_.stream_stall_ticks += trained - bw_.t_data;
  }

  void emit(bool is_final) {
    if (!log_.checkpoints.empty() && log_.checkpoints.back().tick == log_.elapsed) {
      if (is_final) log_.checkpoints.back().is_final = true;
      return;
    }
    CheckpointRecord rec;
    rec.index = log_.checkpoints.size();
    rec.is_final = is_final;
    rec.tick = log_.elapsed;
    rec.fetch_ticks = log_.fetch_ticks;
    rec.train_ticks = log_.train_ticks;
    rec.idle_ticks = log_.idle_ticks;
    rec.step_count = learner_.step_count;
    rec.stream_batches = log_.stream_batches_fetched;
    rec.samples_fetched = stream_.position();
    rec.within_batch_correlation = corr_count_ ? corr_sum_ / static_cast<double>(corr_count_) : 0.0;
    rec.batches_measured = corr_count_;
    rec.mean_loss = loss_count_ ? loss_sum_ / static_cast<double>(loss_count_) : 0.0;
    rec.lr = last_lr_;
    corr_sum_ = loss_sum_ = 0.0;
    corr_count_ = loss_count_ = 0;

    if (buffer_) {
      const std::vector<BufferEntry> entries = buffer_->entries();
      std::vector<Sample> held;
      held.reserve(entries.size());
      for (const auto& e : entries) held.push_back(e.sample);
      rec.composition = composition(held, Grouping::by_partition, opts_.class_to_partition);
      rec.buffer_size = entries.size();
      rec.distinct_sources = composition(held, Grouping::by_source).size();
      rec.buffer_pair_correlation = buffer_pair_correlation(entries);
    } else if (!window_.empty()) {
      const std::vector<Sample> held(window_.begin(), window_.end());
      rec.composition = composition(held, Grouping::by_partition, opts_.class_to_partition);
      rec.buffer_size = held.size();
      rec.distinct_sources = composition(held, Grouping::by_source).size();
      rec.buffer_pair_correlation = batch_correlation(held);
    }
    if (opts_.evaluator) rec.eval = opts_.evaluator(learner_);
    log_.checkpoints.push_back(rec);
    if (opts_.on_checkpoint) opts_.on_checkpoint(log_.checkpoints.back());
  }

  void run_conventional() {
    bool first = true;
    for (;;) {
      std::vector<Sample> batch = fetch(stream_batch());
      if (batch.empty()) break;
      if (first) {
        advance(bw_.t_data, log_.fetch_ticks);
        first = false;
      }
      train_on(batch);
      close_cycle(bw_.t_opt);
    }
  }

  void run_buffered() {
    bool first = true;
    const auto k = static_cast<Tick>(bw_.hyper_sampling_k);
    for (;;) {
      std::vector<Sample> batch = fetch(stream_batch());
      if (batch.empty()) break;
      if (first) {
        advance(bw_.t_data, log_.fetch_ticks);
        first = false;
      }
      buffer_->add(batch);
      Tick trained = 0;
      for (Tick step = 0; step < k; ++step) {
        if (buffer_->size() < opts_.batch_size) break;
        const std::vector<Sample> train_batch = buffer_->sample_batch(opts_.batch_size, rng_);
        train_on(train_batch);
        trained += bw_.t_opt;
      }
      close_cycle(trained);
    }
  }

  void run_oracle() {
    std::vector<Sample> stored;
    for (;;) {
      std::vector<Sample> batch = fetch(stream_batch());
      if (batch.empty()) break;
      stored.insert(stored.end(), std::make_move_iterator(batch.begin()), std::make_move_iterator(batch.end()));
    }
    advance(static_cast<Tick>(log_.stream_batches_fetched) * bw_.t_data, log_.fetch_ticks);
    if (stored.empty()) return;

    const std::size_t b = std::min(opts_.batch_size, stored.size());
    const std::size_t per_epoch = stored.size() / b;
    std::vector<std::size_t> order(stored.size());
    for (int epoch = 0; epoch < mode_.epochs; ++epoch) {
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      std::shuffle(order.begin(), order.end(), rng_);
      // The first pass is the initial read; later passes re-read the store.
      if (epoch > 0)
        for (const Sample& s : stored) log_.source_reads.push_back(s.id);
      std::vector<Sample> batch;
      for (std::size_t j = 0; j < per_epoch; ++j) {
        batch.clear();
        for (std::size_t i = 0; i < b; ++i) batch.push_back(stored[order[j * b + i]]);
        train_on(batch);
      }
    }
  }

  const RunMode& mode_;
  StreamSource& stream_;
  ReplayBuffer* buffer_;
  LearnerState& learner_;
  const BandwidthConfig& bw_;
  const RunOptions& opts_;
  std::mt19937_64 rng_;
  RunLog log_;
  std::vector<Tick> checkpoints_;
  std::size_t next_checkpoint_ = 0;
  std::string stop_reason_;
  std::deque<Sample> window_;
  double corr_sum_ = 0.0;
  std::size_t corr_count_ = 0;
  double loss_sum_ = 0.0;
  std::size_t loss_count_ = 0;
  double last_lr_ = 0.0;
};

}  // namespace

RunLog run(const RunMode& mode, StreamSource& stream, ReplayBuffer* buffer, LearnerState& learner,
           const BandwidthConfig& bandwidth, const RunOptions& options) {
  bandwidth.validate();
  options.augmentation.validate();
  options.schedule.validate();
  if (options.batch_size < 1) throw ConfigError("run: batch_size must be >= 1");
  if (mode.kind == RunMode::Kind::buffered) {
    if (!buffer) throw ConfigError("run: buffered mode requires a replay buffer");
    if (buffer->capacity() < options.batch_size)
      throw ConfigError("run: buffer capacity is smaller than the training batch");
    const std::size_t fetch = options.stream_batch_size ? options.stream_batch_size : options.batch_size;
    if (fetch > buffer->capacity()) throw ConfigError("run: stream batch exceeds buffer capacity");
  } else if (buffer) {
    throw ConfigError("run: only buffered mode takes a replay buffer");
  }
  if (mode.kind == RunMode::Kind::epoch_oracle && mode.epochs < 1)
    throw ConfigError("run: epoch oracle needs epochs >= 1");
  Runner runner(mode, stream, buffer, learner, bandwidth, options);
  return runner.execute();
}

bool single_pass_guarantee(const RunLog& log) {
  std::unordered_set<SampleId> seen;
  seen.reserve(log.source_reads.size());
  for (SampleId id : log.source_reads)
    if (!seen.insert(id).second) return false;
  return true;
}

DataUsage data_usage(const RunLog& log) {
  DataUsage u;
  u.unique_samples_fetched = std::unordered_set<SampleId>(log.source_reads.begin(), log.source_reads.end()).size();
  u.training_steps = log.training_steps;
  u.effective_hyper_sampling =
      log.stream_batches_fetched ? static_cast<double>(log.training_steps) / static_cast<double>(log.stream_batches_fetched)
                                 : 0.0;
  return u;
}

}  // namespace cssl

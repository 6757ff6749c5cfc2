#pragma once

#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cssl/buffer.hpp"
#include "cssl/core.hpp"
#include "cssl/learner.hpp"

namespace cssl {

using Json = nlohmann::ordered_json;

// Error reading or writing an artifact file.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shortest decimal text that reads back to the same double.
std::string format_double(double v);

// Append-only CSV writer. The header goes out on open and every row is
// flushed immediately, so a crash leaves all completed rows on disk.
class CsvAppender {
 public:
  CsvAppender(const std::filesystem::path& path, std::vector<std::string> header);

  void append(const std::vector<std::string>& row);
  const std::vector<std::string>& header() const { return header_; }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::vector<std::string> header_;
  std::ofstream out_;
};

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  // Index of a header column; -1 when absent.
  int column(const std::string& name) const;
};

// Plain comma-separated values without quoting; fields must not contain
// commas or newlines.
CsvTable read_csv(const std::filesystem::path& path);
void write_csv(const std::filesystem::path& path, const CsvTable& table);

Json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const Json& value);
std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

// Buffer snapshot: one row per entry in insertion order with columns
// id, source, class_label, arrival_tick, insert_order, initialized, alpha,
// f0..f{e-1} (tracked feature, empty when uninitialized).
void write_buffer_snapshot(const std::filesystem::path& path, std::span<const BufferEntry> entries);
std::vector<BufferEntry> read_buffer_snapshot(const std::filesystem::path& path);

// Learner checkpoint: dims, optimizer, step count, parameters and momentum
// buffers as JSON. Doubles round-trip exactly.
Json learner_to_json(const LearnerState& state);
LearnerState learner_from_json(const Json& j);
void save_learner(const std::filesystem::path& path, const LearnerState& state);
LearnerState load_learner(const std::filesystem::path& path);

// Stream dump: id, source, class_label, arrival_tick, x0..x{d-1}.
void write_samples(const std::filesystem::path& path, std::span<const Sample> samples);
std::vector<Sample> read_samples(const std::filesystem::path& path);

}  // namespace cssl

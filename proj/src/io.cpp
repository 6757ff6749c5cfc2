#include "cssl/io.hpp"

#include <charconv>
#include <cmath>
#include <limits>
#include <sstream>

namespace cssl {

namespace fs = std::filesystem;

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

namespace {

double parse_double(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw IoError("not a number: '" + s + "'");
  return v;
}

std::int64_t parse_int(const std::string& s) {
  std::int64_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw IoError("not an integer: '" + s + "'");
  return v;
}

void ensure_parent(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

std::string join(const std::vector<std::string>& fields) {
  std::string line;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) line += ',';
    if (fields[i].find_first_of(",\n") != std::string::npos)
      throw IoError("csv field contains a separator: '" + fields[i] + "'");
    line += fields[i];
  }
  return line;
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

CsvAppender::CsvAppender(const fs::path& path, std::vector<std::string> header)
    : path_(path), header_(std::move(header)) {
  ensure_parent(path_);
  out_.open(path_, std::ios::out | std::ios::trunc);
  if (!out_) throw IoError("cannot open " + path_.string() + " for writing");
  out_ << join(header_) << '\n';
  out_.flush();
}

void CsvAppender::append(const std::vector<std::string>& row) {
  if (row.size() != header_.size()) throw IoError("csv row width does not match header in " + path_.string());
  out_ << join(row) << '\n';
  out_.flush();
  if (!out_) throw IoError("write failed: " + path_.string());
}

int CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return static_cast<int>(i);
  return -1;
}

CsvTable read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  CsvTable table;
  std::string line;
  if (!std::getline(in, line)) throw IoError("empty csv: " + path.string());
  table.header = split(line);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto row = split(line);
    if (row.size() != table.header.size())
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": expected " +
                    std::to_string(table.header.size()) + " fields, got " + std::to_string(row.size()));
    table.rows.push_back(std::move(row));
  }
  return table;
}

void write_csv(const fs::path& path, const CsvTable& table) {
  CsvAppender out(path, table.header);
  for (const auto& row : table.rows) out.append(row);
}

Json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const Json& value) {
  write_text(path, value.dump(2) + "\n");
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  ensure_parent(path);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

// ---------------------------------------------------------------------------

void write_buffer_snapshot(const fs::path& path, std::span<const BufferEntry> entries) {
  Eigen::Index dim = 0;
  for (const auto& e : entries)
    if (e.feature.initialized) dim = std::max(dim, e.feature.value.size());
  std::vector<std::string> header{"id", "source", "class_label", "arrival_tick", "insert_order", "initialized", "alpha"};
  for (Eigen::Index k = 0; k < dim; ++k) header.push_back("f" + std::to_string(k));
  CsvAppender out(path, header);
  for (const auto& e : entries) {
    std::vector<std::string> row{std::to_string(e.sample.id),           std::to_string(e.sample.source),
                                 std::to_string(e.sample.class_label),  std::to_string(e.sample.arrival_tick),
                                 std::to_string(e.insert_order),        e.feature.initialized ? "1" : "0",
                                 format_double(e.feature.alpha)};
    for (Eigen::Index k = 0; k < dim; ++k)
      row.push_back(e.feature.initialized ? format_double(e.feature.value[k]) : "");
    out.append(row);
  }
}

std::vector<BufferEntry> read_buffer_snapshot(const fs::path& path) {
  const CsvTable t = read_csv(path);
  const int first_feature = t.column("f0");
  std::vector<BufferEntry> out;
  out.reserve(t.rows.size());
  for (const auto& r : t.rows) {
    BufferEntry e;
    e.sample.id = parse_int(r.at(0));
    e.sample.source = parse_int(r.at(1));
    e.sample.class_label = static_cast<int>(parse_int(r.at(2)));
    e.sample.arrival_tick = parse_int(r.at(3));
    e.insert_order = static_cast<std::uint64_t>(parse_int(r.at(4)));
    e.feature.initialized = r.at(5) == "1";
    e.feature.alpha = parse_double(r.at(6));
    if (e.feature.initialized && first_feature >= 0) {
      const std::size_t dim = r.size() - static_cast<std::size_t>(first_feature);
      e.feature.value.resize(static_cast<Eigen::Index>(dim));
      for (std::size_t k = 0; k < dim; ++k)
        e.feature.value[static_cast<Eigen::Index>(k)] = parse_double(r[first_feature + k]);
    }
    out.push_back(std::move(e));
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

Json matrix_to_json(const Matrix& m) {
  Json rows = Json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    Json row = Json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_from_json(const Json& j, Eigen::Index rows, Eigen::Index cols, const char* what) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows)
    throw IoError(std::string("learner checkpoint: bad shape for ") + what);
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const Json& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
      throw IoError(std::string("learner checkpoint: bad shape for ") + what);
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

Json vector_to_json(const Vector& v) { return Json(std::vector<double>(v.data(), v.data() + v.size())); }

Vector vector_from_json(const Json& j, Eigen::Index n, const char* what) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != n)
    throw IoError(std::string("learner checkpoint: bad length for ") + what);
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = j[static_cast<std::size_t>(i)].get<double>();
  return v;
}

Json params_to_json(const LearnerParams& p) {
  Json j;
  j["w1"] = matrix_to_json(p.w1);
  j["b1"] = vector_to_json(p.b1);
  j["w2"] = matrix_to_json(p.w2);
  j["b2"] = vector_to_json(p.b2);
  j["wp"] = matrix_to_json(p.wp);
  j["bp"] = vector_to_json(p.bp);
  return j;
}

LearnerParams params_from_json(const Json& j, const LearnerDims& d) {
  LearnerParams p;
  p.w1 = matrix_from_json(j.at("w1"), d.hidden, d.input, "w1");
  p.b1 = vector_from_json(j.at("b1"), d.hidden, "b1");
  p.w2 = matrix_from_json(j.at("w2"), d.embedding, d.hidden, "w2");
  p.b2 = vector_from_json(j.at("b2"), d.embedding, "b2");
  p.wp = matrix_from_json(j.at("wp"), d.embedding, d.embedding, "wp");
  p.bp = vector_from_json(j.at("bp"), d.embedding, "bp");
  return p;
}

}  // namespace

Json learner_to_json(const LearnerState& s) {
  Json j;
  j["format"] = "cssl-learner-v1";
  j["dims"] = {{"input", s.dims.input}, {"hidden", s.dims.hidden}, {"embedding", s.dims.embedding}};
  j["optimizer"] = {{"momentum", s.optimizer.momentum}, {"weight_decay", s.optimizer.weight_decay}};
  j["step_count"] = s.step_count;
  j["params"] = params_to_json(s.params);
  j["velocity"] = params_to_json(s.velocity);
  return j;
}

LearnerState learner_from_json(const Json& j) {
  try {
    if (j.at("format") != "cssl-learner-v1") throw IoError("learner checkpoint: unknown format");
    LearnerState s;
    s.dims.input = j.at("dims").at("input").get<int>();
    s.dims.hidden = j.at("dims").at("hidden").get<int>();
    s.dims.embedding = j.at("dims").at("embedding").get<int>();
    s.optimizer.momentum = j.at("optimizer").at("momentum").get<double>();
    s.optimizer.weight_decay = j.at("optimizer").at("weight_decay").get<double>();
    s.step_count = j.at("step_count").get<std::int64_t>();
    s.params = params_from_json(j.at("params"), s.dims);
    s.velocity = params_from_json(j.at("velocity"), s.dims);
    return s;
  } catch (const Json::exception& e) {
    throw IoError(std::string("learner checkpoint: ") + e.what());
  }
}

void save_learner(const fs::path& path, const LearnerState& state) {
  write_text(path, learner_to_json(state).dump() + "\n");
}

LearnerState load_learner(const fs::path& path) { return learner_from_json(read_json(path)); }

// ---------------------------------------------------------------------------

void write_samples(const fs::path& path, std::span<const Sample> samples) {
  const Eigen::Index dim = samples.empty() ? 0 : samples.front().payload.size();
  std::vector<std::string> header{"id", "source", "class_label", "arrival_tick"};
  for (Eigen::Index k = 0; k < dim; ++k) header.push_back("x" + std::to_string(k));
  CsvAppender out(path, header);
  for (const Sample& s : samples) {
    if (s.payload.size() != dim) throw IoError("write_samples: payload dimensions differ");
    std::vector<std::string> row{std::to_string(s.id), std::to_string(s.source), std::to_string(s.class_label),
                                 std::to_string(s.arrival_tick)};
    for (Eigen::Index k = 0; k < dim; ++k) row.push_back(format_double(s.payload[k]));
    out.append(row);
  }
}

std::vector<Sample> read_samples(const fs::path& path) {
  const CsvTable t = read_csv(path);
  const std::size_t dim = t.header.size() >= 4 ? t.header.size() - 4 : 0;
  std::vector<Sample> out;
  out.reserve(t.rows.size());
  for (const auto& r : t.rows) {
    Sample s;
    s.id = parse_int(r.at(0));
    s.source = parse_int(r.at(1));
    s.class_label = static_cast<int>(parse_int(r.at(2)));
    s.arrival_tick = parse_int(r.at(3));
    s.payload.resize(static_cast<Eigen::Index>(dim));
    for (std::size_t k = 0; k < dim; ++k) s.payload[static_cast<Eigen::Index>(k)] = parse_double(r[4 + k]);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace cssl

#pragma once

#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include <json.hpp>

#include "smolora/errors.hpp"

namespace smolora {

// Lower-triangular score table: entry (k, j), 1 <= j <= k <= T, is the score
// of task j after training stage k. Stages and tasks are 1-based.
class AccuracyMatrix {
 public:
  AccuracyMatrix() = default;
  explicit AccuracyMatrix(std::size_t tasks) : tasks_(tasks), cells_(tasks) {
    if (tasks == 0) throw ArgumentError("AccuracyMatrix needs at least one task");
    for (std::size_t k = 0; k < tasks; ++k) cells_[k].assign(k + 1, std::nullopt);
  }

  // Builds a matrix from ragged rows; row k must hold k values.
  static AccuracyMatrix from_rows(const std::vector<std::vector<double>>& rows, std::size_t tasks = 0) {
    AccuracyMatrix a(tasks == 0 ? rows.size() : tasks);
    if (rows.size() > a.tasks()) throw ArgumentError("more stage rows than tasks");
    for (std::size_t k = 0; k < rows.size(); ++k) {
      if (rows[k].size() != k + 1) {
        throw ShapeError("stage " + std::to_string(k + 1) + " row has " + std::to_string(rows[k].size()) +
                         " entries, expected " + std::to_string(k + 1));
      }
      for (std::size_t j = 0; j < rows[k].size(); ++j) a.set(k + 1, j + 1, rows[k][j]);
    }
    return a;
  }

  std::size_t tasks() const noexcept { return tasks_; }

  void set(std::size_t k, std::size_t j, double v) {
    check_index(k, j);
    if (!std::isfinite(v) || v < 0.0) {
      throw ArgumentError("score at (" + std::to_string(k) + "," + std::to_string(j) + ") must be finite and >= 0");
    }
    cells_[k - 1][j - 1] = v;
  }

  std::optional<double> get(std::size_t k, std::size_t j) const {
    check_index(k, j);
    return cells_[k - 1][j - 1];
  }

  double at(std::size_t k, std::size_t j) const {
    const auto v = get(k, j);
    if (!v) throw ContractError("score (" + std::to_string(k) + "," + std::to_string(j) + ") is missing");
    return *v;
  }

  bool row_complete(std::size_t k) const {
    if (k == 0 || k > tasks_) return false;
    for (const auto& c : cells_[k - 1])
      if (!c) return false;
    return true;
  }

  // Number of leading complete rows.
  std::size_t completed_stages() const {
    std::size_t k = 0;
    while (k < tasks_ && row_complete(k + 1)) ++k;
    return k;
  }

  friend bool operator==(const AccuracyMatrix&, const AccuracyMatrix&) = default;

 private:
  void check_index(std::size_t k, std::size_t j) const {
    if (k < 1 || k > tasks_ || j < 1 || j > k) {
      throw ArgumentError("index (" + std::to_string(k) + "," + std::to_string(j) +
                          ") outside the lower triangle of a " + std::to_string(tasks_) + "-task matrix");
    }
  }

  std::size_t tasks_ = 0;
  std::vector<std::vector<std::optional<double>>> cells_;
};

struct EvalRecord {
  int stage = 0;
  int task_id = 0;
  std::size_t instance_index = 0;
  bool content_correct = false;
  bool format_correct = false;

  friend bool operator==(const EvalRecord&, const EvalRecord&) = default;
};

namespace detail {

inline void require_row(const AccuracyMatrix& a, std::size_t k) {
  if (k < 1 || k > a.tasks()) {
    throw ContractError("stage " + std::to_string(k) + " outside 1.." + std::to_string(a.tasks()));
  }
  if (!a.row_complete(k)) throw ContractError("stage " + std::to_string(k) + " row is incomplete");
}

}  // namespace detail

inline double ap(const AccuracyMatrix& a, std::size_t k) {
  detail::require_row(a, k);
  double s = 0.0;
  for (std::size_t j = 1; j <= k; ++j) s += a.at(k, j);
  return s / static_cast<double>(k);
}

inline double map(const AccuracyMatrix& a, std::size_t k) {
  double s = 0.0;
  for (std::size_t i = 1; i <= k; ++i) s += ap(a, i);
  return s / static_cast<double>(k);
}

inline double bwt(const AccuracyMatrix& a, std::size_t k) {
  if (k < 2) throw UndefinedMetricError("BWT needs at least two stages, got " + std::to_string(k));
  for (std::size_t i = 1; i <= k; ++i) detail::require_row(a, i);
  double s = 0.0;
  for (std::size_t j = 1; j < k; ++j) s += a.at(k, j) - a.at(j, j);
  return s / static_cast<double>(k - 1);
}

// Mean over tasks 1..k of each task's format-correct rate at stage k, in %.
inline double mif(const std::vector<EvalRecord>& records, std::size_t k) {
  if (k == 0) throw ContractError("MIF needs k >= 1");
  std::vector<std::size_t> hits(k, 0);
  std::vector<std::size_t> total(k, 0);
  for (const auto& r : records) {
    if (r.stage != static_cast<int>(k)) continue;
    if (r.task_id < 1 || r.task_id > static_cast<int>(k)) {
      throw ContractError("record for task " + std::to_string(r.task_id) + " at stage " + std::to_string(k));
    }
    const auto j = static_cast<std::size_t>(r.task_id - 1);
    ++total[j];
    hits[j] += r.format_correct ? 1 : 0;
  }
  double s = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    if (total[j] == 0) {
      throw ContractError("task " + std::to_string(j + 1) + " has no records at stage " + std::to_string(k));
    }
    s += 100.0 * static_cast<double>(hits[j]) / static_cast<double>(total[j]);
  }
  return s / static_cast<double>(k);
}

// Highest stage that has at least one record.
inline std::size_t last_record_stage(const std::vector<EvalRecord>& records) {
  int k = 0;
  for (const auto& r : records) k = std::max(k, r.stage);
  return static_cast<std::size_t>(k);
}

struct MetricReport {
  double ap = 0.0;
  double map = 0.0;
  std::optional<double> bwt;
  std::optional<double> mif;
  std::vector<double> per_stage_ap;
};

// Metrics at the last complete stage. BWT is absent for a single stage and
// MIF is absent without records.
inline MetricReport compute_report(const AccuracyMatrix& a, const std::vector<EvalRecord>* records = nullptr) {
  const std::size_t k = a.completed_stages();
  if (k == 0) throw ContractError("accuracy matrix has no complete stage");
  MetricReport r;
  for (std::size_t i = 1; i <= k; ++i) r.per_stage_ap.push_back(ap(a, i));
  r.ap = r.per_stage_ap.back();
  r.map = map(a, k);
  if (k >= 2) r.bwt = bwt(a, k);
  if (records != nullptr) r.mif = mif(*records, k);
  return r;
}

// ---------------------------------------------------------------------------
// Formatting
// ---------------------------------------------------------------------------

// Shortest decimal text that reads back to the same double.
inline std::string format_real(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

// Two decimals, halves rounded away from zero.
inline std::string format_2dp(double v) {
  const double r = std::round(v * 100.0) / 100.0;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", r == 0.0 ? 0.0 : r);
  return buf;
}

inline nlohmann::ordered_json report_json(const MetricReport& r) {
  nlohmann::ordered_json j;
  j["ap"] = r.ap;
  j["map"] = r.map;
  if (r.bwt) j["bwt"] = *r.bwt;
  if (r.mif) j["mif"] = *r.mif;
  j["per_stage_ap"] = r.per_stage_ap;
  return j;
}

inline MetricReport report_from_json(const nlohmann::json& j) {
  MetricReport r;
  try {
    r.ap = j.at("ap").get<double>();
    r.map = j.at("map").get<double>();
    if (j.contains("bwt")) r.bwt = j.at("bwt").get<double>();
    if (j.contains("mif")) r.mif = j.at("mif").get<double>();
    r.per_stage_ap = j.at("per_stage_ap").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("metrics json: ") + e.what(), 0);
  }
  return r;
}

// ---------------------------------------------------------------------------
// AccuracyMatrix CSV
// ---------------------------------------------------------------------------

inline void write_accuracy_csv(std::ostream& os, const AccuracyMatrix& a) {
  os << "stage";
  for (std::size_t j = 1; j <= a.tasks(); ++j) os << ",task_" << j;
  os << '\n';
  for (std::size_t k = 1; k <= a.tasks(); ++k) {
    bool any = false;
    for (std::size_t j = 1; j <= k; ++j) any = any || a.get(k, j).has_value();
    if (!any) continue;
    os << k;
    for (std::size_t j = 1; j <= a.tasks(); ++j) {
      os << ',';
      if (j <= k) {
        if (const auto v = a.get(k, j)) os << format_real(*v);
      }
    }
    os << '\n';
  }
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out(1);
  for (char c : line) {
    if (c == ',') {
      out.emplace_back();
    } else if (c != '\r') {
      out.back().push_back(c);
    }
  }
  return out;
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] inline void csv_error(std::size_t line, std::size_t column, const std::string& msg) {
  throw FormatError("line " + std::to_string(line) + ", column " + std::to_string(column) + ": " + msg, line);
}

template <typename T>
T csv_number(const std::string& raw, std::size_t line, std::size_t column) {
  const std::string cell = trim(raw);
  T v{};
  const auto r = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (cell.empty() || r.ec != std::errc() || r.ptr != cell.data() + cell.size()) {
    csv_error(line, column, "'" + cell + "' is not a number");
  }
  return v;
}

// Reads the header, checks it against `expected`, and returns the data rows
// with their line numbers. Blank lines are skipped.
inline std::vector<std::pair<std::size_t, std::vector<std::string>>> read_csv_table(
    std::istream& is, const std::vector<std::string>& expected) {
  std::string line;
  if (!std::getline(is, line)) throw FormatError("line 1: empty file", 1);
  const auto header = split_csv_line(line);
  if (header.size() != expected.size()) {
    csv_error(1, 1, "expected " + std::to_string(expected.size()) + " header fields, found " +
                        std::to_string(header.size()));
  }
  for (std::size_t c = 0; c < expected.size(); ++c) {
    if (trim(header[c]) != expected[c]) csv_error(1, c + 1, "expected column '" + expected[c] + "'");
  }
  std::vector<std::pair<std::size_t, std::vector<std::string>>> rows;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto cells = split_csv_line(line);
    if (cells.size() != expected.size()) {
      csv_error(lineno, 1, "expected " + std::to_string(expected.size()) + " fields, found " +
                               std::to_string(cells.size()));
    }
    rows.emplace_back(lineno, std::move(cells));
  }
  return rows;
}

}  // namespace detail

// Reads the CSV written by write_accuracy_csv. Stage rows must appear in
// order starting at 1; row k holds k numbers followed by blanks.
inline AccuracyMatrix read_accuracy_csv(std::istream& is) {
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(is, line)) throw FormatError("line 1: empty accuracy file", 1);
  ++lineno;
  const auto header = detail::split_csv_line(line);
  if (header.size() < 2 || detail::trim(header[0]) != "stage") {
    detail::csv_error(1, 1, "header must start with 'stage' followed by task columns");
  }
  const std::size_t tasks = header.size() - 1;
  for (std::size_t j = 1; j <= tasks; ++j) {
    if (detail::trim(header[j]) != "task_" + std::to_string(j)) {
      detail::csv_error(1, j + 1, "expected column 'task_" + std::to_string(j) + "'");
    }
  }
  AccuracyMatrix a(tasks);
  std::size_t expected_stage = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != tasks + 1) {
      detail::csv_error(lineno, 1, "expected " + std::to_string(tasks + 1) + " fields, found " +
                                       std::to_string(cells.size()));
    }
    const std::string stage_text = detail::trim(cells[0]);
    std::size_t stage = 0;
    const auto sr = std::from_chars(stage_text.data(), stage_text.data() + stage_text.size(), stage);
    if (sr.ec != std::errc() || sr.ptr != stage_text.data() + stage_text.size()) {
      detail::csv_error(lineno, 1, "stage '" + stage_text + "' is not an integer");
    }
    if (stage != expected_stage) {
      detail::csv_error(lineno, 1, "expected stage " + std::to_string(expected_stage) + ", found " +
                                       std::to_string(stage));
    }
    if (stage > tasks) detail::csv_error(lineno, 1, "more stages than task columns");
    for (std::size_t j = 1; j <= tasks; ++j) {
      const std::string cell = detail::trim(cells[j]);
      if (j > stage) {
        if (!cell.empty()) detail::csv_error(lineno, j + 1, "entry above the diagonal must be blank");
        continue;
      }
      if (cell.empty()) detail::csv_error(lineno, j + 1, "missing score for task " + std::to_string(j));
      double v = 0.0;
      const auto r = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (r.ec != std::errc() || r.ptr != cell.data() + cell.size()) {
        detail::csv_error(lineno, j + 1, "'" + cell + "' is not a number");
      }
      if (!std::isfinite(v) || v < 0.0) detail::csv_error(lineno, j + 1, "score must be finite and >= 0");
      a.set(stage, j, v);
    }
    ++expected_stage;
  }
  if (expected_stage == 1) throw FormatError("accuracy file has no stage rows", lineno);
  return a;
}

inline AccuracyMatrix read_accuracy_csv_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open accuracy file '" + path + "'");
  return read_accuracy_csv(is);
}

// ---------------------------------------------------------------------------
// Evaluation records (JSON Lines)
// ---------------------------------------------------------------------------

inline void write_records(std::ostream& os, const std::vector<EvalRecord>& records) {
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["stage"] = r.stage;
    j["task_id"] = r.task_id;
    j["instance_index"] = r.instance_index;
    j["content_correct"] = r.content_correct;
    j["format_correct"] = r.format_correct;
    os << j.dump() << '\n';
  }
}

namespace detail {

inline bool record_flag(const nlohmann::json& j, const char* key, std::size_t line) {
  if (!j.contains(key)) throw FormatError("line " + std::to_string(line) + ": missing '" + key + "'", line);
  const auto& v = j.at(key);
  if (v.is_boolean()) return v.get<bool>();
  if (v.is_number_integer() && (v.get<int>() == 0 || v.get<int>() == 1)) return v.get<int>() == 1;
  throw FormatError("line " + std::to_string(line) + ": '" + key + "' must be a boolean or 0/1", line);
}

inline long long record_int(const nlohmann::json& j, const char* key, std::size_t line) {
  if (!j.contains(key) || !j.at(key).is_number_integer()) {
    throw FormatError("line " + std::to_string(line) + ": '" + key + "' must be an integer", line);
  }
  return j.at(key).get<long long>();
}

}  // namespace detail

inline std::vector<EvalRecord> read_records(std::istream& is) {
  std::vector<EvalRecord> out;
  std::string text;
  std::size_t line = 0;
  while (std::getline(is, text)) {
    ++line;
    if (detail::trim(text).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError("line " + std::to_string(line) + ": " + e.what(), line);
    }
    if (!j.is_object()) throw FormatError("line " + std::to_string(line) + ": expected an object", line);
    EvalRecord r;
    const auto stage = detail::record_int(j, "stage", line);
    const auto task = detail::record_int(j, "task_id", line);
    const auto index = detail::record_int(j, "instance_index", line);
    if (stage < 1 || task < 1 || index < 0) {
      throw FormatError("line " + std::to_string(line) + ": stage and task_id must be >= 1", line);
    }
    r.stage = static_cast<int>(stage);
    r.task_id = static_cast<int>(task);
    r.instance_index = static_cast<std::size_t>(index);
    r.content_correct = detail::record_flag(j, "content_correct", line);
    r.format_correct = detail::record_flag(j, "format_correct", line);
    out.push_back(r);
  }
  return out;
}

inline std::vector<EvalRecord> read_records_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open records file '" + path + "'");
  return read_records(is);
}

}  // namespace smolora

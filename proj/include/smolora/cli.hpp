#pragma once

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "smolora/benchmark.hpp"
#include "smolora/errors.hpp"
#include "smolora/harness.hpp"
#include "smolora/io.hpp"
#include "smolora/metrics.hpp"
#include "smolora/model.hpp"

namespace smolora::cli {

namespace fs = std::filesystem;

// Bad flag values, bad config keys, method/config disagreement.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum ExitCode : int { kOk = 0, kUsage = 1, kIo = 2, kFormat = 3, kContract = 4 };

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e) || dynamic_cast<const ArgumentError*>(&e) ||
      dynamic_cast<const ConfigError*>(&e)) {
    return kUsage;
  }
  if (dynamic_cast<const IoError*>(&e)) return kIo;
  if (dynamic_cast<const FormatError*>(&e) || dynamic_cast<const nlohmann::json::parse_error*>(&e)) return kFormat;
  return kContract;
}

inline std::size_t threads_from_env() {
  const char* v = std::getenv("SMOLORA_THREADS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) throw UsageError("SMOLORA_THREADS must be a positive integer, got '" + std::string(v) + "'");
  return static_cast<std::size_t>(n);
}

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

inline nlohmann::json cmd_generate(const StreamConfig& cfg, const std::string& out) {
  if (cfg.tasks < 2) throw UsageError("--tasks must be at least 2");
  const Stream s = generate_stream(cfg);
  write_stream_file(out, s);
  return manifest_json(s);
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json run_config_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["method"] = adapter_kind_name(c.model.kind);
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  j["routing_layer"] = c.routing_layer;
  j["learning_rate"] = c.train.learning_rate;
  j["batch_size"] = c.train.batch_size;
  j["epochs"] = c.train.epochs;
  j["hidden"] = c.model.hidden;
  j["vu_blocks"] = c.model.vu_blocks;
  j["if_blocks"] = c.model.if_blocks;
  j["rank"] = c.model.rank;
  j["top_k"] = c.model.top_k;
  return j;
}

namespace detail {

inline std::size_t count_value(const nlohmann::json& v, const std::string& key, std::size_t min) {
  if (!v.is_number_integer() || v.get<long long>() < static_cast<long long>(min)) {
    throw UsageError("config key '" + key + "' must be an integer >= " + std::to_string(min));
  }
  return v.get<std::size_t>();
}

}  // namespace detail

// Applies a flat key/value object onto `c`. Unknown keys are usage errors.
inline void apply_config(RunConfig& c, const nlohmann::json& flat, const std::string& source) {
  if (!flat.is_object()) throw UsageError(source + ": configuration must be a JSON object");
  for (const auto& [key, v] : flat.items()) {
    if (key == "method") {
      const auto kind = v.is_string() ? parse_adapter_kind(v.get<std::string>()) : std::nullopt;
      if (!kind) throw UsageError(source + ": method must be seqlora, molora or smolora");
      if (*kind != c.model.kind) {
        throw UsageError(source + ": method '" + v.get<std::string>() + "' does not match --method " +
                         std::string(adapter_kind_name(c.model.kind)));
      }
    } else if (key == "seed") {
      c.seed = detail::count_value(v, key, 0);
    } else if (key == "threads") {
      c.threads = detail::count_value(v, key, 1);
    } else if (key == "routing_layer") {
      c.routing_layer = static_cast<int>(detail::count_value(v, key, 0));
    } else if (key == "learning_rate") {
      if (!v.is_number() || !std::isfinite(v.get<double>()) || v.get<double>() <= 0.0) {
        throw UsageError(source + ": learning_rate must be a positive number");
      }
      c.train.learning_rate = v.get<double>();
    } else if (key == "batch_size") {
      c.train.batch_size = detail::count_value(v, key, 1);
    } else if (key == "epochs") {
      c.train.epochs = detail::count_value(v, key, 0);
    } else if (key == "hidden") {
      c.model.hidden = detail::count_value(v, key, 2);
    } else if (key == "vu_blocks") {
      c.model.vu_blocks = detail::count_value(v, key, 1);
    } else if (key == "if_blocks") {
      c.model.if_blocks = detail::count_value(v, key, 1);
    } else if (key == "rank") {
      c.model.rank = detail::count_value(v, key, 1);
    } else if (key == "top_k") {
      c.model.top_k = detail::count_value(v, key, 1);
    } else {
      throw UsageError(source + ": unknown configuration key '" + key + "'");
    }
  }
  if (c.routing_layer >= static_cast<int>(ToyModel::kLayers)) {
    throw UsageError("routing_layer must be below " + std::to_string(ToyModel::kLayers));
  }
  const std::size_t blocks = c.model.kind == AdapterKind::kMoLoRA ? c.model.vu_blocks + c.model.if_blocks
                                                                  : std::min(c.model.vu_blocks, c.model.if_blocks);
  if (c.model.kind != AdapterKind::kSeqLoRA && c.model.top_k > blocks) {
    throw UsageError("top_k " + std::to_string(c.model.top_k) + " exceeds the block count " + std::to_string(blocks));
  }
}

inline nlohmann::json read_config_file(const std::string& path) {
  const std::string text = read_file_bytes(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("config '" + path + "': " + e.what(), e.byte);
  }
}

struct TrainOptions {
  std::string stream_path;
  std::string method;
  std::string out_dir;
  std::optional<std::string> config_path;
  nlohmann::json overrides = nlohmann::json::object();  // flags given on the command line
  std::size_t threads = 1;
};

inline RunConfig resolve_run_config(const TrainOptions& o) {
  const auto kind = parse_adapter_kind(o.method);
  if (!kind) throw UsageError("--method must be seqlora, molora or smolora");
  RunConfig c;
  c.model.kind = *kind;
  c.threads = o.threads;
  if (o.config_path) apply_config(c, read_config_file(*o.config_path), *o.config_path);
  apply_config(c, o.overrides, "command line");
  return c;
}

struct TrainSummary {
  RunConfig config;
  MetricReport report;
  std::vector<std::string> files;
};

inline TrainSummary cmd_train(const TrainOptions& o) {
  const RunConfig cfg = resolve_run_config(o);
  const std::string started = utc_timestamp();
  const std::string stream_bytes = read_file_bytes(o.stream_path);
  std::istringstream stream_in(stream_bytes);
  const Stream stream = read_stream(stream_in);

  const RunResult r = run_cvit(cfg, stream);
  if (!r.base_weights_unchanged) throw ContractError("frozen base weights changed during training");

  const fs::path dir(o.out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());

  std::vector<std::string> files;
  auto emit = [&](const std::string& name, const auto& writer) {
    std::ostringstream os(std::ios::binary);
    writer(os);
    write_file_bytes(dir / name, os.str());
    files.push_back(name);
  };
  emit("accuracy.csv", [&](std::ostream& os) { write_accuracy_csv(os, r.content); });
  emit("accuracy.format.csv", [&](std::ostream& os) { write_accuracy_csv(os, r.format); });
  emit("records.jsonl", [&](std::ostream& os) { write_records(os, r.records); });
  emit("metrics.json", [&](std::ostream& os) { os << report_json(r.report).dump(2) << '\n'; });
  emit("checkpoint.bin", [&](std::ostream& os) { write_checkpoint(os, r.model); });
  emit("steps.csv", [&](std::ostream& os) { write_steps_csv(os, r.steps); });
  if (cfg.model.kind == AdapterKind::kSMoLoRA) {
    emit("routing.csv", [&](std::ostream& os) { write_histogram_csv(os, run_histogram(r, cfg.routing_layer)); });
    emit("fusion.csv", [&](std::ostream& os) { write_fusion_csv(os, fusion_statistics(r.traces)); });
  }

  nlohmann::ordered_json m;
  m["method"] = adapter_kind_name(cfg.model.kind);
  m["seed"] = cfg.seed;
  m["config"] = run_config_json(cfg);
  m["stream"] = {{"path", o.stream_path}, {"git_blob_sha1", git_blob_sha1(stream_bytes)}};
  m["started_at"] = started;
  m["finished_at"] = utc_timestamp();
  nlohmann::ordered_json inventory = nlohmann::ordered_json::array();
  for (const auto& name : files) {
    const std::string bytes = read_file_bytes(dir / name);
    if (bytes.empty()) throw ContractError("output file '" + name + "' is empty");
    inventory.push_back({{"name", name}, {"bytes", bytes.size()}, {"git_blob_sha1", git_blob_sha1(bytes)}});
  }
  m["files"] = inventory;
  write_file_bytes(dir / "manifest.json", m.dump(2) + "\n");
  files.push_back("manifest.json");
  return {cfg, r.report, files};
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

inline MetricReport cmd_metrics(const std::string& accuracy_path, const std::optional<std::string>& records_path) {
  const AccuracyMatrix a = read_accuracy_csv_file(accuracy_path);
  if (!records_path) return compute_report(a);
  const auto records = read_records_file(*records_path);
  return compute_report(a, &records);
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

struct RunDirectory {
  fs::path dir;
  std::string method;
  std::uint64_t seed = 0;
  MetricReport report;
  AccuracyMatrix content;
  AccuracyMatrix format;
  std::optional<RoutingHistogram> routing;
  std::optional<std::vector<FusionStats>> fusion;
  int routing_layer = 0;
};

inline std::ifstream open_input(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw IoError("cannot open '" + p.string() + "'");
  return is;
}

inline RunDirectory load_run_directory(const fs::path& dir) {
  RunDirectory r;
  r.dir = dir;
  const std::string manifest_path = (dir / "manifest.json").string();
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file_bytes(manifest_path));
    r.method = manifest.at("method").get<std::string>();
    r.seed = manifest.at("seed").get<std::uint64_t>();
    r.routing_layer = manifest.at("config").value("routing_layer", 0);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest_path + ": " + e.what(), 0);
  }
  try {
    r.report = report_from_json(nlohmann::json::parse(read_file_bytes(dir / "metrics.json")));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError((dir / "metrics.json").string() + ": " + e.what(), 0);
  }
  r.content = read_accuracy_csv_file((dir / "accuracy.csv").string());
  r.format = read_accuracy_csv_file((dir / "accuracy.format.csv").string());
  if (r.method == "smolora") {
    auto rs = open_input(dir / "routing.csv");
    r.routing = read_histogram_csv(rs);
    auto fs_in = open_input(dir / "fusion.csv");
    r.fusion = read_fusion_csv(fs_in);
  }
  return r;
}

inline std::string optional_2dp(const std::optional<double>& v) { return v ? format_2dp(*v) : "n/a"; }

// Writes stage_series.csv and summary.txt into `out_dir`; returns the summary.
inline std::string cmd_report(const std::vector<std::string>& run_dirs, const std::string& out_dir) {
  if (run_dirs.empty()) throw UsageError("report needs at least one run directory");
  std::vector<RunDirectory> runs;
  for (const auto& d : run_dirs) runs.push_back(load_run_directory(d));

  std::ostringstream series;
  series << "run,method,stage,task,content,format\n";
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& r = runs[i];
    for (std::size_t k = 1; k <= r.content.tasks(); ++k) {
      for (std::size_t j = 1; j <= k; ++j) {
        const auto c = r.content.get(k, j);
        if (!c) continue;
        const auto f = r.format.get(k, j);
        series << i + 1 << ',' << r.method << ',' << k << ',' << j << ',' << format_real(*c) << ','
               << (f ? format_real(*f) : "") << '\n';
      }
    }
  }

  std::ostringstream s;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& r = runs[i];
    s << "run " << i + 1 << ": " << r.dir.string() << " (method " << r.method << ", seed " << r.seed << ")\n";
    s << "  AP " << format_2dp(r.report.ap) << "  MAP " << format_2dp(r.report.map) << "  BWT "
      << optional_2dp(r.report.bwt) << "  MIF " << optional_2dp(r.report.mif) << '\n';
    s << "  stage AP:";
    for (double v : r.report.per_stage_ap) s << ' ' << format_2dp(v);
    s << '\n';
    if (r.routing) {
      s << "  routing frequency, layer " << r.routing_layer << ":\n";
      for (const auto& row : r.routing->rows) {
        s << "    task " << row.task << ' ' << bank_name(row.bank) << ':';
        for (double f : row.frequency) s << ' ' << std::fixed << std::setprecision(3) << f;
        s.unsetf(std::ios::floatfield);
        s << "  dominant " << dominant_block(row.frequency) << '\n';
      }
    }
    if (r.fusion) {
      s << "  fusion weights:\n";
      for (const auto& f : *r.fusion) {
        s << std::fixed << std::setprecision(4) << "    layer " << f.layer << ": alpha " << f.mean_alpha << " +- "
          << f.std_alpha << ", beta " << f.mean_beta << " +- " << f.std_beta << '\n';
        s.unsetf(std::ios::floatfield);
      }
    }
  }
  for (std::size_t i = 1; i < runs.size(); ++i) {
    const auto& a = runs[0];
    const auto& b = runs[i];
    const std::string label = "run " + std::to_string(i + 1) + " (" + b.method + ") - run 1 (" + a.method + ")";
    if (a.report.bwt && b.report.bwt) {
      s << "BWT delta " << label << ": " << format_2dp(*b.report.bwt - *a.report.bwt) << '\n';
    } else {
      s << "BWT delta " << label << ": n/a\n";
    }
    if (a.report.mif && b.report.mif) s << "MIF delta " << label << ": " << format_2dp(*b.report.mif - *a.report.mif) << '\n';
  }

  const fs::path out(out_dir);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create '" + out.string() + "': " + ec.message());
  write_file_bytes(out / "stage_series.csv", series.str());
  write_file_bytes(out / "summary.txt", s.str());
  return s.str();
}

}  // namespace smolora::cli

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "smolora/errors.hpp"
#include "smolora/matrix.hpp"
#include "smolora/random.hpp"
#include "smolora/routing.hpp"

namespace smolora {

// Answer-format families. The format head of the model predicts one of these.
enum FormatFamily : int { kFormatWord = 0, kFormatSentence = 1, kFormatLetter = 2 };
inline constexpr std::size_t kFormatCount = 3;

enum class InstructionMode { kSingle, kMulti };

inline std::string_view instruction_mode_name(InstructionMode m) {
  return m == InstructionMode::kSingle ? "single" : "multi";
}

inline InstructionMode parse_instruction_mode(std::string_view s) {
  if (s == "single") return InstructionMode::kSingle;
  if (s == "multi") return InstructionMode::kMulti;
  throw ArgumentError("instruction mode must be 'single' or 'multi', got '" + std::string(s) + "'");
}

struct TaskSpec {
  int task_id = 0;  // 1-based
  std::string name;
  std::size_t class_count = 0;
  std::vector<std::vector<double>> cluster_means;  // class_count x d_v
  double cluster_stddev = 0.0;
  std::vector<std::string> instruction_templates;
  int format_id = 0;

  friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

struct TaskInstance {
  int task_id = 0;
  std::vector<double> visual;
  std::string instruction_text;
  Matrix instruction_embedding;  // e x 1
  bool embedding_precomputed = false;  // came from the file rather than the hasher
  int answer_class = 0;
  int format_id = 0;

  friend bool operator==(const TaskInstance&, const TaskInstance&) = default;
};

struct TaskData {
  TaskSpec spec;
  std::vector<TaskInstance> train;
  std::vector<TaskInstance> test;
};

struct StreamConfig {
  std::uint64_t seed = 0;
  std::size_t tasks = 6;
  std::size_t train_per_task = 512;
  std::size_t test_per_task = 256;
  std::size_t visual_dim = 32;
  std::size_t class_count = 8;
  double cluster_stddev = 0.15;
  InstructionMode mode = InstructionMode::kSingle;
  std::size_t embedding_dim = 64;
};

struct Stream {
  StreamConfig config;
  std::vector<TaskData> tasks;

  std::size_t task_count() const { return tasks.size(); }
};

// Task profiles echoing the upstream datasets: multiple-choice science QA,
// OCR VQA, captioning, classification, scene-graph QA and open VQA. The three
// short-answer QA profiles share one template family.
struct TaskProfile {
  std::string_view name;
  int format_id;
  std::vector<std::string_view> templates;
};

inline const std::vector<TaskProfile>& task_profiles() {
  static const std::vector<std::string_view> short_answer{
      "Reply with one word or a short phrase.",
      "Give a brief answer of a word or two.",
      "Respond using a single word or a very short phrase.",
      "Keep the reply to one word or a compact phrase.",
      "State the answer as a word or short phrase only.",
  };
  static const std::vector<TaskProfile> profiles{
      {"science_qa", kFormatLetter,
       {"Reply with only the letter of the correct option.",
        "Choose among the listed options and output its letter.",
        "Output the option letter that answers the question.",
        "Which choice is right? Give just its letter.",
        "Mark the correct option by its letter alone."}},
      {"text_vqa", kFormatWord, short_answer},
      {"captioning", kFormatSentence,
       {"Describe this photo in one complete sentence.",
        "Write a single sentence that captures the scene shown.",
        "Summarize what the image shows using one full sentence.",
        "Explain the pictured scene with one clear sentence.",
        "Provide a one sentence caption for this image."}},
      {"classification", kFormatWord,
       {"Name the main object in the photo with a word or short phrase.",
        "Which object category appears here? Name it briefly.",
        "Identify the principal object; a word or two is enough.",
        "What kind of object is shown? Name it in few words.",
        "Label the dominant object using a short name."}},
      {"scene_qa", kFormatWord, short_answer},
      {"open_vqa", kFormatWord, short_answer},
  };
  return profiles;
}

inline int format_check(int predicted_format, const TaskSpec& task) {
  return predicted_format == task.format_id ? 1 : 0;
}

namespace detail {

inline std::vector<double> random_unit(Rng& rng, std::size_t dim) {
  std::vector<double> v(dim);
  double n = 0.0;
  do {
    n = 0.0;
    for (double& x : v) {
      x = rng.normal();
      n += x * x;
    }
  } while (n == 0.0);
  n = std::sqrt(n);
  for (double& x : v) x /= n;
  return v;
}

inline double distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

inline std::vector<TaskInstance> sample_split(const TaskSpec& spec, std::size_t count,
                                              std::size_t embedding_dim, Rng& rng) {
  std::vector<Matrix> embeddings;
  for (const auto& t : spec.instruction_templates) embeddings.push_back(embed_text(t, embedding_dim));
  std::vector<TaskInstance> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    TaskInstance inst;
    inst.task_id = spec.task_id;
    inst.answer_class = static_cast<int>(i % spec.class_count);
    inst.format_id = spec.format_id;
    const auto& mean = spec.cluster_means[static_cast<std::size_t>(inst.answer_class)];
    inst.visual.resize(mean.size());
    for (std::size_t j = 0; j < mean.size(); ++j)
      inst.visual[j] = mean[j] + (spec.cluster_stddev > 0.0 ? rng.normal(0.0, spec.cluster_stddev) : 0.0);
    const std::size_t t = rng.index(spec.instruction_templates.size());
    inst.instruction_text = spec.instruction_templates[t];
    inst.instruction_embedding = embeddings[t];
    out.push_back(std::move(inst));
  }
  rng.shuffle(std::span<TaskInstance>(out));
  return out;
}

}  // namespace detail

inline constexpr std::size_t kMaxRejectionDraws = 10000;
inline constexpr double kMinClusterDistance = 0.5;

// Deterministic in config.seed. Cluster means of all tasks lie on the unit
// sphere at pairwise distance >= 0.5. Classes are balanced within each split.
inline Stream generate_stream(const StreamConfig& cfg) {
  if (cfg.tasks < 2) throw ArgumentError("generate_stream: need at least 2 tasks");
  if (cfg.train_per_task == 0 || cfg.test_per_task == 0 || cfg.visual_dim == 0 ||
      cfg.class_count == 0 || cfg.embedding_dim == 0) {
    throw ArgumentError("generate_stream: all counts must be positive");
  }
  if (!(cfg.cluster_stddev >= 0.0)) throw ArgumentError("generate_stream: negative stddev");

  Rng rng(cfg.seed);
  Stream stream;
  stream.config = cfg;
  std::vector<std::vector<double>> accepted;
  const auto& profiles = task_profiles();
  for (std::size_t k = 0; k < cfg.tasks; ++k) {
    const TaskProfile& prof = profiles[k % profiles.size()];
    TaskSpec spec;
    spec.task_id = static_cast<int>(k + 1);
    spec.name = std::string(prof.name);
    if (k >= profiles.size()) spec.name += "_" + std::to_string(k / profiles.size() + 1);
    spec.class_count = cfg.class_count;
    spec.cluster_stddev = cfg.cluster_stddev;
    spec.format_id = prof.format_id;
    if (cfg.mode == InstructionMode::kSingle) {
      spec.instruction_templates.emplace_back(prof.templates.front());
    } else {
      for (auto t : prof.templates) spec.instruction_templates.emplace_back(t);
    }
    for (std::size_t c = 0; c < cfg.class_count; ++c) {
      std::size_t draws = 0;
      while (true) {
        if (++draws > kMaxRejectionDraws) {
          throw ConfigError("generate_stream: could not place " +
                            std::to_string(cfg.tasks * cfg.class_count) +
                            " cluster means at distance >= 0.5 in dimension " +
                            std::to_string(cfg.visual_dim));
        }
        auto cand = detail::random_unit(rng, cfg.visual_dim);
        bool ok = true;
        for (const auto& a : accepted) {
          if (detail::distance(a, cand) < kMinClusterDistance) {
            ok = false;
            break;
          }
        }
        if (ok) {
          accepted.push_back(cand);
          spec.cluster_means.push_back(std::move(cand));
          break;
        }
      }
    }
    stream.tasks.push_back({std::move(spec), {}, {}});
  }
  for (auto& task : stream.tasks) {
    task.train = detail::sample_split(task.spec, cfg.train_per_task, cfg.embedding_dim, rng);
    task.test = detail::sample_split(task.spec, cfg.test_per_task, cfg.embedding_dim, rng);
  }
  return stream;
}

// Nearest-cluster-mean classifier; the separability reference for a task.
inline int nearest_mean_class(const TaskSpec& spec, const std::vector<double>& visual) {
  int best = 0;
  double best_d = detail::distance(spec.cluster_means[0], visual);
  for (std::size_t c = 1; c < spec.cluster_means.size(); ++c) {
    const double d = detail::distance(spec.cluster_means[c], visual);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// JSON Lines serialization
// ---------------------------------------------------------------------------

inline nlohmann::json manifest_json(const Stream& s) {
  using nlohmann::json;
  json tasks = json::array();
  for (const auto& t : s.tasks) {
    tasks.push_back({{"task_id", t.spec.task_id},
                     {"name", t.spec.name},
                     {"format_id", t.spec.format_id},
                     {"class_count", t.spec.class_count},
                     {"cluster_stddev", t.spec.cluster_stddev},
                     {"templates", t.spec.instruction_templates},
                     {"cluster_means", t.spec.cluster_means}});
  }
  const auto& c = s.config;
  return {{"manifest",
           {{"seed", c.seed},
            {"tasks", s.tasks.size()},
            {"train_per_task", c.train_per_task},
            {"test_per_task", c.test_per_task},
            {"visual_dim", c.visual_dim},
            {"class_count", c.class_count},
            {"cluster_stddev", c.cluster_stddev},
            {"embedding_dim", c.embedding_dim},
            {"mode", instruction_mode_name(c.mode)},
            {"task_specs", tasks}}}};
}

inline nlohmann::json instance_json(const TaskInstance& inst, std::string_view split) {
  nlohmann::json j{{"task_id", inst.task_id},
                   {"split", split},
                   {"visual", inst.visual},
                   {"instruction", inst.instruction_text},
                   {"answer_class", inst.answer_class},
                   {"format_id", inst.format_id}};
  if (inst.embedding_precomputed) {
    j["embedding"] = std::vector<double>(inst.instruction_embedding.data().begin(),
                                         inst.instruction_embedding.data().end());
  }
  return j;
}

inline void write_stream(std::ostream& os, const Stream& s) {
  os << manifest_json(s).dump() << '\n';
  for (const auto& t : s.tasks) {
    for (const auto& inst : t.train) os << instance_json(inst, "train").dump() << '\n';
    for (const auto& inst : t.test) os << instance_json(inst, "test").dump() << '\n';
  }
}

inline void write_stream_file(const std::string& path, const Stream& s) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  write_stream(os, s);
  os.flush();
  if (!os) throw IoError("failed writing '" + path + "'");
}

namespace detail {

template <typename T>
T field(const nlohmann::json& j, const char* key, std::size_t line) {
  if (!j.contains(key)) throw FormatError("line " + std::to_string(line) + ": missing field '" + key + "'", line);
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw FormatError("line " + std::to_string(line) + ": field '" + key + "' has the wrong type", line);
  }
}

}  // namespace detail

// Reads a stream written by write_stream. Instances without an `embedding`
// field get the hashing embedding of their instruction; precomputed vectors
// are L2-normalized to honour the embedder contract.
inline Stream read_stream(std::istream& is) {
  using nlohmann::json;
  Stream s;
  std::string text;
  std::size_t line = 0;
  bool have_manifest = false;
  while (std::getline(is, text)) {
    ++line;
    if (text.empty()) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw FormatError("line " + std::to_string(line) + ": " + e.what(), line);
    }
    if (!have_manifest) {
      if (!j.contains("manifest")) throw FormatError("line 1: stream manifest header missing", line);
      const json& m = j["manifest"];
      auto& c = s.config;
      c.seed = detail::field<std::uint64_t>(m, "seed", line);
      c.train_per_task = detail::field<std::size_t>(m, "train_per_task", line);
      c.test_per_task = detail::field<std::size_t>(m, "test_per_task", line);
      c.visual_dim = detail::field<std::size_t>(m, "visual_dim", line);
      c.class_count = detail::field<std::size_t>(m, "class_count", line);
      c.cluster_stddev = detail::field<double>(m, "cluster_stddev", line);
      c.embedding_dim = detail::field<std::size_t>(m, "embedding_dim", line);
      try {
        c.mode = parse_instruction_mode(detail::field<std::string>(m, "mode", line));
      } catch (const ArgumentError& e) {
        throw FormatError(std::string("line 1: ") + e.what(), line);
      }
      for (const json& t : detail::field<json>(m, "task_specs", line)) {
        TaskSpec spec;
        spec.task_id = detail::field<int>(t, "task_id", line);
        spec.name = detail::field<std::string>(t, "name", line);
        spec.format_id = detail::field<int>(t, "format_id", line);
        spec.class_count = detail::field<std::size_t>(t, "class_count", line);
        spec.cluster_stddev = detail::field<double>(t, "cluster_stddev", line);
        spec.instruction_templates = detail::field<std::vector<std::string>>(t, "templates", line);
        spec.cluster_means = detail::field<std::vector<std::vector<double>>>(t, "cluster_means", line);
        if (spec.task_id != static_cast<int>(s.tasks.size()) + 1) {
          throw FormatError("line 1: task ids must be 1..T in order", line);
        }
        s.tasks.push_back({std::move(spec), {}, {}});
      }
      c.tasks = s.tasks.size();
      have_manifest = true;
      continue;
    }
    TaskInstance inst;
    inst.task_id = detail::field<int>(j, "task_id", line);
    if (inst.task_id < 1 || inst.task_id > static_cast<int>(s.tasks.size())) {
      throw FormatError("line " + std::to_string(line) + ": unknown task_id " + std::to_string(inst.task_id), line);
    }
    const auto split = detail::field<std::string>(j, "split", line);
    inst.visual = detail::field<std::vector<double>>(j, "visual", line);
    inst.instruction_text = detail::field<std::string>(j, "instruction", line);
    inst.answer_class = detail::field<int>(j, "answer_class", line);
    inst.format_id = detail::field<int>(j, "format_id", line);
    const TaskSpec& spec = s.tasks[static_cast<std::size_t>(inst.task_id - 1)].spec;
    if (inst.visual.size() != s.config.visual_dim) {
      throw FormatError("line " + std::to_string(line) + ": visual vector has length " +
                        std::to_string(inst.visual.size()), line);
    }
    if (inst.answer_class < 0 || static_cast<std::size_t>(inst.answer_class) >= spec.class_count) {
      throw FormatError("line " + std::to_string(line) + ": answer_class out of range", line);
    }
    if (inst.format_id != spec.format_id) {
      throw FormatError("line " + std::to_string(line) + ": format_id differs from its task", line);
    }
    if (j.contains("embedding")) {
      auto e = detail::field<std::vector<double>>(j, "embedding", line);
      if (e.size() != s.config.embedding_dim) {
        throw FormatError("line " + std::to_string(line) + ": embedding length " +
                          std::to_string(e.size()) + " != " + std::to_string(s.config.embedding_dim), line);
      }
      Matrix m = Matrix::column(e);
      const double n = frobenius_norm(m);
      if (n == 0.0) throw FormatError("line " + std::to_string(line) + ": zero embedding", line);
      if (std::abs(n - 1.0) > 1e-12) m *= 1.0 / n;
      inst.instruction_embedding = std::move(m);
      inst.embedding_precomputed = true;
    } else {
      try {
        inst.instruction_embedding = embed_text(inst.instruction_text, s.config.embedding_dim);
      } catch (const ArgumentError& e) {
        throw FormatError("line " + std::to_string(line) + ": " + e.what(), line);
      }
    }
    auto& task = s.tasks[static_cast<std::size_t>(inst.task_id - 1)];
    if (split == "train") {
      task.train.push_back(std::move(inst));
    } else if (split == "test") {
      task.test.push_back(std::move(inst));
    } else {
      throw FormatError("line " + std::to_string(line) + ": split must be train or test", line);
    }
  }
  if (!have_manifest) throw FormatError("empty stream file", 0);
  return s;
}

inline Stream read_stream_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open stream '" + path + "'");
  return read_stream(is);
}

}  // namespace smolora

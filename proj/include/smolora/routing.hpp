#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "smolora/errors.hpp"
#include "smolora/matrix.hpp"
#include "smolora/tape.hpp"

namespace smolora {

// ---------------------------------------------------------------------------
// Gating
// ---------------------------------------------------------------------------

// softmax(topk(logits)) per column; the result has exactly k nonzero entries
// in each column.
inline Var topk_gate(Var logits, std::size_t top_k) {
  return softmax_columns(topk_mask_columns(logits, top_k));
}

// Instance routing for a batch: x holds B instances of `seq_len` consecutive
// columns each. Each instance is routed on the mean of its own columns, so the
// gate is shared by every position of that instance. Returns M x B.
inline Var route_instance(Var router, Var x, std::size_t seq_len, std::size_t top_k) {
  if (router.cols() != x.rows()) {
    throw ShapeError("route_instance: router " + router.value().shape() +
                     " does not match input " + x.value().shape());
  }
  return topk_gate(matmul(router, group_mean_columns(x, seq_len)), top_k);
}

// Instruction routing: one gate column per instruction embedding column.
inline Var route_instruction(Var router, Var embeddings, std::size_t top_k) {
  if (router.cols() != embeddings.rows()) {
    throw ShapeError("route_instruction: router " + router.value().shape() +
                     " does not match embedding " + embeddings.value().shape());
  }
  return topk_gate(matmul(router, embeddings), top_k);
}

// Single-instance conveniences over plain matrices.
inline Matrix route_instance(const Matrix& router, const Matrix& x, std::size_t top_k) {
  Tape tape(false);
  return route_instance(tape.constant(router), tape.constant(x), x.cols(), top_k).value();
}

inline Matrix route_instruction(const Matrix& router, const Matrix& embedding, std::size_t top_k) {
  Tape tape(false);
  return route_instruction(tape.constant(router), tape.constant(embedding), top_k).value();
}

// ---------------------------------------------------------------------------
// Instruction embedding
// ---------------------------------------------------------------------------

// FNV-1a over the bytes with the seed folded into the offset basis, followed
// by the murmur3 64-bit finalizer so that the top bit is well mixed.
inline std::uint64_t stable_hash64(std::string_view bytes, std::uint64_t seed = 0) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL ^ seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  h ^= h >> 33;
  h *= 0xff51afd7ed558ccdULL;
  h ^= h >> 33;
  h *= 0xc4ceb9fe1a85ec53ULL;
  h ^= h >> 33;
  return h;
}

// Lowercased ASCII alphanumeric runs.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      tokens.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

// Signed feature hashing of the token bag, L2-normalized to an e x 1 column.
inline Matrix embed_text(std::string_view text, std::size_t dim) {
  if (dim == 0) throw ArgumentError("embed_text: dimension must be positive");
  const auto first = text.find_first_not_of(" \t\r\n\f\v");
  if (first == std::string_view::npos) throw ArgumentError("embed_text: empty instruction text");
  Matrix v(dim, 1);
  for (const std::string& tok : tokenize(text)) {
    const std::uint64_t h = stable_hash64(tok, 0);
    const double sign = (h >> 63) != 0 ? -1.0 : 1.0;
    v(h % dim, 0) += sign;
  }
  const double norm = frobenius_norm(v);
  if (norm == 0.0) {
    throw ArgumentError("embed_text: hashed features of '" + std::string(text) +
                        "' sum to the zero vector");
  }
  v *= 1.0 / norm;
  return v;
}

// Maps instruction text to a unit-norm e x 1 vector. Implementations must be
// deterministic.
class InstructionEmbedder {
 public:
  virtual ~InstructionEmbedder() = default;
  virtual std::size_t dimension() const = 0;
  virtual Matrix embed(std::string_view text) const = 0;
};

class HashingEmbedder final : public InstructionEmbedder {
 public:
  explicit HashingEmbedder(std::size_t dim) : dim_(dim) {
    if (dim == 0) throw ArgumentError("HashingEmbedder: dimension must be positive");
  }
  std::size_t dimension() const override { return dim_; }
  Matrix embed(std::string_view text) const override { return embed_text(text, dim_); }

 private:
  std::size_t dim_;
};

// ---------------------------------------------------------------------------
// Routing analytics
// ---------------------------------------------------------------------------

struct GateEntry {
  std::size_t block = 0;
  double weight = 0.0;

  friend bool operator==(const GateEntry&, const GateEntry&) = default;
};

// Routing decision of one SMoLoRA layer for one instance.
struct RoutingTrace {
  int layer_id = 0;
  std::vector<GateEntry> vu_selected;
  std::vector<GateEntry> if_selected;
  double alpha_mean = 0.5;
  double beta_mean = 0.5;

  friend bool operator==(const RoutingTrace&, const RoutingTrace&) = default;
};

enum class Bank { kVisual, kInstruction };

inline std::string_view bank_name(Bank b) { return b == Bank::kVisual ? "vu" : "if"; }

struct HistogramRow {
  int task = 0;
  Bank bank = Bank::kVisual;
  std::vector<double> frequency;  // sums to 1
};

struct RoutingHistogram {
  std::vector<HistogramRow> rows;

  const HistogramRow* find(int task, Bank bank) const {
    for (const auto& r : rows)
      if (r.task == task && r.bank == bank) return &r;
    return nullptr;
  }
};

// Gate-weighted block usage per task and bank. When `layer` is set, only
// traces of that layer contribute.
inline RoutingHistogram routing_histogram(const std::map<int, std::vector<RoutingTrace>>& by_task,
                                          std::size_t vu_blocks, std::size_t if_blocks,
                                          std::optional<int> layer = std::nullopt) {
  if (by_task.empty()) throw ArgumentError("routing_histogram: no traces");
  RoutingHistogram out;
  for (const auto& [task, traces] : by_task) {
    std::vector<double> vu(vu_blocks, 0.0);
    std::vector<double> iff(if_blocks, 0.0);
    std::size_t used = 0;
    for (const RoutingTrace& t : traces) {
      if (layer && t.layer_id != *layer) continue;
      ++used;
      for (const GateEntry& g : t.vu_selected) {
        if (g.block >= vu_blocks) throw ArgumentError("routing_histogram: VU block out of range");
        vu[g.block] += g.weight;
      }
      for (const GateEntry& g : t.if_selected) {
        if (g.block >= if_blocks) throw ArgumentError("routing_histogram: IF block out of range");
        iff[g.block] += g.weight;
      }
    }
    if (used == 0) {
      throw ArgumentError("routing_histogram: task " + std::to_string(task) +
                          " has no traces for the requested layer");
    }
    for (auto* freq : {&vu, &iff}) {
      double total = 0.0;
      for (double f : *freq) total += f;
      for (double& f : *freq) f /= total;
    }
    out.rows.push_back({task, Bank::kVisual, std::move(vu)});
    out.rows.push_back({task, Bank::kInstruction, std::move(iff)});
  }
  return out;
}

// Header `task,bank,block_0..block_{n-1}`; n is the larger bank, the smaller
// bank is padded with zeros.
inline void write_histogram_csv(std::ostream& os, const RoutingHistogram& h) {
  std::size_t width = 0;
  for (const auto& r : h.rows) width = std::max(width, r.frequency.size());
  os << "task,bank";
  for (std::size_t i = 0; i < width; ++i) os << ",block_" << i;
  os << '\n';
  os.precision(17);
  for (const auto& r : h.rows) {
    os << r.task << ',' << bank_name(r.bank);
    for (std::size_t i = 0; i < width; ++i) os << ',' << (i < r.frequency.size() ? r.frequency[i] : 0.0);
    os << '\n';
  }
}

// Shannon entropy in nats.
inline double entropy(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

inline std::size_t dominant_block(const std::vector<double>& p) {
  return static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
}

}  // namespace smolora

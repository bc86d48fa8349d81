#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "smolora/errors.hpp"
#include "smolora/matrix.hpp"
#include "smolora/random.hpp"
#include "smolora/routing.hpp"
#include "smolora/tape.hpp"

namespace smolora {

// Low-rank update scale * B A with A: r x d and B: k x r.
struct LoRABlock {
  Parameter a;
  Parameter b;
  std::size_t rank = 0;
  double scale = 1.0;

  std::size_t in_dim() const { return a.value().cols(); }
  std::size_t out_dim() const { return b.value().rows(); }
};

// Largest rank satisfying r <= min(d, k) / 2, capped at `requested`.
inline std::size_t admissible_rank(std::size_t requested, std::size_t d, std::size_t k) {
  const std::size_t cap = std::max<std::size_t>(1, std::min(d, k) / 2);
  return std::min(requested, cap);
}

// A ~ N(0, 1/d), B = 0, so a fresh block contributes exactly nothing.
inline LoRABlock make_lora_block(const std::string& prefix, std::size_t d, std::size_t k,
                                 std::size_t r, Rng& rng, double scale = 1.0) {
  if (d == 0 || k == 0 || r == 0) throw ArgumentError("LoRA block dimensions must be positive");
  if (2 * r > std::min(d, k)) {
    throw ArgumentError("LoRA rank " + std::to_string(r) + " too large for " + std::to_string(k) +
                        "x" + std::to_string(d) + " (need r <= min(d,k)/2)");
  }
  if (!(scale > 0.0)) throw ArgumentError("LoRA scale must be positive");
  LoRABlock blk;
  blk.a = Parameter(prefix + ".A", rng.gaussian(r, d, 1.0 / static_cast<double>(d)));
  blk.b = Parameter(prefix + ".B", Matrix(k, r));
  blk.rank = r;
  blk.scale = scale;
  return blk;
}

inline Var lora_apply(Tape& tape, const LoRABlock& blk, Var x) {
  if (x.rows() != blk.in_dim()) {
    throw ShapeError("lora_apply: block expects " + std::to_string(blk.in_dim()) +
                     " input rows, got " + x.value().shape());
  }
  Var out = matmul(tape.param(blk.b), matmul(tape.param(blk.a), x));
  return blk.scale == 1.0 ? out : scale(out, blk.scale);
}

inline Matrix lora_apply(const LoRABlock& blk, const Matrix& x) {
  Tape tape(false);
  return lora_apply(tape, blk, tape.constant(x)).value();
}

enum class AdapterKind { kSeqLoRA, kMoLoRA, kSMoLoRA };

inline std::string_view adapter_kind_name(AdapterKind k) {
  switch (k) {
    case AdapterKind::kSeqLoRA: return "seqlora";
    case AdapterKind::kMoLoRA: return "molora";
    case AdapterKind::kSMoLoRA: return "smolora";
  }
  return "?";
}

inline std::optional<AdapterKind> parse_adapter_kind(std::string_view s) {
  if (s == "seqlora") return AdapterKind::kSeqLoRA;
  if (s == "molora") return AdapterKind::kMoLoRA;
  if (s == "smolora") return AdapterKind::kSMoLoRA;
  return std::nullopt;
}

// Per-call inputs shared by every adapted layer of a model.
struct LayerContext {
  std::size_t seq_len = 1;
  std::optional<Var> instruction;          // e x B, required by SMoLoRA
  std::vector<RoutingTrace>* traces = nullptr;  // SMoLoRA appends B traces when set
};

// Frozen linear map W0 (k x d) plus a trainable adapter.
class AdaptedLinear {
 public:
  virtual ~AdaptedLinear() = default;

  virtual AdapterKind kind() const = 0;

  // x is d x (B * seq_len); returns k x (B * seq_len).
  virtual Var forward(Tape& tape, Var x, const LayerContext& ctx) const = 0;

  // Every parameter, frozen base first.
  virtual std::vector<Parameter*> parameters() = 0;

  std::vector<const Parameter*> parameters() const {
    auto ps = const_cast<AdaptedLinear*>(this)->parameters();
    return {ps.begin(), ps.end()};
  }

  const Parameter& base() const { return w0_; }
  std::size_t in_dim() const { return w0_.value().cols(); }
  std::size_t out_dim() const { return w0_.value().rows(); }

 protected:
  explicit AdaptedLinear(Parameter w0) : w0_(std::move(w0)) { w0_.set_trainable(false); }

  Var base_forward(Tape& tape, Var x) const {
    if (x.rows() != in_dim()) {
      throw ShapeError("adapted linear: expects " + std::to_string(in_dim()) +
                       " input rows, got " + x.value().shape());
    }
    return matmul(tape.param(w0_), x);
  }

  Parameter w0_;
};

// W0 x + B A x: a single shared adapter.
class LoRALayer final : public AdaptedLinear {
 public:
  LoRALayer(Parameter w0, LoRABlock block) : AdaptedLinear(std::move(w0)), block_(std::move(block)) {}

  AdapterKind kind() const override { return AdapterKind::kSeqLoRA; }

  Var forward(Tape& tape, Var x, const LayerContext&) const override {
    return base_forward(tape, x) + lora_apply(tape, block_, x);
  }

  std::vector<Parameter*> parameters() override { return {&w0_, &block_.a, &block_.b}; }

  const LoRABlock& block() const { return block_; }
  LoRABlock& block() { return block_; }

 private:
  LoRABlock block_;
};

// Token-wise mixture: each column picks its own top-k blocks.
class MoLoRALayer final : public AdaptedLinear {
 public:
  MoLoRALayer(Parameter w0, std::vector<LoRABlock> blocks, Parameter router, std::size_t top_k)
      : AdaptedLinear(std::move(w0)), blocks_(std::move(blocks)), router_(std::move(router)),
        top_k_(top_k) {
    if (blocks_.empty()) throw ArgumentError("MoLoRA needs at least one block");
    if (top_k_ == 0 || top_k_ > blocks_.size()) throw ArgumentError("MoLoRA top_k out of range");
    if (router_.value().rows() != blocks_.size() || router_.value().cols() != in_dim()) {
      throw ShapeError("MoLoRA router must be N x d, got " + router_.value().shape());
    }
  }

  AdapterKind kind() const override { return AdapterKind::kMoLoRA; }

  Var forward(Tape& tape, Var x, const LayerContext&) const override {
    Var y = base_forward(tape, x);
    Var gates = topk_gate(matmul(tape.param(router_), x), top_k_);
    Var delta = mixture(tape, gates, blocks_, x);
    return y + delta;
  }

  std::vector<Parameter*> parameters() override {
    std::vector<Parameter*> ps{&w0_, &router_};
    for (auto& b : blocks_) {
      ps.push_back(&b.a);
      ps.push_back(&b.b);
    }
    return ps;
  }

  const std::vector<LoRABlock>& blocks() const { return blocks_; }
  std::vector<LoRABlock>& blocks() { return blocks_; }
  const Parameter& router() const { return router_; }
  Parameter& router() { return router_; }
  std::size_t top_k() const { return top_k_; }

  // sum_i gates[i, :] o block_i(x). gates is N x S with one column per column
  // of x. Blocks no column selected are skipped; their contribution and
  // gradient are zero either way.
  static Var mixture(Tape& tape, Var gates, const std::vector<LoRABlock>& blocks, Var x) {
    std::optional<Var> acc;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      tape.param(blocks[i].a);
      tape.param(blocks[i].b);
      const auto g = gates.value().row(i);
      if (std::all_of(g.begin(), g.end(), [](double v) { return v == 0.0; })) continue;
      Var term = mul_rowwise(row(gates, i), lora_apply(tape, blocks[i], x));
      acc = acc ? *acc + term : term;
    }
    // Every column selects k >= 1 blocks, so acc is always set.
    return *acc;
  }

 private:
  std::vector<LoRABlock> blocks_;
  Parameter router_;
  std::size_t top_k_;
};

struct FusionVars {
  Var y;
  Var alpha;  // 1 x S
  Var beta;   // 1 x S
};

// Per column t: (alpha_t, beta_t) = softmax(I_vu x_vu[:,t], I_if x_if[:,t]),
// y[:,t] = alpha_t x_vu[:,t] + beta_t x_if[:,t].
inline FusionVars adaptive_fusion(Var x_vu, Var x_if, Var imp_vu, Var imp_if) {
  if (!x_vu.value().same_shape(x_if.value())) {
    throw ShapeError("adaptive_fusion: module outputs " + x_vu.value().shape() + " and " +
                     x_if.value().shape() + " differ");
  }
  if (imp_vu.rows() != 1 || imp_vu.cols() != x_vu.rows() || imp_if.rows() != 1 ||
      imp_if.cols() != x_if.rows()) {
    throw ShapeError("adaptive_fusion: importance matrices must be 1 x " +
                     std::to_string(x_vu.rows()));
  }
  Var scores = concat_rows(matmul(imp_vu, x_vu), matmul(imp_if, x_if));
  Var weights = softmax_columns(scores);
  Var alpha = row(weights, 0);
  Var beta = row(weights, 1);
  Var y = mul_rowwise(alpha, x_vu) + mul_rowwise(beta, x_if);
  return {y, alpha, beta};
}

struct FusionResult {
  Matrix y;
  Matrix alpha;
  Matrix beta;
};

inline FusionResult adaptive_fusion(const Matrix& x_vu, const Matrix& x_if, const Matrix& imp_vu,
                                    const Matrix& imp_if) {
  Tape tape(false);
  auto f = adaptive_fusion(tape.constant(x_vu), tape.constant(x_if), tape.constant(imp_vu),
                           tape.constant(imp_if));
  return {f.y.value(), f.alpha.value(), f.beta.value()};
}

// Two banks of LoRA blocks: a visual-understanding bank routed on the
// instance-averaged input and an instruction-following bank routed on the
// instruction embedding, fused per position by trainable importance vectors.
class SMoLoRALayer final : public AdaptedLinear {
 public:
  SMoLoRALayer(Parameter w0, std::vector<LoRABlock> vu_blocks, std::vector<LoRABlock> if_blocks,
               Parameter router_vu, Parameter router_if, Parameter importance_vu,
               Parameter importance_if, std::size_t top_k, int layer_id = 0)
      : AdaptedLinear(std::move(w0)), vu_blocks_(std::move(vu_blocks)),
        if_blocks_(std::move(if_blocks)), router_vu_(std::move(router_vu)),
        router_if_(std::move(router_if)), importance_vu_(std::move(importance_vu)),
        importance_if_(std::move(importance_if)), top_k_(top_k), layer_id_(layer_id) {
    if (vu_blocks_.empty() || if_blocks_.empty()) {
      throw ArgumentError("SMoLoRA needs at least one block in each bank");
    }
    if (top_k_ == 0 || top_k_ > std::min(vu_blocks_.size(), if_blocks_.size())) {
      throw ArgumentError("SMoLoRA top_k must lie in [1, min(M, N-M)]");
    }
    if (router_vu_.value().rows() != vu_blocks_.size() || router_vu_.value().cols() != in_dim()) {
      throw ShapeError("SMoLoRA VU router must be M x d, got " + router_vu_.value().shape());
    }
    if (router_if_.value().rows() != if_blocks_.size()) {
      throw ShapeError("SMoLoRA IF router must be (N-M) x e, got " + router_if_.value().shape());
    }
    for (const Parameter* imp : {&importance_vu_, &importance_if_}) {
      if (imp->value().rows() != 1 || imp->value().cols() != out_dim()) {
        throw ShapeError("SMoLoRA importance matrix must be 1 x k, got " + imp->value().shape());
      }
    }
  }

  AdapterKind kind() const override { return AdapterKind::kSMoLoRA; }

  struct Parts {
    Var y;       // W0 x + fused
    Var fused;   // adapter contribution
    Var vu_gates;  // M x B
    Var if_gates;  // (N-M) x B
    Var alpha;   // 1 x S
    Var beta;    // 1 x S
  };

  Parts forward_parts(Tape& tape, Var x, const LayerContext& ctx) const {
    if (!ctx.instruction) throw ContractError("SMoLoRA forward needs instruction embeddings");
    Var emb = *ctx.instruction;
    const std::size_t s = ctx.seq_len;
    if (s == 0 || x.cols() % s != 0) {
      throw ShapeError("SMoLoRA: " + std::to_string(x.cols()) +
                       " columns are not a whole number of instances of length " +
                       std::to_string(s));
    }
    const std::size_t batch = x.cols() / s;
    if (emb.rows() != embedding_dim() || emb.cols() != batch) {
      throw ShapeError("SMoLoRA: instruction embedding " + emb.value().shape() + " for " +
                       std::to_string(batch) + " instances, expected e=" +
                       std::to_string(embedding_dim()));
    }
    Var y0 = base_forward(tape, x);

    Var vu_gates = route_instance(tape.param(router_vu_), x, s, top_k_);
    Var if_gates = route_instruction(tape.param(router_if_), emb, top_k_);

    Var x_vu = MoLoRALayer::mixture(tape, repeat_columns(vu_gates, s), vu_blocks_, x);
    Var x_if = MoLoRALayer::mixture(tape, repeat_columns(if_gates, s), if_blocks_, x);

    FusionVars f =
        adaptive_fusion(x_vu, x_if, tape.param(importance_vu_), tape.param(importance_if_));

    if (ctx.traces != nullptr) append_traces(*ctx.traces, vu_gates.value(), if_gates.value(),
                                             f.alpha.value(), f.beta.value(), s);
    return {y0 + f.y, f.y, vu_gates, if_gates, f.alpha, f.beta};
  }

  Var forward(Tape& tape, Var x, const LayerContext& ctx) const override {
    return forward_parts(tape, x, ctx).y;
  }

  std::vector<Parameter*> parameters() override {
    std::vector<Parameter*> ps{&w0_, &router_vu_, &router_if_, &importance_vu_, &importance_if_};
    for (auto* bank : {&vu_blocks_, &if_blocks_}) {
      for (auto& b : *bank) {
        ps.push_back(&b.a);
        ps.push_back(&b.b);
      }
    }
    return ps;
  }

  std::size_t embedding_dim() const { return router_if_.value().cols(); }
  std::size_t top_k() const { return top_k_; }
  int layer_id() const { return layer_id_; }

  const std::vector<LoRABlock>& vu_blocks() const { return vu_blocks_; }
  const std::vector<LoRABlock>& if_blocks() const { return if_blocks_; }
  std::vector<LoRABlock>& vu_blocks() { return vu_blocks_; }
  std::vector<LoRABlock>& if_blocks() { return if_blocks_; }
  const Parameter& router_vu() const { return router_vu_; }
  const Parameter& router_if() const { return router_if_; }
  const Parameter& importance_vu() const { return importance_vu_; }
  const Parameter& importance_if() const { return importance_if_; }
  Parameter& router_vu() { return router_vu_; }
  Parameter& router_if() { return router_if_; }
  Parameter& importance_vu() { return importance_vu_; }
  Parameter& importance_if() { return importance_if_; }

 private:
  void append_traces(std::vector<RoutingTrace>& out, const Matrix& vu, const Matrix& iff,
                     const Matrix& alpha, const Matrix& beta, std::size_t s) const {
    for (std::size_t b = 0; b < vu.cols(); ++b) {
      RoutingTrace t;
      t.layer_id = layer_id_;
      for (std::size_t i = 0; i < vu.rows(); ++i)
        if (vu(i, b) > 0.0) t.vu_selected.push_back({i, vu(i, b)});
      for (std::size_t i = 0; i < iff.rows(); ++i)
        if (iff(i, b) > 0.0) t.if_selected.push_back({i, iff(i, b)});
      double a = 0.0;
      double be = 0.0;
      for (std::size_t j = 0; j < s; ++j) {
        a += alpha(0, b * s + j);
        be += beta(0, b * s + j);
      }
      t.alpha_mean = a / static_cast<double>(s);
      t.beta_mean = be / static_cast<double>(s);
      out.push_back(std::move(t));
    }
  }

  std::vector<LoRABlock> vu_blocks_;
  std::vector<LoRABlock> if_blocks_;
  Parameter router_vu_;
  Parameter router_if_;
  Parameter importance_vu_;
  Parameter importance_if_;
  std::size_t top_k_;
  int layer_id_;
};

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

struct SMoLoRAShape {
  std::size_t vu_blocks = 4;
  std::size_t if_blocks = 4;
  std::size_t rank = 16;
  std::size_t embedding_dim = 64;
  std::size_t top_k = 1;
};

inline Parameter make_base(const std::string& prefix, std::size_t d, std::size_t k, Rng& rng) {
  return Parameter(prefix + ".W0", rng.gaussian(k, d, 1.0 / static_cast<double>(d)), false);
}

inline LoRALayer make_lora_layer(const std::string& prefix, std::size_t d, std::size_t k,
                                 std::size_t r, std::uint64_t seed) {
  Rng rng(seed);
  Parameter w0 = make_base(prefix, d, k, rng);
  return LoRALayer(std::move(w0), make_lora_block(prefix + ".lora", d, k, r, rng));
}

inline MoLoRALayer make_molora_layer(const std::string& prefix, std::size_t d, std::size_t k,
                                     std::size_t blocks, std::size_t r, std::size_t top_k,
                                     std::uint64_t seed) {
  if (blocks == 0) throw ArgumentError("MoLoRA needs at least one block");
  Rng rng(seed);
  Parameter w0 = make_base(prefix, d, k, rng);
  std::vector<LoRABlock> bs;
  for (std::size_t i = 0; i < blocks; ++i)
    bs.push_back(make_lora_block(prefix + ".block" + std::to_string(i), d, k, r, rng));
  Parameter router(prefix + ".router", rng.gaussian(blocks, d, 1.0 / static_cast<double>(d)));
  return MoLoRALayer(std::move(w0), std::move(bs), std::move(router), top_k);
}

// Routers ~ N(0, 1/fan_in), importance vectors ~ N(0, 0.02), A ~ N(0, 1/d),
// B = 0. Deterministic in `seed`.
inline SMoLoRALayer make_smolora_layer(const std::string& prefix, std::size_t d, std::size_t k,
                                       const SMoLoRAShape& shape, std::uint64_t seed,
                                       int layer_id = 0) {
  if (d == 0 || k == 0 || shape.vu_blocks == 0 || shape.if_blocks == 0 || shape.rank == 0 ||
      shape.embedding_dim == 0 || shape.top_k == 0) {
    throw ArgumentError("SMoLoRA dimensions must be positive");
  }
  if (shape.top_k > std::min(shape.vu_blocks, shape.if_blocks)) {
    throw ArgumentError("SMoLoRA top_k exceeds bank size");
  }
  Rng rng(seed);
  Parameter w0 = make_base(prefix, d, k, rng);
  std::vector<LoRABlock> vu;
  std::vector<LoRABlock> iff;
  for (std::size_t i = 0; i < shape.vu_blocks; ++i)
    vu.push_back(make_lora_block(prefix + ".vu" + std::to_string(i), d, k, shape.rank, rng));
  for (std::size_t i = 0; i < shape.if_blocks; ++i)
    iff.push_back(make_lora_block(prefix + ".if" + std::to_string(i), d, k, shape.rank, rng));
  Parameter r_vu(prefix + ".R_vu",
                 rng.gaussian(shape.vu_blocks, d, 1.0 / static_cast<double>(d)));
  Parameter r_if(prefix + ".R_if", rng.gaussian(shape.if_blocks, shape.embedding_dim,
                                                1.0 / static_cast<double>(shape.embedding_dim)));
  Parameter i_vu(prefix + ".I_vu", rng.gaussian(1, k, 0.02));
  Parameter i_if(prefix + ".I_if", rng.gaussian(1, k, 0.02));
  return SMoLoRALayer(std::move(w0), std::move(vu), std::move(iff), std::move(r_vu),
                      std::move(r_if), std::move(i_vu), std::move(i_if), shape.top_k, layer_id);
}

inline SMoLoRALayer init_smolora(std::size_t d, std::size_t k_out, std::size_t m,
                                 std::size_t n_minus_m, std::size_t r, std::size_t e,
                                 std::size_t top_k, std::uint64_t seed) {
  return make_smolora_layer("smolora", d, k_out, SMoLoRAShape{m, n_minus_m, r, e, top_k}, seed);
}

// ---------------------------------------------------------------------------
// Single-instance evaluation over plain matrices
// ---------------------------------------------------------------------------

inline Matrix molora_forward(const MoLoRALayer& layer, const Matrix& x) {
  Tape tape(false);
  return layer.forward(tape, tape.constant(x), LayerContext{}).value();
}

struct SMoLoRAResult {
  Matrix y;
  Matrix fused;
  RoutingTrace trace;
};

// x is d x s for one instance; instr_emb is e x 1.
inline SMoLoRAResult smolora_forward(const SMoLoRALayer& layer, const Matrix& x,
                                     const Matrix& instr_emb) {
  Tape tape(false);
  std::vector<RoutingTrace> traces;
  LayerContext ctx{x.cols(), tape.constant(instr_emb), &traces};
  auto parts = layer.forward_parts(tape, tape.constant(x), ctx);
  return {parts.y.value(), parts.fused.value(), std::move(traces.front())};
}

}  // namespace smolora

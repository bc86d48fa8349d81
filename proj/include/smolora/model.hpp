#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <memory>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "smolora/benchmark.hpp"
#include "smolora/errors.hpp"
#include "smolora/lora.hpp"
#include "smolora/random.hpp"
#include "smolora/tape.hpp"

namespace smolora {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

struct ModelConfig {
  AdapterKind kind = AdapterKind::kSMoLoRA;
  std::size_t visual_dim = 32;
  std::size_t embedding_dim = 64;
  std::size_t hidden = 64;
  std::size_t class_count = 8;
  std::size_t format_count = kFormatCount;
  std::size_t vu_blocks = 4;
  std::size_t if_blocks = 4;
  std::size_t rank = 16;
  std::size_t top_k = 1;
  std::uint64_t seed = 0;
};

struct ModelOutput {
  Var content;  // class_count x B
  Var format;   // format_count x B
};

// Two-position input (visual vector, projected instruction embedding), two
// adapted hidden layers with ReLU, and adapted content and format heads whose
// per-position logits are averaged over the instance.
class ToyModel {
 public:
  static constexpr std::size_t kSeqLen = 2;
  static constexpr std::size_t kLayers = 4;

  explicit ToyModel(const ModelConfig& cfg) : cfg_(cfg) {
    if (cfg.visual_dim == 0 || cfg.embedding_dim == 0 || cfg.hidden == 0 || cfg.class_count == 0 ||
        cfg.format_count == 0 || cfg.rank == 0 || cfg.top_k == 0) {
      throw ArgumentError("model dimensions must be positive");
    }
    Rng rng(derive_seed(cfg.seed, 0x70726f6aULL));
    projection_ = std::make_unique<Parameter>(
        "input.P", rng.gaussian(cfg.visual_dim, cfg.embedding_dim, 1.0 / static_cast<double>(cfg.visual_dim)),
        false);
    const std::size_t dims[kLayers][2] = {{cfg.visual_dim, cfg.hidden},
                                          {cfg.hidden, cfg.hidden},
                                          {cfg.hidden, cfg.class_count},
                                          {cfg.hidden, cfg.format_count}};
    const char* names[kLayers] = {"input", "hidden", "content", "format"};
    for (std::size_t l = 0; l < kLayers; ++l) {
      const auto [d, k] = dims[l];
      const std::size_t r = admissible_rank(cfg.rank, d, k);
      const std::uint64_t seed = derive_seed(cfg.seed, l + 1);
      const std::string prefix = names[l];
      switch (cfg.kind) {
        case AdapterKind::kSeqLoRA:
          layers_.push_back(std::make_unique<LoRALayer>(make_lora_layer(prefix, d, k, r, seed)));
          break;
        case AdapterKind::kMoLoRA:
          layers_.push_back(std::make_unique<MoLoRALayer>(
              make_molora_layer(prefix, d, k, cfg.vu_blocks + cfg.if_blocks, r, cfg.top_k, seed)));
          break;
        case AdapterKind::kSMoLoRA:
          layers_.push_back(std::make_unique<SMoLoRALayer>(make_smolora_layer(
              prefix, d, k, SMoLoRAShape{cfg.vu_blocks, cfg.if_blocks, r, cfg.embedding_dim, cfg.top_k},
              seed, static_cast<int>(l))));
          break;
      }
    }
  }

  ToyModel(const ToyModel&) = delete;
  ToyModel& operator=(const ToyModel&) = delete;
  ToyModel(ToyModel&&) = default;
  ToyModel& operator=(ToyModel&&) = default;

  const ModelConfig& config() const { return cfg_; }
  AdapterKind kind() const { return cfg_.kind; }
  const AdaptedLinear& layer(std::size_t i) const { return *layers_.at(i); }
  AdaptedLinear& layer(std::size_t i) { return *layers_.at(i); }

  // Every parameter, frozen ones included, in a fixed order.
  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out{projection_.get()};
    for (auto& l : layers_)
      for (Parameter* p : l->parameters()) out.push_back(p);
    return out;
  }

  std::vector<const Parameter*> parameters() const {
    std::vector<const Parameter*> out;
    for (Parameter* p : const_cast<ToyModel*>(this)->parameters()) out.push_back(p);
    return out;
  }

  std::vector<Parameter*> trainable_parameters() {
    std::vector<Parameter*> out;
    for (Parameter* p : parameters())
      if (p->trainable()) out.push_back(p);
    return out;
  }

  // Input sequence of a batch: d x (2B), positions (visual, P * embedding).
  Matrix encode_inputs(std::span<const TaskInstance* const> batch) const {
    const std::size_t d = cfg_.visual_dim;
    Matrix x(d, kSeqLen * batch.size());
    const Matrix& p = projection_->value();
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const TaskInstance& inst = *batch[b];
      if (inst.visual.size() != d) {
        throw ContractError("instance visual length " + std::to_string(inst.visual.size()) +
                            " does not match model d=" + std::to_string(d));
      }
      if (inst.instruction_embedding.rows() != cfg_.embedding_dim || inst.instruction_embedding.cols() != 1) {
        throw ContractError("instance embedding " + inst.instruction_embedding.shape() +
                            " does not match model e=" + std::to_string(cfg_.embedding_dim));
      }
      for (std::size_t i = 0; i < d; ++i) {
        x(i, kSeqLen * b) = inst.visual[i];
        double acc = 0.0;
        for (std::size_t j = 0; j < cfg_.embedding_dim; ++j) acc += p(i, j) * inst.instruction_embedding(j, 0);
        x(i, kSeqLen * b + 1) = acc;
      }
    }
    return x;
  }

  Matrix encode_instructions(std::span<const TaskInstance* const> batch) const {
    Matrix e(cfg_.embedding_dim, batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b)
      for (std::size_t j = 0; j < cfg_.embedding_dim; ++j) e(j, b) = batch[b]->instruction_embedding(j, 0);
    return e;
  }

  ModelOutput forward(Tape& tape, std::span<const TaskInstance* const> batch,
                      std::vector<RoutingTrace>* traces = nullptr) const {
    if (batch.empty()) throw ArgumentError("forward: empty batch");
    Var x = tape.constant(encode_inputs(batch));
    LayerContext ctx{kSeqLen, std::nullopt, traces};
    if (cfg_.kind == AdapterKind::kSMoLoRA) ctx.instruction = tape.constant(encode_instructions(batch));
    Var h1 = relu(layers_[0]->forward(tape, x, ctx));
    Var h2 = relu(layers_[1]->forward(tape, h1, ctx));
    Var content = layers_[2]->forward(tape, h2, ctx);
    Var format = layers_[3]->forward(tape, h2, ctx);
    return {group_mean_columns(content, kSeqLen), group_mean_columns(format, kSeqLen)};
  }

 private:
  ModelConfig cfg_;
  std::unique_ptr<Parameter> projection_;
  std::vector<std::unique_ptr<AdaptedLinear>> layers_;
};

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[5] = {'S', 'M', 'O', 'L', '1'};

struct NamedMatrix {
  std::string name;
  Matrix value;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  os.write(b, 4);
}

inline void put_f64(std::ostream& os, double v) {
  char b[8];
  std::memcpy(b, &v, 8);
  os.write(b, 8);
}

class ByteReader {
 public:
  explicit ByteReader(std::istream& is) : is_(is) {}

  bool at_end() { return is_.peek() == std::char_traits<char>::eof(); }
  std::size_t offset() const { return offset_; }

  void read(char* out, std::size_t n, const char* what) {
    is_.read(out, static_cast<std::streamsize>(n));
    const auto got = static_cast<std::size_t>(is_.gcount());
    if (got != n) {
      throw FormatError("checkpoint truncated while reading " + std::string(what) + " at byte " +
                            std::to_string(offset_ + got),
                        offset_ + got);
    }
    offset_ += n;
  }

  std::uint32_t u32(const char* what) {
    char b[4];
    read(b, 4, what);
    std::uint32_t v;
    std::memcpy(&v, b, 4);
    return v;
  }

  double f64(const char* what) {
    char b[8];
    read(b, 8, what);
    double v;
    std::memcpy(&v, b, 8);
    return v;
  }

 private:
  std::istream& is_;
  std::size_t offset_ = 0;
};

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const ToyModel& model) {
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  for (const Parameter* p : model.parameters()) {
    detail::put_u32(os, static_cast<std::uint32_t>(p->name().size()));
    os.write(p->name().data(), static_cast<std::streamsize>(p->name().size()));
    detail::put_u32(os, static_cast<std::uint32_t>(p->value().rows()));
    detail::put_u32(os, static_cast<std::uint32_t>(p->value().cols()));
    for (double v : p->value().data()) detail::put_f64(os, v);
  }
}

inline void save_checkpoint(const ToyModel& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open checkpoint '" + path + "' for writing");
  write_checkpoint(os, model);
  os.flush();
  if (!os) throw IoError("failed writing checkpoint '" + path + "'");
}

inline std::vector<NamedMatrix> read_checkpoint(std::istream& is) {
  detail::ByteReader in(is);
  char magic[sizeof kCheckpointMagic];
  in.read(magic, sizeof magic, "magic");
  if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) throw FormatError("bad checkpoint magic at byte 0", 0);
  std::vector<NamedMatrix> out;
  constexpr std::uint32_t kMaxName = 4096;
  constexpr std::uint64_t kMaxEntries = std::uint64_t{1} << 28;
  while (!in.at_end()) {
    const std::size_t start = in.offset();
    const std::uint32_t len = in.u32("name length");
    if (len == 0 || len > kMaxName) {
      throw FormatError("implausible parameter name length " + std::to_string(len) + " at byte " +
                            std::to_string(start),
                        start);
    }
    std::string name(len, '\0');
    in.read(name.data(), len, "parameter name");
    const std::size_t shape_at = in.offset();
    const std::uint32_t rows = in.u32("rows");
    const std::uint32_t cols = in.u32("cols");
    if (rows == 0 || cols == 0 || std::uint64_t{rows} * cols > kMaxEntries) {
      throw FormatError("invalid shape " + std::to_string(rows) + "x" + std::to_string(cols) + " for '" + name +
                            "' at byte " + std::to_string(shape_at),
                        shape_at);
    }
    std::vector<double> values(std::size_t{rows} * cols);
    for (double& v : values) v = in.f64("parameter values");
    out.push_back({std::move(name), Matrix(rows, cols, std::move(values))});
  }
  return out;
}

// Overwrites every parameter of `model` from the checkpoint entries. Missing,
// extra or reshaped parameters are contract violations.
inline void load_parameters(ToyModel& model, const std::vector<NamedMatrix>& entries) {
  auto params = model.parameters();
  if (entries.size() != params.size()) {
    throw ContractError("checkpoint holds " + std::to_string(entries.size()) + " parameters, model has " +
                        std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    if (entries[i].name != p.name()) {
      throw ContractError("checkpoint parameter '" + entries[i].name + "' where '" + p.name() + "' was expected");
    }
    if (!entries[i].value.same_shape(p.value())) {
      throw ContractError("checkpoint parameter '" + p.name() + "' has shape " + entries[i].value.shape() +
                          ", model expects " + p.value().shape());
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value() = entries[i].value;
}

inline ToyModel load_checkpoint(const std::string& path, const ModelConfig& cfg) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint '" + path + "'");
  ToyModel model(cfg);
  load_parameters(model, read_checkpoint(is));
  return model;
}

}  // namespace smolora

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "smolora/errors.hpp"
#include "smolora/matrix.hpp"

namespace smolora {

// A named matrix owned by a model. Only trainable parameters receive
// gradients; frozen ones enter a tape as constants.
class Parameter {
 public:
  Parameter() = default;
  Parameter(std::string name, Matrix value, bool trainable = true)
      : name_(std::move(name)), value_(std::move(value)), trainable_(trainable) {}

  const std::string& name() const noexcept { return name_; }
  const Matrix& value() const noexcept { return value_; }
  Matrix& value() noexcept { return value_; }
  bool trainable() const noexcept { return trainable_; }
  void set_trainable(bool t) noexcept { trainable_ = t; }

 private:
  std::string name_;
  Matrix value_;
  bool trainable_ = true;
};

using GradientMap = std::unordered_map<const Parameter*, Matrix>;

class Tape;

// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

// Records matrix operations for one forward pass and replays them in reverse.
// A tape constructed with `record = false` keeps values only, which is what
// evaluation uses.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Matrix& out_grad)>;

  explicit Tape(bool record = true) : record_(record) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var constant(Matrix value) { return push(std::move(value), nullptr); }

  // Registers a parameter once per tape. Frozen parameters become constants.
  Var param(const Parameter& p) {
    if (auto it = param_ids_.find(&p); it != param_ids_.end()) return Var{this, it->second};
    Var v = push(p.value(), nullptr);
    if (p.trainable() && record_) nodes_[v.id].param = &p;
    param_ids_.emplace(&p, v.id);
    return v;
  }

  Var push(Matrix value, BackwardFn fn) {
    require_finite(value, "tape");
    Node n;
    n.value = std::move(value);
    if (record_) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  const Matrix& value(std::size_t id) const { return nodes_.at(id).value; }

  // Adds `g` into the pending gradient of node `id`. Only valid during backward.
  void accumulate(std::size_t id, const Matrix& g) {
    Matrix& slot = grads_[id];
    if (slot.empty()) {
      slot = g;
    } else {
      slot += g;
    }
  }

  void accumulate(std::size_t id, Matrix&& g) {
    Matrix& slot = grads_[id];
    if (slot.empty()) {
      slot = std::move(g);
    } else {
      slot += g;
    }
  }

  // Reverse sweep from a 1x1 loss. Each recorded node is visited at most once,
  // in reverse recording order. Returns gradients for trainable parameters;
  // a parameter the loss does not depend on gets a zero matrix.
  GradientMap backward(Var loss) {
    if (!record_) throw ContractError("backward on a non-recording tape");
    if (consumed_) throw ContractError("tape already replayed");
    if (loss.tape != this) throw ContractError("loss recorded on a different tape");
    const Matrix& lv = value(loss.id);
    if (lv.rows() != 1 || lv.cols() != 1) {
      throw ContractError("backward needs a scalar loss, got " + lv.shape());
    }
    consumed_ = true;
    grads_.assign(nodes_.size(), Matrix{});
    grads_[loss.id] = Matrix(1, 1, 1.0);
    visited_ = 0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      if (grads_[i].empty() || !nodes_[i].backward) continue;
      ++visited_;
      // The closure may accumulate into grads_ of earlier nodes only.
      const Matrix g = std::move(grads_[i]);
      nodes_[i].backward(*this, g);
    }
    GradientMap out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Parameter* p = nodes_[i].param;
      if (p == nullptr) continue;
      Matrix g = grads_[i].empty() ? Matrix(p->value().rows(), p->value().cols()) : grads_[i];
      out.emplace(p, std::move(g));
    }
    grads_.clear();
    return out;
  }

  // Number of nodes whose backward closure ran in the last sweep.
  std::size_t last_visit_count() const noexcept { return visited_; }

 private:
  struct Node {
    Matrix value;
    BackwardFn backward;
    const Parameter* param = nullptr;
  };

  bool record_;
  bool consumed_ = false;
  std::size_t visited_ = 0;
  std::vector<Node> nodes_;
  std::vector<Matrix> grads_;
  std::unordered_map<const Parameter*, std::size_t> param_ids_;
};

inline const Matrix& Var::value() const { return tape->value(id); }

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b) {
  if (a.tape != b.tape) throw ContractError("operands recorded on different tapes");
  return *a.tape;
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  Matrix out = matmul(a.value(), b.value());
  return t.push(std::move(out), [a = a.id, b = b.id](Tape& tp, const Matrix& g) {
    tp.accumulate(a, matmul(g, transpose(tp.value(b))));
    tp.accumulate(b, matmul(transpose(tp.value(a)), g));
  });
}

inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  Matrix out = a.value() + b.value();
  return t.push(std::move(out), [a = a.id, b = b.id](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

inline Var operator+(Var a, Var b) { return add(a, b); }

inline Var scale(Var a, double s) {
  Matrix out = s * a.value();
  return a.tape->push(std::move(out),
                      [a = a.id, s](Tape& tp, const Matrix& g) { tp.accumulate(a, s * g); });
}

// out[i][t] = w[0][t] * m[i][t]; `w` is 1xS and scales each column of `m`.
inline Var mul_rowwise(Var w, Var m) {
  Tape& t = detail::same_tape(w, m);
  const Matrix& wv = w.value();
  const Matrix& mv = m.value();
  if (wv.rows() != 1 || wv.cols() != mv.cols()) {
    throw ShapeError("mul_rowwise: weight " + wv.shape() + " does not broadcast over " +
                     mv.shape());
  }
  Matrix out = mv;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t c = 0; c < out.cols(); ++c) out(i, c) *= wv(0, c);
  return t.push(std::move(out), [w = w.id, m = m.id](Tape& tp, const Matrix& g) {
    const Matrix& wv = tp.value(w);
    const Matrix& mv = tp.value(m);
    Matrix gw(1, wv.cols());
    Matrix gm = g;
    for (std::size_t i = 0; i < g.rows(); ++i) {
      for (std::size_t c = 0; c < g.cols(); ++c) {
        gw(0, c) += g(i, c) * mv(i, c);
        gm(i, c) *= wv(0, c);
      }
    }
    tp.accumulate(w, std::move(gw));
    tp.accumulate(m, std::move(gm));
  });
}

inline Var relu(Var a) {
  Matrix out = a.value();
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return a.tape->push(std::move(out), [a = a.id](Tape& tp, const Matrix& g) {
    const Matrix& x = tp.value(a);
    Matrix gx = g;
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (!(x.data()[i] > 0.0)) gx.data()[i] = 0.0;
    tp.accumulate(a, std::move(gx));
  });
}

// Per-column top-k selection. Kept entries pass gradient through unchanged,
// masked entries receive none.
inline Var topk_mask_columns(Var a, std::size_t k) {
  Matrix out = topk_mask_columns(a.value(), k);
  return a.tape->push(std::move(out), [a = a.id, self = a.tape->size()](Tape& tp, const Matrix& g) {
    const Matrix& masked = tp.value(self);
    Matrix gx = g;
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (is_masked(masked.data()[i])) gx.data()[i] = 0.0;
    tp.accumulate(a, std::move(gx));
  });
}

inline Var softmax_columns(Var a) {
  Matrix out = softmax_columns(a.value());
  return a.tape->push(std::move(out), [a = a.id, self = a.tape->size()](Tape& tp, const Matrix& g) {
    const Matrix& y = tp.value(self);
    Matrix gx(y.rows(), y.cols());
    for (std::size_t c = 0; c < y.cols(); ++c) {
      double dot = 0.0;
      for (std::size_t r = 0; r < y.rows(); ++r) dot += y(r, c) * g(r, c);
      for (std::size_t r = 0; r < y.rows(); ++r) gx(r, c) = y(r, c) * (g(r, c) - dot);
    }
    tp.accumulate(a, std::move(gx));
  });
}

// Averages consecutive groups of `group` columns: rows x (B*group) -> rows x B.
inline Matrix group_mean_columns(const Matrix& m, std::size_t group) {
  if (group == 0 || m.cols() % group != 0) {
    throw ShapeError("group_mean_columns: " + std::to_string(m.cols()) +
                     " columns do not split into groups of " + std::to_string(group));
  }
  const std::size_t groups = m.cols() / group;
  Matrix out(m.rows(), groups);
  const double inv = 1.0 / static_cast<double>(group);
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t b = 0; b < groups; ++b) {
      double s = 0.0;
      for (std::size_t j = 0; j < group; ++j) s += m(r, b * group + j);
      out(r, b) = s * inv;
    }
  return out;
}

inline Var group_mean_columns(Var a, std::size_t group) {
  Matrix out = group_mean_columns(a.value(), group);
  return a.tape->push(std::move(out), [a = a.id, group](Tape& tp, const Matrix& g) {
    const Matrix& x = tp.value(a);
    Matrix gx(x.rows(), x.cols());
    const double inv = 1.0 / static_cast<double>(group);
    for (std::size_t r = 0; r < x.rows(); ++r)
      for (std::size_t c = 0; c < x.cols(); ++c) gx(r, c) = g(r, c / group) * inv;
    tp.accumulate(a, std::move(gx));
  });
}

inline Var mean_over_columns(Var a) { return group_mean_columns(a, a.cols()); }

// Repeats every column `times` times in place: rows x B -> rows x (B*times).
inline Var repeat_columns(Var a, std::size_t times) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols() * times);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) = x(r, c / times);
  return a.tape->push(std::move(out), [a = a.id, times](Tape& tp, const Matrix& g) {
    const Matrix& x = tp.value(a);
    Matrix gx(x.rows(), x.cols());
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) gx(r, c / times) += g(r, c);
    tp.accumulate(a, std::move(gx));
  });
}

inline Var row(Var a, std::size_t i) {
  const Matrix& x = a.value();
  if (i >= x.rows()) throw ShapeError("row: index " + std::to_string(i) + " outside " + x.shape());
  Matrix out(1, x.cols());
  std::copy(x.row(i).begin(), x.row(i).end(), out.row(0).begin());
  return a.tape->push(std::move(out), [a = a.id, i](Tape& tp, const Matrix& g) {
    const Matrix& x = tp.value(a);
    Matrix gx(x.rows(), x.cols());
    std::copy(g.row(0).begin(), g.row(0).end(), gx.row(i).begin());
    tp.accumulate(a, std::move(gx));
  });
}

inline Var concat_rows(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.cols()) {
    throw ShapeError("concat_rows: " + av.shape() + " and " + bv.shape() + " differ in columns");
  }
  std::vector<double> data(av.data().begin(), av.data().end());
  data.insert(data.end(), bv.data().begin(), bv.data().end());
  Matrix out(av.rows() + bv.rows(), av.cols(), std::move(data));
  const std::size_t split = av.size();
  return t.push(std::move(out), [a = a.id, b = b.id, split](Tape& tp, const Matrix& g) {
    const Matrix& av = tp.value(a);
    const Matrix& bv = tp.value(b);
    tp.accumulate(a, Matrix(av.rows(), av.cols(),
                            std::vector<double>(g.data().begin(), g.data().begin() + split)));
    tp.accumulate(b, Matrix(bv.rows(), bv.cols(),
                            std::vector<double>(g.data().begin() + split, g.data().end())));
  });
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape->push(Matrix(1, 1, s), [a = a.id](Tape& tp, const Matrix& g) {
    const Matrix& x = tp.value(a);
    tp.accumulate(a, Matrix(x.rows(), x.cols(), g(0, 0)));
  });
}

// Scalar sum_{ij} w_ij * a_ij for a constant weight matrix.
inline Var weighted_sum(Var a, const Matrix& w) {
  Matrix::require_same_shape(a.value(), w, "weighted_sum");
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += w.data()[i] * a.value().data()[i];
  return a.tape->push(Matrix(1, 1, s), [a = a.id, w](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g(0, 0) * w);
  });
}

// Mean over columns of -log softmax(logits)[label]. logits is classes x B.
inline Var softmax_cross_entropy(Var logits, std::span<const int> labels) {
  const Matrix& z = logits.value();
  if (labels.size() != z.cols()) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for logits " + z.shape());
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= z.rows()) {
      throw ArgumentError("softmax_cross_entropy: label " + std::to_string(l) + " out of range");
    }
  }
  Matrix probs = softmax_columns(z);
  double loss = 0.0;
  for (std::size_t c = 0; c < z.cols(); ++c) {
    loss -= std::log(std::max(probs(static_cast<std::size_t>(labels[c]), c), 1e-300));
  }
  loss /= static_cast<double>(z.cols());
  std::vector<int> lab(labels.begin(), labels.end());
  return logits.tape->push(
      Matrix(1, 1, loss),
      [id = logits.id, probs = std::move(probs), lab = std::move(lab)](Tape& tp, const Matrix& g) {
        Matrix gx = probs;
        const double inv = g(0, 0) / static_cast<double>(gx.cols());
        for (std::size_t c = 0; c < gx.cols(); ++c) {
          gx(static_cast<std::size_t>(lab[c]), c) -= 1.0;
          for (std::size_t r = 0; r < gx.rows(); ++r) gx(r, c) *= inv;
        }
        tp.accumulate(id, std::move(gx));
      });
}

}  // namespace smolora

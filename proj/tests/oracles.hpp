#pragma once

// Independent reference computations used by the tests. Nothing in here goes
// through the tape or the library's matrix kernels; everything is written as
// plain loops over nested vectors.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "smolora/lora.hpp"
#include "smolora/matrix.hpp"
#include "smolora/random.hpp"
#include "smolora/tape.hpp"

namespace oracle {

using Grid = std::vector<std::vector<double>>;

inline Grid to_grid(const smolora::Matrix& m) {
  Grid g(m.rows(), std::vector<double>(m.cols()));
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) g[i][j] = m.data()[i * m.cols() + j];
  return g;
}

inline Grid mul(const Grid& a, const Grid& b) {
  Grid out(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < b.size(); ++k) s += a[i][k] * b[k][j];
      out[i][j] = s;
    }
  return out;
}

inline Grid add(const Grid& a, const Grid& b) {
  Grid out = a;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) out[i][j] += b[i][j];
  return out;
}

// Softmax over the selected indices of a logit vector; others get 0.
inline std::vector<double> masked_softmax(const std::vector<double>& logits,
                                          const std::vector<bool>& keep) {
  double peak = -1e308;
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (keep[i]) peak = std::max(peak, logits[i]);
  std::vector<double> out(logits.size(), 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (keep[i]) total += (out[i] = std::exp(logits[i] - peak));
  for (double& v : out) v /= total;
  return out;
}

// Top-k by exhaustive pairwise comparison: entry i is kept iff fewer than k
// entries beat it, where j beats i if v[j] > v[i] or (v[j] == v[i] and j < i).
inline std::vector<bool> topk_keep(const std::vector<double>& v, std::size_t k) {
  std::vector<bool> keep(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::size_t beaten = 0;
    for (std::size_t j = 0; j < v.size(); ++j)
      if (v[j] > v[i] || (v[j] == v[i] && j < i)) ++beaten;
    keep[i] = beaten < k;
  }
  return keep;
}

inline std::vector<double> gate(const std::vector<double>& logits, std::size_t k) {
  return masked_softmax(logits, topk_keep(logits, k));
}

struct SMoLoRAReference {
  Grid y;
  std::vector<double> vu_gate;
  std::vector<double> if_gate;
  std::vector<double> alpha;
  std::vector<double> beta;
};

// Straight-line evaluation of instance routing, instruction routing, the two
// bank outputs, the importance-weighted softmax and the fused layer output.
inline SMoLoRAReference smolora_reference(const smolora::SMoLoRALayer& layer,
                                          const smolora::Matrix& xm, const smolora::Matrix& em) {
  const Grid x = to_grid(xm);
  const Grid emb = to_grid(em);
  const std::size_t d = x.size();
  const std::size_t s = x[0].size();
  SMoLoRAReference ref;

  Grid avg(d, std::vector<double>(1, 0.0));
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t t = 0; t < s; ++t) avg[i][0] += x[i][t];
    avg[i][0] /= static_cast<double>(s);
  }
  const Grid lvu = mul(to_grid(layer.router_vu().value()), avg);
  const Grid lif = mul(to_grid(layer.router_if().value()), emb);
  std::vector<double> lv;
  std::vector<double> li;
  for (const auto& r : lvu) lv.push_back(r[0]);
  for (const auto& r : lif) li.push_back(r[0]);
  ref.vu_gate = gate(lv, layer.top_k());
  ref.if_gate = gate(li, layer.top_k());

  auto bank = [&](const std::vector<smolora::LoRABlock>& blocks, const std::vector<double>& g) {
    Grid acc;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      Grid out = mul(to_grid(blocks[i].b.value()), mul(to_grid(blocks[i].a.value()), x));
      for (auto& r : out)
        for (double& v : r) v *= blocks[i].scale * g[i];
      acc = acc.empty() ? out : add(acc, out);
    }
    return acc;
  };
  const Grid xvu = bank(layer.vu_blocks(), ref.vu_gate);
  const Grid xif = bank(layer.if_blocks(), ref.if_gate);

  const Grid u = mul(to_grid(layer.importance_vu().value()), xvu);
  const Grid v = mul(to_grid(layer.importance_if().value()), xif);
  Grid fused = xvu;
  for (std::size_t t = 0; t < s; ++t) {
    const double m = std::max(u[0][t], v[0][t]);
    const double eu = std::exp(u[0][t] - m);
    const double ev = std::exp(v[0][t] - m);
    ref.alpha.push_back(eu / (eu + ev));
    ref.beta.push_back(ev / (eu + ev));
    for (std::size_t i = 0; i < fused.size(); ++i)
      fused[i][t] = ref.alpha[t] * xvu[i][t] + ref.beta[t] * xif[i][t];
  }
  ref.y = add(mul(to_grid(layer.base().value()), x), fused);
  return ref;
}

struct FdReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;
};

// Central differences with step h on `samples` randomly chosen entries of the
// trainable parameters. `loss` evaluates the scalar loss from current
// parameter values; `analytic` holds the tape gradients at the unperturbed
// point. Relative error uses max(|a|, |n|, floor) as denominator.
inline FdReport finite_difference_check(const std::vector<smolora::Parameter*>& params,
                                        const smolora::GradientMap& analytic,
                                        const std::function<double()>& loss, std::size_t samples,
                                        std::uint64_t seed, double h = 1e-5, double floor = 1e-6) {
  std::vector<smolora::Parameter*> trainable;
  for (auto* p : params)
    if (p->trainable()) trainable.push_back(p);
  smolora::Rng rng(seed);
  FdReport rep;
  for (std::size_t n = 0; n < samples; ++n) {
    smolora::Parameter* p = trainable[rng.index(trainable.size())];
    const std::size_t idx = rng.index(p->value().size());
    double& slot = p->value().data()[idx];
    const double orig = slot;
    slot = orig + h;
    const double up = loss();
    slot = orig - h;
    const double down = loss();
    slot = orig;
    const double numeric = (up - down) / (2.0 * h);
    auto it = analytic.find(p);
    const double a = it == analytic.end() ? 0.0 : it->second.data()[idx];
    const double err =
        std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
    ++rep.checked;
    if (err > rep.max_rel_error) {
      rep.max_rel_error = err;
      rep.worst = p->name() + "[" + std::to_string(idx) + "] analytic=" + std::to_string(a) +
                  " numeric=" + std::to_string(numeric);
    }
  }
  return rep;
}

// Re-implementation of the embedder's hashing scheme, written independently:
// FNV-1a seeded through the offset basis, murmur3 fmix64, bucket = h mod e,
// sign from bit 63, then unit L2 norm.
inline std::vector<double> reference_embedding(const std::string& text, std::size_t e) {
  std::vector<double> v(e, 0.0);
  std::vector<std::string> toks;
  std::string cur;
  for (char ch : text) {
    const bool alnum = (ch >= 'a' && ch <= 'z') || (ch >= 'A' && ch <= 'Z') || (ch >= '0' && ch <= '9');
    if (alnum) {
      cur += (ch >= 'A' && ch <= 'Z') ? static_cast<char>(ch - 'A' + 'a') : ch;
    } else if (!cur.empty()) {
      toks.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) toks.push_back(cur);
  for (const auto& t : toks) {
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : t) {
      h = h ^ c;
      h = h * 1099511628211ULL;
    }
    h ^= h >> 33;
    h *= 0xff51afd7ed558ccdULL;
    h ^= h >> 33;
    h *= 0xc4ceb9fe1a85ec53ULL;
    h ^= h >> 33;
    v[h % e] += (h & (1ULL << 63)) ? -1.0 : 1.0;
  }
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  for (double& x : v) x /= n;
  return v;
}

}  // namespace oracle

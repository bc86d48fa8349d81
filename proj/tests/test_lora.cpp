#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "smolora/lora.hpp"

using namespace smolora;

namespace {

void randomize_b(LoRABlock& blk, Rng& rng, double variance = 0.25) {
  blk.b.value() = rng.gaussian(blk.b.value().rows(), blk.b.value().cols(), variance);
}

void randomize_all_b(SMoLoRALayer& layer, Rng& rng) {
  for (auto& b : layer.vu_blocks()) randomize_b(b, rng);
  for (auto& b : layer.if_blocks()) randomize_b(b, rng);
}

Matrix unit_column(Rng& rng, std::size_t n) {
  Matrix v = rng.gaussian(n, 1, 1.0);
  v *= 1.0 / frobenius_norm(v);
  return v;
}

}  // namespace

TEST(LoRABlock, ZeroInitContributesNothing) {
  Rng rng(1);
  LoRABlock blk = make_lora_block("b", 6, 8, 3, rng);
  EXPECT_EQ(blk.b.value(), Matrix(8, 3));
  EXPECT_EQ(lora_apply(blk, rng.gaussian(6, 4, 1.0)), Matrix(8, 4));
}

TEST(LoRABlock, HandExpansion) {
  Rng rng(1);
  LoRABlock blk = make_lora_block("b", 2, 2, 1, rng);
  blk.a.value() = Matrix::from_rows({{1, 0}});
  blk.b.value() = Matrix::from_rows({{2}, {0}});
  const Matrix x = Matrix::from_rows({{3}, {5}});
  EXPECT_EQ(lora_apply(blk, x), Matrix::from_rows({{6}, {0}}));

  blk.scale = 2.0;
  EXPECT_EQ(lora_apply(blk, x), Matrix::from_rows({{12}, {0}}));
}

TEST(LoRABlock, RankBoundAndShapeErrors) {
  Rng rng(1);
  EXPECT_THROW(make_lora_block("b", 8, 8, 5, rng), ArgumentError);
  EXPECT_NO_THROW(make_lora_block("b", 8, 8, 4, rng));
  LoRABlock blk = make_lora_block("b", 4, 4, 2, rng);
  EXPECT_THROW(lora_apply(blk, Matrix(3, 1)), ShapeError);
  EXPECT_EQ(admissible_rank(16, 64, 3), 1u);
  EXPECT_EQ(admissible_rank(16, 64, 8), 4u);
  EXPECT_EQ(admissible_rank(16, 64, 64), 16u);
}

TEST(MoLoRA, SingleExpertEqualsPlainLoRA) {
  Rng rng(9);
  MoLoRALayer mo = make_molora_layer("m", 8, 6, 1, 3, 1, 42);
  randomize_b(mo.blocks()[0], rng);
  LoRALayer plain(Parameter("w", mo.base().value(), false), mo.blocks()[0]);
  for (int i = 0; i < 100; ++i) {
    const Matrix x = rng.gaussian(8, 1 + rng.index(4), 1.0);
    Tape t(false);
    const Matrix expect = plain.forward(t, t.constant(x), {}).value();
    EXPECT_EQ(molora_forward(mo, x), expect);
  }
}

TEST(MoLoRA, ZeroInitIsBase) {
  Rng rng(2);
  MoLoRALayer mo = make_molora_layer("m", 8, 8, 4, 2, 2, 5);
  const Matrix x = rng.gaussian(8, 3, 1.0);
  EXPECT_EQ(molora_forward(mo, x), matmul(mo.base().value(), x));
}

TEST(MoLoRA, TokenWiseRoutingMatchesPerTokenBruteForce) {
  Rng rng(4);
  MoLoRALayer mo = make_molora_layer("m", 2, 2, 2, 1, 1, 8);
  mo.router().value() = Matrix::from_rows({{1, 0}, {0, 1}});
  for (auto& b : mo.blocks()) randomize_b(b, rng);
  const Matrix x = Matrix::from_rows({{1, 0}, {0, 1}});
  const Matrix y = molora_forward(mo, x);
  const Matrix base = matmul(mo.base().value(), x);
  for (std::size_t t = 0; t < 2; ++t) {
    const std::vector<double> logits{x(0, t), x(1, t)};
    const auto g = oracle::gate(logits, 1);
    EXPECT_EQ(g[t], 1.0);  // block t wins token t
    const Matrix contrib = lora_apply(mo.blocks()[t], x);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_DOUBLE_EQ(y(i, t), base(i, t) + contrib(i, t));
  }
}

TEST(AdaptiveFusion, EqualScoresAverage) {
  const Matrix xvu = Matrix::from_rows({{1, 2}, {3, 4}});
  const Matrix xif = Matrix::from_rows({{5, 6}, {7, 8}});
  const Matrix zero(1, 2);
  auto f = adaptive_fusion(xvu, xif, zero, zero);
  for (std::size_t t = 0; t < 2; ++t) {
    EXPECT_EQ(f.alpha(0, t), 0.5);
    EXPECT_EQ(f.beta(0, t), 0.5);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_DOUBLE_EQ(f.y(i, t), 0.5 * (xvu(i, t) + xif(i, t)));
  }
}

TEST(AdaptiveFusion, LargeScoreGapSelectsVisualBank) {
  const Matrix xvu = Matrix::from_rows({{1}, {0}});
  const Matrix xif = Matrix::from_rows({{-3}, {2}});
  // u = 40 * 1 = 40, v = 0.
  auto f = adaptive_fusion(xvu, xif, Matrix::from_rows({{40, 0}}), Matrix(1, 2));
  EXPECT_LT(std::abs(f.alpha(0, 0) - 1.0), 1e-12);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_LT(std::abs(f.y(i, 0) - xvu(i, 0)), 1e-12);
}

TEST(AdaptiveFusion, ScalarSoftmaxOracle) {
  // u = 1.5, v = 0.9 via single-row outputs and unit importance.
  auto f = adaptive_fusion(Matrix::from_rows({{1.5}}), Matrix::from_rows({{0.9}}),
                           Matrix::from_rows({{1}}), Matrix::from_rows({{1}}));
  EXPECT_NEAR(f.alpha(0, 0), 0.6457, 1e-4);
  EXPECT_NEAR(f.beta(0, 0), 0.3543, 1e-4);
  EXPECT_NEAR(f.alpha(0, 0) + f.beta(0, 0), 1.0, 1e-12);
}

TEST(AdaptiveFusion, ShapeErrors) {
  EXPECT_THROW(adaptive_fusion(Matrix(2, 2), Matrix(2, 3), Matrix(1, 2), Matrix(1, 2)), ShapeError);
  EXPECT_THROW(adaptive_fusion(Matrix(2, 2), Matrix(2, 2), Matrix(1, 3), Matrix(1, 2)), ShapeError);
}

TEST(SMoLoRA, InitIsDeterministic) {
  SMoLoRALayer a = init_smolora(16, 16, 4, 4, 4, 8, 1, 77);
  SMoLoRALayer b = init_smolora(16, 16, 4, 4, 4, 8, 1, 77);
  auto pa = a.parameters();
  auto pb = b.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i]->name(), pb[i]->name());
    EXPECT_EQ(pa[i]->value(), pb[i]->value());
  }
  SMoLoRALayer c = init_smolora(16, 16, 4, 4, 4, 8, 1, 78);
  EXPECT_NE(a.router_vu().value(), c.router_vu().value());
}

TEST(SMoLoRA, DefaultShapeMatchesPublishedConfiguration) {
  const SMoLoRAShape s;
  EXPECT_EQ(s.vu_blocks, 4u);
  EXPECT_EQ(s.if_blocks, 4u);
  EXPECT_EQ(s.rank, 16u);
  EXPECT_EQ(s.top_k, 1u);
  SMoLoRALayer layer = make_smolora_layer("l", 64, 64, s, 1);
  EXPECT_EQ(layer.vu_blocks().size(), 4u);
  EXPECT_EQ(layer.if_blocks()[0].rank, 16u);
}

TEST(SMoLoRA, InvalidDimensions) {
  EXPECT_THROW(init_smolora(0, 8, 4, 4, 2, 8, 1, 1), ArgumentError);
  EXPECT_THROW(init_smolora(8, 8, 2, 4, 2, 8, 3, 1), ArgumentError);
  EXPECT_THROW(init_smolora(8, 8, 4, 0, 2, 8, 1, 1), ArgumentError);
}

TEST(SMoLoRA, ZeroInitNeutralityForAnySeed) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed + 1000);
    SMoLoRALayer layer = init_smolora(12, 10, 4, 4, 3, 16, 1 + seed % 3, seed);
    const Matrix x = rng.gaussian(12, 1 + rng.index(4), 1.0);
    auto r = smolora_forward(layer, x, unit_column(rng, 16));
    EXPECT_EQ(r.y, matmul(layer.base().value(), x));
  }
}

TEST(SMoLoRA, SingletonBanksGateToOne) {
  Rng rng(3);
  SMoLoRALayer layer = init_smolora(6, 6, 1, 1, 2, 4, 1, 3);
  randomize_all_b(layer, rng);
  const Matrix x = rng.gaussian(6, 2, 1.0);
  auto r = smolora_forward(layer, x, unit_column(rng, 4));
  ASSERT_EQ(r.trace.vu_selected.size(), 1u);
  EXPECT_EQ(r.trace.vu_selected[0].weight, 1.0);
  EXPECT_EQ(r.trace.if_selected[0].weight, 1.0);
  auto f = adaptive_fusion(lora_apply(layer.vu_blocks()[0], x), lora_apply(layer.if_blocks()[0], x),
                           layer.importance_vu().value(), layer.importance_if().value());
  EXPECT_EQ(r.y, matmul(layer.base().value(), x) + f.y);
}

TEST(SMoLoRA, MatchesStraightLineReference) {
  for (std::size_t top_k : {1u, 2u}) {
    Rng rng(31 + top_k);
    SMoLoRALayer layer = init_smolora(8, 8, 4, 4, 4, 6, top_k, 1234);
    randomize_all_b(layer, rng);
    layer.importance_vu().value() = rng.gaussian(1, 8, 1.0);
    layer.importance_if().value() = rng.gaussian(1, 8, 1.0);
    const Matrix x = rng.gaussian(8, 3, 1.0);
    const Matrix emb = unit_column(rng, 6);
    auto r = smolora_forward(layer, x, emb);
    auto ref = oracle::smolora_reference(layer, x, emb);
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t t = 0; t < 3; ++t) EXPECT_NEAR(r.y(i, t), ref.y[i][t], 1e-12);
    for (const auto& g : r.trace.vu_selected) EXPECT_NEAR(g.weight, ref.vu_gate[g.block], 1e-15);
    for (const auto& g : r.trace.if_selected) EXPECT_NEAR(g.weight, ref.if_gate[g.block], 1e-15);
    EXPECT_EQ(r.trace.vu_selected.size(), top_k);
    EXPECT_EQ(r.trace.if_selected.size(), top_k);
    double am = 0.0;
    for (double a : ref.alpha) am += a / 3.0;
    EXPECT_NEAR(r.trace.alpha_mean, am, 1e-12);
  }
}

TEST(SMoLoRA, GateAndFusionSimplex) {
  Rng rng(8);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t top_k = 1 + rng.index(3);
    SMoLoRALayer layer = init_smolora(10, 10, 4, 3, 2, 8, top_k, 500 + trial);
    randomize_all_b(layer, rng);
    const Matrix x = rng.gaussian(10, 1 + rng.index(4), 1.0);
    auto r = smolora_forward(layer, x, unit_column(rng, 8));
    for (const auto* bank : {&r.trace.vu_selected, &r.trace.if_selected}) {
      EXPECT_EQ(bank->size(), top_k);
      double s = 0.0;
      for (const auto& g : *bank) {
        EXPECT_GT(g.weight, 0.0);
        s += g.weight;
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
    EXPECT_GT(r.trace.alpha_mean, 0.0);
    EXPECT_LT(r.trace.alpha_mean, 1.0);
    EXPECT_NEAR(r.trace.alpha_mean + r.trace.beta_mean, 1.0, 1e-12);
    // Output decomposes as base plus fused delta.
    const Matrix base = matmul(layer.base().value(), x);
    EXPECT_EQ(r.y, base + r.fused);
  }
}

TEST(SMoLoRA, InstanceGateIgnoresColumnDuplication) {
  Rng rng(12);
  SMoLoRALayer layer = init_smolora(8, 8, 4, 4, 2, 8, 2, 99);
  const Matrix x = rng.gaussian(8, 3, 1.0);
  Matrix xx(8, 6);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t t = 0; t < 6; ++t) xx(i, t) = x(i, t % 3);
  const Matrix g1 = route_instance(layer.router_vu().value(), x, 2);
  const Matrix g2 = route_instance(layer.router_vu().value(), xx, 2);
  for (std::size_t i = 0; i < g1.size(); ++i) {
    EXPECT_EQ(g1.data()[i] == 0.0, g2.data()[i] == 0.0);
    EXPECT_NEAR(g1.data()[i], g2.data()[i], 1e-15);
  }
}

TEST(SMoLoRA, InstanceRoutingSharedAcrossPositionsUnlikeTokenWise) {
  // Two positions that individually prefer different blocks. Token-wise
  // MoLoRA splits them; SMoLoRA's VU bank routes the whole instance together.
  Rng rng(21);
  const Matrix router = Matrix::from_rows({{3, 0}, {0, 1}});
  const Matrix x = Matrix::from_rows({{1, 0}, {0, 1}});
  const Matrix token = softmax_columns(topk_mask_columns(matmul(router, x), 1));
  EXPECT_EQ(token(0, 0), 1.0);
  EXPECT_EQ(token(1, 1), 1.0);
  const Matrix inst = route_instance(router, x, 1);
  EXPECT_EQ(inst(0, 0), 1.0);
  EXPECT_EQ(inst(1, 0), 0.0);
}

TEST(SMoLoRA, MissingInstructionIsContractError) {
  SMoLoRALayer layer = init_smolora(4, 4, 2, 2, 1, 4, 1, 1);
  Tape t(false);
  EXPECT_THROW(layer.forward(t, t.constant(Matrix(4, 2)), LayerContext{2, std::nullopt, nullptr}),
               ContractError);
  EXPECT_THROW(smolora_forward(layer, Matrix(4, 2), Matrix(3, 1)), ShapeError);
  EXPECT_THROW(smolora_forward(layer, Matrix(5, 2), Matrix(4, 1)), ShapeError);
}

// --- gradient suite ------------------------------------------------------

namespace {

struct GradCase {
  std::vector<Parameter*> params;
  std::function<Var(Tape&)> build;
};

double run_fd(const GradCase& c, std::uint64_t seed, std::size_t samples = 150) {
  auto value = [&] {
    Tape t(false);
    return c.build(t).value()(0, 0);
  };
  Tape tape;
  auto grads = tape.backward(c.build(tape));
  for (auto* p : c.params) {
    if (p->trainable()) {
      EXPECT_TRUE(grads.count(p)) << p->name();
    } else {
      EXPECT_FALSE(grads.count(p)) << p->name();
    }
  }
  auto rep = oracle::finite_difference_check(c.params, grads, value, samples, seed);
  EXPECT_GE(rep.checked, 100u);
  EXPECT_LT(rep.max_rel_error, 1e-4) << rep.worst;
  return rep.max_rel_error;
}

}  // namespace

TEST(Gradients, PlainLoRA) {
  Rng rng(100);
  LoRALayer layer = make_lora_layer("l", 10, 8, 3, 5);
  randomize_b(layer.block(), rng);
  const Matrix x = rng.gaussian(10, 4, 1.0);
  const Matrix w = rng.gaussian(8, 4, 1.0);
  run_fd({layer.parameters(),
          [&](Tape& t) { return weighted_sum(layer.forward(t, t.constant(x), {}), w); }},
         1);
}

TEST(Gradients, MoLoRA) {
  Rng rng(101);
  MoLoRALayer layer = make_molora_layer("m", 10, 8, 4, 3, 2, 6);
  for (auto& b : layer.blocks()) randomize_b(b, rng);
  const Matrix x = rng.gaussian(10, 5, 1.0);
  const Matrix w = rng.gaussian(8, 5, 1.0);
  run_fd({layer.parameters(),
          [&](Tape& t) { return weighted_sum(layer.forward(t, t.constant(x), {}), w); }},
         2);
}

TEST(Gradients, SMoLoRATopTwoThroughGatesAndFusion) {
  Rng rng(102);
  SMoLoRALayer layer = make_smolora_layer("s", 10, 8, {4, 4, 3, 6, 2}, 7);
  randomize_all_b(layer, rng);
  layer.importance_vu().value() = rng.gaussian(1, 8, 0.5);
  layer.importance_if().value() = rng.gaussian(1, 8, 0.5);
  const std::size_t s = 2;
  const Matrix x = rng.gaussian(10, 3 * s, 1.0);
  Matrix emb(6, 3);
  for (std::size_t b = 0; b < 3; ++b) {
    const Matrix u = unit_column(rng, 6);
    for (std::size_t i = 0; i < 6; ++i) emb(i, b) = u(i, 0);
  }
  const std::vector<int> labels{1, 5, 2};
  run_fd({layer.parameters(),
          [&](Tape& t) {
            LayerContext ctx{s, t.constant(emb), nullptr};
            Var y = layer.forward(t, t.constant(x), ctx);
            return softmax_cross_entropy(group_mean_columns(y, s), labels);
          }},
         3, 200);
}

TEST(Gradients, SMoLoRATopOneLeavesUnselectedBlocksAtZero) {
  Rng rng(103);
  SMoLoRALayer layer = make_smolora_layer("s", 8, 8, {4, 4, 2, 6, 1}, 9);
  randomize_all_b(layer, rng);
  const Matrix x = rng.gaussian(8, 2, 1.0);
  const Matrix emb = unit_column(rng, 6);
  const Matrix w = rng.gaussian(8, 2, 1.0);
  auto build = [&](Tape& t) {
    LayerContext ctx{2, t.constant(emb), nullptr};
    return weighted_sum(layer.forward(t, t.constant(x), ctx), w);
  };
  run_fd({layer.parameters(), build}, 4);

  auto r = smolora_forward(layer, x, emb);
  Tape tape;
  auto grads = tape.backward(build(tape));
  for (std::size_t i = 0; i < 4; ++i) {
    const bool selected = r.trace.vu_selected[0].block == i;
    const auto& blk = layer.vu_blocks()[i];
    EXPECT_EQ(frobenius_norm(grads.at(&blk.b)) == 0.0, !selected) << "vu block " << i;
  }
  // A singleton softmax is constant, so routers get no gradient under top-1.
  EXPECT_EQ(frobenius_norm(grads.at(&layer.router_vu())), 0.0);
  EXPECT_EQ(frobenius_norm(grads.at(&layer.router_if())), 0.0);
}

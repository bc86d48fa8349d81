#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "smolora/random.hpp"
#include "smolora/routing.hpp"

using namespace smolora;

namespace {

std::vector<double> col(const Matrix& m) { return {m.data().begin(), m.data().end()}; }

Matrix example_router() { return Matrix::from_rows({{0.2}, {1.5}, {-0.3}, {0.9}}); }

}  // namespace

TEST(RouteInstance, SingletonBankIsOne) {
  const Matrix r = Matrix::from_rows({{0.3, -1.2, 0.8}});
  const Matrix x = Matrix::from_rows({{1.0, 2.0}, {0.5, -0.5}, {3.0, 0.0}});
  EXPECT_EQ(route_instance(r, x, 1), Matrix::from_rows({{1.0}}));
}

TEST(RouteInstance, TopOneIsOneHot) {
  const Matrix g = route_instance(example_router(), Matrix::from_rows({{1.0}}), 1);
  EXPECT_EQ(col(g), (std::vector<double>{0, 1, 0, 0}));
}

TEST(RouteInstance, TopTwoMatchesScalarSoftmax) {
  const Matrix g = route_instance(example_router(), Matrix::from_rows({{1.0}}), 2);
  const double e1 = std::exp(1.5);
  const double e2 = std::exp(0.9);
  EXPECT_EQ(g(0, 0), 0.0);
  EXPECT_EQ(g(2, 0), 0.0);
  EXPECT_NEAR(g(1, 0), e1 / (e1 + e2), 1e-12);
  EXPECT_NEAR(g(3, 0), e2 / (e1 + e2), 1e-12);
  EXPECT_NEAR(g(1, 0), 0.6457, 1e-4);
  EXPECT_NEAR(g(3, 0), 0.3543, 1e-4);
}

TEST(RouteInstance, UsesColumnMean) {
  Rng rng(3);
  const Matrix r = rng.gaussian(5, 4, 1.0);
  const Matrix x = rng.gaussian(4, 3, 1.0);
  const Matrix direct = route_instance(r, mean_over_columns(x), 2);
  EXPECT_EQ(route_instance(r, x, 2), direct);
}

TEST(RouteInstance, ShapeMismatchThrows) {
  EXPECT_THROW(route_instance(Matrix(3, 4), Matrix(5, 2), 1), ShapeError);
  EXPECT_THROW(route_instance(Matrix(3, 4), Matrix(4, 2), 4), ArgumentError);
}

TEST(RouteInstance, SimplexPropertyOverRandomInputs) {
  Rng rng(77);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t m = 1 + rng.index(8);
    const std::size_t k = 1 + rng.index(m);
    const Matrix g = route_instance(rng.gaussian(m, 6, 1.0), rng.gaussian(6, 1 + rng.index(4), 1.0), k);
    std::size_t positive = 0;
    double total = 0.0;
    for (double v : g.data()) {
      EXPECT_GE(v, 0.0);
      positive += v > 0.0 ? 1 : 0;
      total += v;
    }
    EXPECT_EQ(positive, k);
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(RouteInstruction, IdenticalRowsBreakTiesLow) {
  const Matrix r = Matrix::from_rows({{0.5, 0.5}, {0.5, 0.5}, {0.5, 0.5}});
  const Matrix g = route_instruction(r, Matrix::from_rows({{0.6}, {0.8}}), 1);
  EXPECT_EQ(col(g), (std::vector<double>{1, 0, 0}));
}

TEST(RouteInstruction, SeededMatchesStraightLineOracle) {
  Rng rng(2024);
  const Matrix r = rng.gaussian(2, 4, 0.25);
  const Matrix emb = embed_text("Answer with a single word.", 4);
  for (std::size_t k : {1u, 2u}) {
    const Matrix g = route_instruction(r, emb, k);
    std::vector<double> logits(2, 0.0);
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 4; ++j) logits[i] += r(i, j) * emb(j, 0);
    const auto expect = oracle::gate(logits, k);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(g(i, 0), expect[i], 1e-14);
  }
}

TEST(RouteInstruction, Deterministic) {
  Rng rng(5);
  const Matrix r = rng.gaussian(4, 16, 1.0);
  const std::string text = "Describe the picture in one sentence.";
  EXPECT_EQ(route_instruction(r, embed_text(text, 16), 2), route_instruction(r, embed_text(text, 16), 2));
}

TEST(RouteInstruction, ShapeMismatchThrows) {
  EXPECT_THROW(route_instruction(Matrix(2, 4), Matrix(5, 1), 1), ShapeError);
}

TEST(EmbedText, DeterministicAndUnitNorm) {
  const std::vector<std::string> texts{"a", "Pick the option's letter.", "  x  y  ", "3 apples, 4 pears",
                                       "What does the picture show?"};
  for (const auto& t : texts) {
    for (std::size_t e : {7u, 64u}) {
      const Matrix v = embed_text(t, e);
      EXPECT_EQ(v, embed_text(t, e));
      EXPECT_EQ(v.rows(), e);
      EXPECT_EQ(v.cols(), 1u);
      EXPECT_NEAR(frobenius_norm(v), 1.0, 1e-9);
    }
  }
}

TEST(EmbedText, EmptyTextRejected) {
  EXPECT_THROW(embed_text("", 8), ArgumentError);
  EXPECT_THROW(embed_text(" \t\n ", 8), ArgumentError);
  EXPECT_THROW(embed_text("?!..", 8), ArgumentError);
  EXPECT_THROW(embed_text("ok", 0), ArgumentError);
  // Two tokens landing in the single bucket with opposite signs cancel.
  EXPECT_THROW(embed_text("one two", 1), ArgumentError);
}

TEST(EmbedText, CaseAndPunctuationInsensitive) {
  EXPECT_EQ(embed_text("Hello, World!", 32), embed_text("hello world", 32));
}

TEST(EmbedText, MatchesReferenceHasher) {
  const std::vector<std::string> texts{
      "Reply with only the letter of the correct option.",
      "Describe this photo in one complete sentence.",
      "Name the main object in the photo with a word or short phrase.",
  };
  for (const auto& t : texts) {
    const auto ref = oracle::reference_embedding(t, 64);
    const Matrix v = embed_text(t, 64);
    for (std::size_t i = 0; i < 64; ++i) EXPECT_NEAR(v(i, 0), ref[i], 1e-15) << t;
  }
}

TEST(EmbedText, CosineOfDisjointTemplatesMatchesReference) {
  const std::string a = "Pick the letter shown";
  const std::string b = "describe scene briefly now";
  const auto ta = tokenize(a);
  for (const auto& tok : tokenize(b)) ASSERT_EQ(std::find(ta.begin(), ta.end(), tok), ta.end());
  for (std::size_t e : {4u, 16u, 64u}) {
    const auto ra = oracle::reference_embedding(a, e);
    const auto rb = oracle::reference_embedding(b, e);
    double expect = 0.0;
    for (std::size_t i = 0; i < e; ++i) expect += ra[i] * rb[i];
    const Matrix va = embed_text(a, e);
    const Matrix vb = embed_text(b, e);
    double got = 0.0;
    for (std::size_t i = 0; i < e; ++i) got += va(i, 0) * vb(i, 0);
    EXPECT_NEAR(got, expect, 1e-12);
  }
}

TEST(EmbedText, HashingEmbedderContract) {
  const HashingEmbedder emb(24);
  const InstructionEmbedder& base = emb;
  EXPECT_EQ(base.dimension(), 24u);
  EXPECT_EQ(base.embed("one two"), embed_text("one two", 24));
  EXPECT_THROW(HashingEmbedder(0), ArgumentError);
}

TEST(StableHash, SeedChangesValue) {
  EXPECT_EQ(stable_hash64("token"), stable_hash64("token", 0));
  EXPECT_NE(stable_hash64("token", 0), stable_hash64("token", 1));
  EXPECT_NE(stable_hash64("ab"), stable_hash64("ba"));
}

TEST(RoutingHistogram, SingleTopOneTrace) {
  std::map<int, std::vector<RoutingTrace>> traces;
  traces[1].push_back({0, {{2, 1.0}}, {{1, 1.0}}, 0.5, 0.5});
  const auto h = routing_histogram(traces, 4, 3);
  ASSERT_NE(h.find(1, Bank::kVisual), nullptr);
  EXPECT_EQ(h.find(1, Bank::kVisual)->frequency, (std::vector<double>{0, 0, 1, 0}));
  EXPECT_EQ(h.find(1, Bank::kInstruction)->frequency, (std::vector<double>{0, 1, 0}));
}

TEST(RoutingHistogram, IdenticalTracesGiveIdenticalRows) {
  std::map<int, std::vector<RoutingTrace>> traces;
  const std::vector<RoutingTrace> same{{0, {{0, 0.7}, {3, 0.3}}, {{2, 1.0}}, 0.4, 0.6},
                                       {0, {{1, 1.0}}, {{0, 0.5}, {1, 0.5}}, 0.5, 0.5}};
  traces[1] = same;
  traces[2] = same;
  const auto h = routing_histogram(traces, 4, 4);
  EXPECT_EQ(h.find(1, Bank::kVisual)->frequency, h.find(2, Bank::kVisual)->frequency);
  EXPECT_EQ(h.find(1, Bank::kInstruction)->frequency, h.find(2, Bank::kInstruction)->frequency);
  EXPECT_NEAR(h.find(1, Bank::kVisual)->frequency[0], 0.35, 1e-15);
}

TEST(RoutingHistogram, RowsSumToOne) {
  Rng rng(8);
  std::map<int, std::vector<RoutingTrace>> traces;
  for (int task = 1; task <= 5; ++task) {
    for (int n = 0; n < 40; ++n) {
      for (int layer = 0; layer < 2; ++layer) {
        const Matrix gv = route_instance(rng.gaussian(4, 3, 1.0), rng.gaussian(3, 2, 1.0), 2);
        const Matrix gi = route_instance(rng.gaussian(4, 3, 1.0), rng.gaussian(3, 1, 1.0), 2);
        RoutingTrace t;
        t.layer_id = layer;
        for (std::size_t i = 0; i < 4; ++i) {
          if (gv(i, 0) > 0) t.vu_selected.push_back({i, gv(i, 0)});
          if (gi(i, 0) > 0) t.if_selected.push_back({i, gi(i, 0)});
        }
        traces[task].push_back(t);
      }
    }
  }
  for (std::optional<int> layer : {std::optional<int>{}, std::optional<int>{1}}) {
    const auto h = routing_histogram(traces, 4, 4, layer);
    EXPECT_EQ(h.rows.size(), 10u);
    for (const auto& row : h.rows) {
      double s = 0.0;
      for (double f : row.frequency) s += f;
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(RoutingHistogram, ErrorsOnEmptyInput) {
  EXPECT_THROW(routing_histogram({}, 4, 4), ArgumentError);
  std::map<int, std::vector<RoutingTrace>> traces;
  traces[1].push_back({0, {{0, 1.0}}, {{0, 1.0}}, 0.5, 0.5});
  EXPECT_THROW(routing_histogram(traces, 4, 4, 3), ArgumentError);
  traces[1].push_back({0, {{9, 1.0}}, {{0, 1.0}}, 0.5, 0.5});
  EXPECT_THROW(routing_histogram(traces, 4, 4), ArgumentError);
}

TEST(RoutingHistogram, CsvLayout) {
  std::map<int, std::vector<RoutingTrace>> traces;
  traces[1].push_back({0, {{1, 1.0}}, {{0, 1.0}}, 0.5, 0.5});
  traces[2].push_back({0, {{0, 1.0}}, {{2, 1.0}}, 0.5, 0.5});
  std::ostringstream os;
  write_histogram_csv(os, routing_histogram(traces, 2, 3));
  EXPECT_EQ(os.str(),
            "task,bank,block_0,block_1,block_2\n"
            "1,vu,0,1,0\n"
            "1,if,1,0,0\n"
            "2,vu,1,0,0\n"
            "2,if,0,0,1\n");
}

TEST(RoutingHistogram, EntropyAndDominant) {
  EXPECT_EQ(entropy({1.0, 0.0}), 0.0);
  EXPECT_NEAR(entropy({0.25, 0.25, 0.25, 0.25}), std::log(4.0), 1e-15);
  EXPECT_EQ(dominant_block({0.1, 0.6, 0.3}), 1u);
  EXPECT_EQ(dominant_block({0.5, 0.5}), 0u);
}

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "fd_check.hpp"
#include "op_catalog.hpp"
#include "selfablate/selfablate.hpp"

using namespace selfablate;
using Td = Tensor<double>;
using Tf = Tensor<float>;

namespace {

void expect_values(const Td& t, const std::vector<double>& want, double tol = 1e-12) {
  ASSERT_EQ(t.size(), want.size());
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(t.data()[i], want[i], tol) << "index " << i;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  const Td eye({2, 2}, {1, 0, 0, 1});
  const Td m({2, 2}, {1, 2, 3, 4});
  expect_values(matmul(eye, m), {1, 2, 3, 4});
}

TEST(Matmul, ProjectorKeepsFirstRow) {
  const Td p({2, 2}, {1, 0, 0, 0});
  const Td m({2, 2}, {5, 6, 7, 8});
  expect_values(matmul(p, m), {5, 6, 0, 0});
}

TEST(Matmul, GradientOfSumMatchesOnesTimesBTransposeAndFiniteDifferences) {
  std::mt19937_64 rng(3);
  const Td a = fdcheck::random_tensor(rng, {3, 4});
  const Td b = fdcheck::random_tensor(rng, {4, 2}, -1, 1, false);
  Tape<double>::current().clear();
  backward(sum(matmul(a, b)));
  // ones(3,2) . b^T: every row of grad(a) is the row sums of b.
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t k = 0; k < 4; ++k) {
      EXPECT_NEAR(a.grad()[i * 4 + k], b.data()[k * 2] + b.data()[k * 2 + 1], 1e-12);
    }
  }
  const auto r = fdcheck::check({a}, [&b](const std::vector<Td>& x) { return sum(matmul(x[0], b)); });
  EXPECT_LE(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Matmul, RejectsInnerDimensionMismatch) {
  EXPECT_THROW(matmul(Td::zeros({2, 3}), Td::zeros({2, 3})), ShapeError);
}

TEST(Softmax, UniformInputGivesUniformOutput) {
  expect_values(softmax(Td({3}, {0, 0, 0})), {1.0 / 3, 1.0 / 3, 1.0 / 3});
}

TEST(Softmax, LargeLogitDoesNotOverflow) {
  const auto y = softmax(Tf({2}, {1000.0f, 0.0f}));
  EXPECT_FLOAT_EQ(y.data()[0], 1.0f);
  EXPECT_GE(y.data()[1], 0.0f);
  EXPECT_LT(y.data()[1], 1e-30f);
}

TEST(Softmax, MatchesIndependentEvaluation) {
  const std::vector<double> x = {1.5, 0.5, -0.5, -1.5};
  double z = 0;
  for (double v : x) z += std::exp(v);
  std::vector<double> want;
  for (double v : x) want.push_back(std::exp(v) / z);
  const auto y = softmax(Td({4}, x));
  expect_values(y, want, 1e-12);
  expect_values(y, {0.6439, 0.2369, 0.0871, 0.0321}, 5e-5);
}

TEST(Softmax, RejectsBadAxis) { EXPECT_THROW(softmax(Td::zeros({2, 2}), 2), ShapeError); }

TEST(SoftmaxProperty, RowsSumToOneInFloatAlongEveryAxis) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0.0, 5.0);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t a = 1 + rng() % 4, b = 1 + rng() % 300, c = 1 + rng() % 4;
    std::vector<float> v(a * b * c);
    for (auto& x : v) x = static_cast<float>(n(rng));
    const Tf t({a, b, c}, v);
    const auto y = softmax(t, 1);
    for (std::size_t i = 0; i < a; ++i) {
      for (std::size_t k = 0; k < c; ++k) {
        double s = 0;
        for (std::size_t j = 0; j < b; ++j) {
          const float p = y.data()[(i * b + j) * c + k];
          EXPECT_GT(p, -1e-30f);
          s += p;
        }
        EXPECT_NEAR(s, 1.0, 1e-6);
      }
    }
  }
}

TEST(LayerNorm, ConstantVectorMapsToZero) {
  const auto y = layer_norm(Td({4}, {3, 3, 3, 3}), Td::ones({4}), Td::zeros({4}));
  expect_values(y, {0, 0, 0, 0});
}

TEST(LayerNorm, NormalizedInputIsUnchangedAsEpsVanishes) {
  const auto y = layer_norm(Td({2}, {1, -1}), Td::ones({2}), Td::zeros({2}), 1e-12);
  expect_values(y, {1, -1}, 1e-9);
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  const auto r = fdcheck::check(
      {fdcheck::random_tensor(rng, {2, 6}), fdcheck::random_tensor(rng, {6}), fdcheck::random_tensor(rng, {6})},
      [](const std::vector<Td>& x) { return fdcheck::weighted_sum(layer_norm(x[0], x[1], x[2])); });
  EXPECT_LE(r.max_rel_error, 1e-4) << r.worst;
}

TEST(CrossEntropy, ConfidentCorrectPredictionIsNearZero) {
  const Td logits({1, 1, 3}, {50, 0, 0});
  const std::vector<std::int32_t> t = {0};
  EXPECT_NEAR(cross_entropy(logits, t).item(), 0.0, 1e-12);
}

TEST(CrossEntropy, UniformLogitsGiveLogVocab) {
  const Td logits = Td::zeros({2, 3, 256});
  const std::vector<std::int32_t> t = {0, 17, 255, 3, 9, 100};
  EXPECT_NEAR(cross_entropy(logits, t).item(), std::log(256.0), 1e-12);
  EXPECT_NEAR(cross_entropy(logits, t).item(), 5.5452, 1e-4);
}

TEST(CrossEntropy, TwoClassHandValue) {
  const Td logits({1, 1, 2}, {0, std::log(3.0)});
  const std::vector<std::int32_t> t = {1};
  EXPECT_NEAR(cross_entropy(logits, t).item(), -std::log(0.75), 1e-12);
  EXPECT_NEAR(cross_entropy(logits, t).item(), 0.2877, 1e-4);
}

TEST(CrossEntropy, RejectsOutOfRangeTarget) {
  const std::vector<std::int32_t> t = {5};
  EXPECT_THROW(cross_entropy(Td::zeros({1, 1, 3}), t), RangeError);
  const std::vector<std::int32_t> neg = {-1};
  EXPECT_THROW(cross_entropy(Td::zeros({1, 1, 3}), neg), RangeError);
}

TEST(TopK, Examples) {
  EXPECT_EQ(topk_indices(Td({3}, {5, 3, 1}), 1), (std::vector<std::int32_t>{0}));
  EXPECT_EQ(topk_indices(Td({3}, {1, 1, 0}), 1), (std::vector<std::int32_t>{0}));
  EXPECT_EQ(topk_indices(Td({4}, {2, 9, 4, 7}), 2), (std::vector<std::int32_t>{1, 3}));
}

TEST(TopK, RejectsKOutOfRange) {
  EXPECT_THROW(topk_indices(Td({3}, {1, 2, 3}), 0), RangeError);
  EXPECT_THROW(topk_indices(Td({3}, {1, 2, 3}), 4), RangeError);
}

TEST(TopKProperty, DeterministicAndMatchesStableSort) {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> small(0, 3);  // many ties
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng() % 20;
    const std::size_t k = 1 + rng() % n;
    std::vector<double> v(n);
    for (auto& x : v) x = small(rng);
    const Td t({n}, v);
    const auto a = topk_indices(t, k);
    EXPECT_EQ(a, topk_indices(t, k));
    std::vector<std::int32_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int i, int j) { return v[i] > v[j]; });
    EXPECT_EQ(a, std::vector<std::int32_t>(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k)));
  }
}

TEST(Backward, SumGivesOnes) {
  const Td w({3}, {0.5, -2, 7}, true);
  Tape<double>::current().clear();
  backward(sum(w));
  expect_values(Td({3}, std::vector<double>(w.grad().begin(), w.grad().end())), {1, 1, 1});
}

TEST(Backward, HalfSquaredNormGivesW) {
  const Td w({2}, {1, 2}, true);
  Tape<double>::current().clear();
  backward(scale(sum(mul(w, w)), 0.5));
  EXPECT_DOUBLE_EQ(w.grad()[0], 1.0);
  EXPECT_DOUBLE_EQ(w.grad()[1], 2.0);
}

TEST(Backward, RejectsNonScalarLoss) {
  const Td w({2}, {1, 2}, true);
  EXPECT_THROW(backward(scale(w, 2.0)), ShapeError);
}

TEST(Backward, RejectsLossNotOnTape) {
  EXPECT_THROW(backward(Td::scalar(1.0)), Error);
}

TEST(Backward, ClearsTapeAndAccumulatesAcrossUses) {
  const Td w({2}, {1, 2}, true);
  Tape<double>::current().clear();
  backward(add(sum(w), sum(scale(w, 3.0))));  // w used twice
  EXPECT_DOUBLE_EQ(w.grad()[0], 4.0);
  EXPECT_EQ(Tape<double>::current().size(), 0u);
}

TEST(Backward, VisitsOperationsInReverseRecordingOrder) {
  auto& tape = Tape<double>::current();
  tape.clear();
  std::vector<int> seen;
  tape.record([&] { seen.push_back(1); });
  tape.record([&] { seen.push_back(2); });
  tape.record([&] { seen.push_back(3); });
  tape.replay_reverse();
  EXPECT_EQ(seen, (std::vector<int>{3, 2, 1}));
}

TEST(Backward, NoGradGuardSkipsRecording) {
  const Td w({2}, {1, 2}, true);
  Tape<double>::current().clear();
  {
    NoGradGuard ng;
    const Td y = mul(w, w);
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_EQ(Tape<double>::current().size(), 0u);
}

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Td({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_THROW(Td({0}, {}), ShapeError);
  const Td t({2, 3}, std::vector<double>(6, 1.0));
  EXPECT_EQ(numel(t.shape()), t.size());
}

TEST(Tensor, NonFiniteResultsAreErrors) {
  EXPECT_THROW(mul(Tf({1}, {1e30f}), Tf({1}, {1e30f})), NonFiniteError);
  EXPECT_THROW(add(Td({1}, {std::nan("")}), Td({1}, {0})), NonFiniteError);
}

TEST(Tensor, FiniteInputsStayFiniteThroughOps) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const Tf x = [&] {
      std::normal_distribution<float> n(0.0f, 20.0f);
      std::vector<float> v(2 * 5 * 8);
      for (auto& e : v) e = n(rng);
      return Tf({2, 5, 8}, v);
    }();
    EXPECT_NO_THROW({
      gelu(x);
      softmax(x);
      layer_norm(x, Tf::ones({8}), Tf::zeros({8}));
      causal_attention(x, x, x, 2);
      kwta::ste_gate(x, 3);
    });
  }
}

class OpGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(OpGradient, MatchesCentralFiniteDifferences) {
  static const auto cases = opcatalog::all_cases();
  const auto& c = cases.at(GetParam());
  const auto r = fdcheck::check(c.inputs, c.loss, c.numeric_loss);
  EXPECT_GT(r.checked, 0u);
  EXPECT_LE(r.max_rel_error, c.rtol) << c.name << ": " << r.worst;
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::Range<std::size_t>(0, opcatalog::all_cases().size()),
                         [](const ::testing::TestParamInfo<std::size_t>& info) {
                           std::string name = opcatalog::all_cases().at(info.param).name;
                           for (auto& ch : name) {
                             if (!std::isalnum(static_cast<unsigned char>(ch))) ch = '_';
                           }
                           return name;
                         });

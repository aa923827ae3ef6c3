#include "causalproto/error.hpp"
#include "causalproto/intervention.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

namespace cp = causalproto;
namespace iv = causalproto::intervention;

namespace {

// D = 1 fusion with logits (p_s, 0) for non-negative p_s: the hidden layer
// copies (z_c, p_s) and the output reads only p_s.
cp::model::FusionNet context_logit_net() {
  std::mt19937_64 rng(0);
  cp::model::FusionNet f(1, 2, 2, rng);
  f.net().hidden.weight = cp::Matrix::Identity(2, 2);
  f.net().hidden.bias = cp::Matrix::Zero(1, 2);
  f.net().output.weight.resize(2, 2);
  f.net().output.weight << 0, 0, 1, 0;
  f.net().output.bias = cp::Matrix::Zero(1, 2);
  return f;
}

cp::Vector softmax(const cp::Vector& l) {
  cp::Vector e = (l.array() - l.maxCoeff()).exp();
  return e / e.sum();
}

}  // namespace

TEST(Intervene, TwoContextHandCase) {
  const auto f = context_logit_net();
  cp::proto::SpuriousLibrary lib;
  lib.prototypes.resize(2, 1);
  lib.prototypes << 0.0, std::log(3.0);
  const auto out = iv::intervene(cp::Vector::Zero(1), lib, f);
  EXPECT_NEAR(out.probs(0), 0.625, 1e-12);
  EXPECT_NEAR(out.probs(1), 0.375, 1e-12);
  ASSERT_EQ(out.per_context.rows(), 2);
  EXPECT_NEAR(out.per_context(1, 0), 0.75, 1e-12);
}

TEST(Intervene, SingleContextIsPlainSoftmax) {
  std::mt19937_64 rng(1);
  cp::model::FusionNet f(4, 8, 3, rng);
  auto lib = cp::proto::SpuriousLibrary::random(1, 4, 1.0, rng);
  const cp::Vector z = cp::Vector::Random(4);
  const auto expected = softmax(f.logits(z, lib.prototypes.row(0).transpose()));
  for (auto mode : {iv::PoolingMode::arithmetic, iv::PoolingMode::geometric}) {
    iv::Options opt;
    opt.mode = mode;
    const auto out = iv::intervene(z, lib, f, opt);
    EXPECT_LT((out.probs - expected).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Intervene, ContextFreeFusionIgnoresM) {
  std::mt19937_64 rng(2);
  cp::model::FusionNet f(3, 6, 3, rng);
  // Zero the rows of the hidden weight that read p_s.
  f.net().hidden.weight.bottomRows(3).setZero();
  auto lib = cp::proto::SpuriousLibrary::random(7, 3, 1.0, rng);
  const cp::Vector z = cp::Vector::Random(3);
  const auto expected = softmax(f.logits(z, cp::Vector::Zero(3)));
  const auto out = iv::intervene(z, lib, f);
  EXPECT_LT((out.probs - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Intervene, SumsToOneOverRandomDraws) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 1000; ++t) {
    cp::model::FusionNet f(3, 5, 4, rng);
    auto lib = cp::proto::SpuriousLibrary::random(1 + t % 6, 3, 2.0, rng);
    const auto out = iv::intervene(cp::Vector::Random(3) * 5.0, lib, f);
    ASSERT_NEAR(out.probs.sum(), 1.0, 1e-6);
    ASSERT_TRUE((out.probs.array() >= 0).all());
  }
}

TEST(Intervene, BatchAndTapeAgree) {
  std::mt19937_64 rng(4);
  cp::model::FusionNet f(3, 6, 3, rng);
  auto lib = cp::proto::SpuriousLibrary::random(4, 3, 1.0, rng);
  cp::Matrix z = cp::Matrix::Random(5, 3);
  const cp::Matrix batch = iv::intervene_batch(z, lib.prototypes, f);
  cp::ag::Tape tape;
  cp::nn::Binding b(tape, false);
  const cp::Matrix logp =
      iv::intervened_log_probs(b, tape.constant(z), tape.constant(lib.prototypes), f).value();
  for (int i = 0; i < 5; ++i) {
    const auto one = iv::intervene(z.row(i).transpose(), lib, f);
    EXPECT_LT((batch.row(i).transpose() - one.probs).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((logp.row(i).array().exp().matrix().transpose() - one.probs).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Intervene, WeightsAreNormalised) {
  iv::Options opt;
  EXPECT_EQ(iv::context_weights(opt, 4), std::vector<double>(4, 0.25));
  opt.weights = {1, 3};
  const auto w = iv::context_weights(opt, 2);
  EXPECT_DOUBLE_EQ(w[0], 0.25);
  EXPECT_DOUBLE_EQ(w[1], 0.75);
  opt.weights = {1, 2, 3};
  EXPECT_THROW(iv::context_weights(opt, 2), cp::ContractViolation);
}

TEST(Intervene, DimensionMismatchAndEmptyLibrary) {
  std::mt19937_64 rng(5);
  cp::model::FusionNet f(3, 6, 3, rng);
  auto lib = cp::proto::SpuriousLibrary::random(2, 3, 1.0, rng);
  EXPECT_THROW(iv::intervene(cp::Vector::Zero(2), lib, f), cp::ContractViolation);
  cp::proto::SpuriousLibrary empty;
  empty.prototypes.resize(0, 3);
  EXPECT_THROW(iv::intervene(cp::Vector::Zero(3), empty, f), cp::ContractViolation);
}

TEST(ConditionalPredict, MatchesCausalProbs) {
  cp::proto::CausalLibrary lib;
  lib.prototypes.resize(2, 1);
  lib.prototypes << 0.0, 1.0;
  lib.class_of = {0, 1};
  lib.provenance.assign(2, std::nullopt);
  lib.num_classes = 2;
  const auto p = iv::conditional_predict(cp::Vector::Zero(1), lib);
  EXPECT_NEAR(p(0), 0.7311, 1e-4);
  EXPECT_NEAR(p(1), 0.2689, 1e-4);
}

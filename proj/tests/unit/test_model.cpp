#include "causalproto/error.hpp"
#include "causalproto/model.hpp"

#include <gtest/gtest.h>

#include <random>

namespace cp = causalproto;
namespace m = causalproto::model;

namespace {

m::EncoderSpec tiny_spec() {
  m::EncoderSpec s;
  s.latent_dim = 6;
  s.image_size = 16;
  s.channels = {4, 8};
  return s;
}

cp::Image random_image(int size, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  cp::Image img(size, size);
  for (double& v : img.data) v = u(rng);
  return img;
}

}  // namespace

TEST(Encoder, ZeroImageGivesFiniteLatents) {
  std::mt19937_64 rng(1);
  m::DualEncoder enc(tiny_spec(), rng);
  const auto z = enc.encode(cp::Image(16, 16, 0.0));
  ASSERT_EQ(z.z_c.size(), 6);
  ASSERT_EQ(z.z_s.size(), 6);
  EXPECT_TRUE(z.z_c.allFinite());
  EXPECT_TRUE(z.z_s.allFinite());
}

TEST(Encoder, Deterministic) {
  std::mt19937_64 rng(2);
  m::DualEncoder enc(tiny_spec(), rng);
  const auto img = random_image(16, rng);
  const auto a = enc.encode(img);
  const auto b = enc.encode(img);
  EXPECT_EQ(a.z_c, b.z_c);
  EXPECT_EQ(a.z_s, b.z_s);
}

TEST(Encoder, BatchEqualsLoop) {
  std::mt19937_64 rng(3);
  for (bool share : {false, true}) {
    auto spec = tiny_spec();
    spec.share_stem = share;
    m::DualEncoder enc(spec, rng);
    std::vector<cp::Image> imgs;
    for (int i = 0; i < 5; ++i) imgs.push_back(random_image(16, rng));
    const auto batch = enc.encode_batch(imgs);
    for (int i = 0; i < 5; ++i) {
      const auto one = enc.encode(imgs[i]);
      EXPECT_LT((batch[i].z_c - one.z_c).cwiseAbs().maxCoeff(), 1e-12);
      EXPECT_LT((batch[i].z_s - one.z_s).cwiseAbs().maxCoeff(), 1e-12);
    }
  }
}

TEST(Encoder, BranchesAreIndependentWithoutSharedStem) {
  std::mt19937_64 rng(4);
  m::DualEncoder enc(tiny_spec(), rng);
  const auto img = random_image(16, rng);
  const auto before = enc.encode(img);
  std::vector<cp::nn::ParamRef> params;
  enc.collect("enc", params);
  for (auto& p : params) {
    if (p.name.find(".spurious") != std::string::npos) p.value->array() += 0.1;
  }
  const auto after = enc.encode(img);
  EXPECT_EQ(before.z_c, after.z_c);
  EXPECT_NE(before.z_s, after.z_s);
}

TEST(Encoder, ShapeMismatchIsContractViolation) {
  std::mt19937_64 rng(5);
  m::DualEncoder enc(tiny_spec(), rng);
  EXPECT_THROW(enc.encode(cp::Image(17, 17)), cp::ContractViolation);
}

TEST(Fusion, ZeroNetworkGivesZeroLogits) {
  std::mt19937_64 rng(6);
  m::FusionNet f(2, 3, 4, rng);
  for (auto* l : {&f.net().hidden, &f.net().output}) {
    l->weight.setZero();
    l->bias.setZero();
  }
  const auto logits = f.logits(Eigen::Vector2d(0.3, -1.0), Eigen::Vector2d(2.0, 1.0));
  ASSERT_EQ(logits.size(), 4);
  EXPECT_EQ(logits, cp::Vector::Zero(4));
}

TEST(Fusion, HandSetWeights) {
  // Hidden: identity on (z_c, p_s) in R^4 (ReLU keeps positives), output W2.
  std::mt19937_64 rng(7);
  m::FusionNet f(2, 4, 2, rng);
  f.net().hidden.weight = cp::Matrix::Identity(4, 4);
  f.net().hidden.bias = cp::Matrix::Zero(1, 4);
  f.net().output.weight.resize(4, 2);
  f.net().output.weight << 1, 0, 0, 2, -1, 1, 0.5, 0.5;
  f.net().output.bias.resize(1, 2);
  f.net().output.bias << 0.1, -0.2;
  const Eigen::Vector2d zc(1.0, 2.0), ps(3.0, -4.0);
  // relu([1, 2, 3, -4]) = [1, 2, 3, 0]
  const auto logits = f.logits(zc, ps);
  EXPECT_NEAR(logits(0), 1 * 1 + 2 * 0 + 3 * -1 + 0.1, 1e-12);
  EXPECT_NEAR(logits(1), 1 * 0 + 2 * 2 + 3 * 1 - 0.2, 1e-12);
}

TEST(Fusion, DifferentContextsGiveDifferentLogits) {
  std::mt19937_64 rng(8);
  m::FusionNet f(3, 16, 3, rng);
  const cp::Vector zc = cp::Vector::Constant(3, 0.5);
  EXPECT_NE(f.logits(zc, cp::Vector::Constant(3, 1.0)), f.logits(zc, cp::Vector::Constant(3, -1.0)));
}

TEST(Fusion, DimensionMismatch) {
  std::mt19937_64 rng(9);
  m::FusionNet f(3, 4, 2, rng);
  EXPECT_THROW(f.logits(cp::Vector::Zero(3), cp::Vector::Zero(2)), cp::ContractViolation);
}

TEST(Encoder, InvalidSpec) {
  auto s = tiny_spec();
  s.latent_dim = 0;
  EXPECT_THROW(m::validate(s), cp::ConfigError);
  s = tiny_spec();
  s.channels.clear();
  EXPECT_THROW(m::validate(s), cp::ConfigError);
}

#include "causalproto/error.hpp"
#include "causalproto/proto_spaces.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

namespace cp = causalproto;
namespace pr = causalproto::proto;

namespace {

pr::CausalLibrary lib_from(const cp::Matrix& protos, std::vector<int> class_of, int classes) {
  pr::CausalLibrary lib;
  lib.prototypes = protos;
  lib.class_of = std::move(class_of);
  lib.provenance.assign(lib.class_of.size(), std::nullopt);
  lib.num_classes = classes;
  return lib;
}

}  // namespace

TEST(Distance, KnownValuesAndSymmetry) {
  EXPECT_EQ(pr::distance(Eigen::Vector2d(0, 0), Eigen::Vector2d(3, 4)), 5.0);
  EXPECT_EQ(pr::distance(Eigen::Vector2d(0, 0), Eigen::Vector2d(3, 4), pr::DistanceKind::squared), 25.0);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g;
  for (int i = 0; i < 1000; ++i) {
    cp::Vector a(5), b(5);
    for (int d = 0; d < 5; ++d) {
      a(d) = g(rng);
      b(d) = g(rng);
    }
    EXPECT_EQ(pr::distance(a, a), 0.0);
    EXPECT_EQ(pr::distance(a, b), pr::distance(b, a));
  }
}

TEST(CausalProbs, HandCases) {
  cp::Matrix p(2, 1);
  p << 0.0, 1.0;
  const auto lib = lib_from(p, {0, 1}, 2);
  const auto eq = pr::causal_class_probs(cp::Vector(cp::Vector::Constant(1, 0.5)), lib);
  EXPECT_NEAR(eq(0), 0.5, 1e-12);
  const auto probs = pr::causal_class_probs(cp::Vector(cp::Vector::Zero(1)), lib);
  EXPECT_NEAR(probs(0), 0.7311, 1e-4);
  EXPECT_NEAR(probs(1), 0.2689, 1e-4);
  EXPECT_NEAR(probs(0), 1.0 / (1.0 + std::exp(-1.0)), 1e-12);

  cp::Matrix single(3, 1);
  single << 0, 4, -2;
  const auto one = pr::causal_class_probs(cp::Vector(cp::Vector::Constant(1, 7.0)), lib_from(single, {0, 0, 0}, 1));
  ASSERT_EQ(one.size(), 1);
  EXPECT_EQ(one(0), 1.0);
}

TEST(CausalProbs, NormalisedAndStable) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g;
  for (int t = 0; t < 1000; ++t) {
    auto lib = pr::CausalLibrary::random(3, 2, 4, 1.0, rng);
    cp::Vector z(4);
    const double scale = (t % 10 == 0) ? 300.0 : 1.0;  // distances up to ~1e3
    for (int d = 0; d < 4; ++d) z(d) = scale * g(rng);
    const auto p = pr::causal_class_probs(z, lib);
    ASSERT_TRUE(p.allFinite());
    EXPECT_NEAR(p.sum(), 1.0, 1e-6);
  }
}

TEST(Projection, HandArgmin) {
  cp::Matrix p(1, 1);
  p << 0.0;
  auto lib = lib_from(p, {0}, 1);
  cp::Matrix lat(3, 1);
  lat << 2.0, 0.5, 1.1;
  const auto out = pr::project_prototypes(lib, lat, {0, 0, 0}, {"a", "b", "c"});
  EXPECT_EQ(out.prototypes(0, 0), 0.5);
  EXPECT_EQ(*out.provenance[0], "b");
}

TEST(Projection, FixedPointSingletonAndIdempotence) {
  std::mt19937_64 rng(3);
  auto lib = pr::CausalLibrary::random(2, 2, 3, 1.0, rng);
  cp::Matrix lat = cp::Matrix::Random(9, 3);
  std::vector<int> labels{0, 0, 0, 0, 1, 1, 1, 1, 1};
  lat.row(0) = lib.prototypes.row(0);
  std::vector<std::string> ids;
  for (int i = 0; i < 9; ++i) ids.push_back("s" + std::to_string(i));
  const auto once = pr::project_prototypes(lib, lat, labels, ids);
  EXPECT_EQ(*once.provenance[0], "s0");
  EXPECT_TRUE(once.projected());
  for (int k = 0; k < once.size(); ++k) {
    bool found = false;
    for (int i = 0; i < 9; ++i) {
      if (labels[i] == once.class_of[k] && once.prototypes.row(k) == lat.row(i) &&
          *once.provenance[k] == ids[i]) {
        found = true;
      }
    }
    EXPECT_TRUE(found) << "prototype " << k;
  }
  const auto twice = pr::project_prototypes(once, lat, labels, ids);
  EXPECT_EQ(twice.prototypes, once.prototypes);
  EXPECT_EQ(twice.provenance, once.provenance);

  cp::Matrix one(1, 3);
  one << 4, 5, 6;
  auto single = pr::CausalLibrary::random(1, 3, 3, 1.0, rng);
  const auto s = pr::project_prototypes(single, one, {0}, {"only"});
  for (int k = 0; k < 3; ++k) EXPECT_EQ(s.prototypes.row(k), one.row(0));
}

TEST(Projection, MissingClassThrows) {
  std::mt19937_64 rng(4);
  auto lib = pr::CausalLibrary::random(2, 1, 2, 1.0, rng);
  EXPECT_THROW(pr::project_prototypes(lib, cp::Matrix::Zero(2, 2), {0, 0}, {"a", "b"}), cp::ContractViolation);
}

TEST(ClusterLoss, HandCases) {
  // tau = 0, one prototype at distance 2 -> 4
  cp::Matrix z(1, 2), p(1, 2);
  z << 0, 0;
  p << 2, 0;
  EXPECT_NEAR(pr::cluster_loss(z, pr::SpuriousLibrary{p}, 0.0), 4.0, 1e-12);

  // Every z on its own prototype, uniform assignment: attraction 0 and the
  // entropy term is close to -tau ln M when prototypes are far apart.
  const int m = 4;
  cp::Matrix protos(m, 2), zs(m, 2);
  for (int i = 0; i < m; ++i) protos.row(i) << 100.0 * i, 0.0;
  zs = protos;
  EXPECT_NEAR(pr::cluster_loss(zs, pr::SpuriousLibrary{protos}, 0.5), -0.5 * std::log(m), 1e-9);

  // Collapsed onto one prototype: entropy ~ 0, loss ~ attraction (= 0).
  cp::Matrix collapsed = protos.row(0).replicate(6, 1);
  EXPECT_NEAR(pr::cluster_loss(collapsed, pr::SpuriousLibrary{protos}, 0.5), 0.0, 1e-9);
}

TEST(ClusterLoss, TapeMatchesFrozen) {
  std::mt19937_64 rng(5);
  auto lib = pr::SpuriousLibrary::random(5, 3, 1.0, rng);
  cp::Matrix z = cp::Matrix::Random(7, 3);
  cp::ag::Tape tape;
  EXPECT_NEAR(pr::cluster_loss(tape.constant(z), tape.constant(lib.prototypes), 0.3).scalar(),
              pr::cluster_loss(z, lib, 0.3), 1e-12);
}

TEST(Entropy, MaximalAtUniform) {
  cp::ag::Tape tape;
  cp::Matrix u = cp::Matrix::Constant(1, 8, 1.0 / 8);
  EXPECT_NEAR(pr::entropy(tape.constant(u)).scalar(), std::log(8.0), 1e-12);
  cp::Matrix nu(1, 8);
  nu << 0.3, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1;
  EXPECT_LT(pr::entropy(tape.constant(nu)).scalar(), std::log(8.0));
  cp::Matrix one_hot = cp::Matrix::Zero(1, 8);
  one_hot(0, 2) = 1.0;
  EXPECT_EQ(pr::entropy(tape.constant(one_hot)).scalar(), 0.0);
}

TEST(ProtoLoss, HandCases) {
  // Own class at squared distance 0.25, other class at 0.16, margin 1.
  cp::Matrix p(2, 1), z(1, 1);
  p << 0.5, -0.4;
  z << 0.0;
  auto lib = lib_from(p, {0, 1}, 2);
  EXPECT_NEAR(pr::proto_loss(z, {0}, lib, 1.0), 0.25 + (1.0 - 0.16), 1e-12);

  // On an own-class prototype, other class beyond the margin.
  cp::Matrix q(2, 1), w(1, 1);
  q << 0.0, 5.0;
  w << 0.0;
  EXPECT_EQ(pr::proto_loss(w, {0}, lib_from(q, {0, 1}, 2), 1.0), 0.0);

  // All-zero latents and prototypes: margin exactly.
  EXPECT_EQ(pr::proto_loss(cp::Matrix::Zero(3, 2), {0, 1, 0}, lib_from(cp::Matrix::Zero(2, 2), {0, 1}, 2), 1.0),
            1.0);
  // Single-class library: separation term is 0.
  EXPECT_EQ(pr::proto_loss(cp::Matrix::Zero(1, 2), {0}, lib_from(cp::Matrix::Zero(1, 2), {0}, 1), 1.0), 0.0);
}

TEST(Library, PerClassInterpretations) {
  EXPECT_EQ(pr::prototypes_per_class(10, false, 3), 10);
  EXPECT_EQ(pr::prototypes_per_class(9, true, 3), 3);
  EXPECT_EQ(pr::prototypes_per_class(10, true, 3), 3);  // floor split
  EXPECT_THROW(pr::prototypes_per_class(2, true, 3), cp::ConfigError);
  EXPECT_THROW(pr::prototypes_per_class(0, false, 3), cp::ConfigError);
}

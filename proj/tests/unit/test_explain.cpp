#include "causalproto/error.hpp"
#include "causalproto/explain.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

namespace cp = causalproto;
namespace ex = causalproto::explain;
namespace fs = std::filesystem;

namespace {

cp::proto::CausalLibrary projected_lib(const cp::Matrix& p, std::vector<int> class_of) {
  cp::proto::CausalLibrary lib;
  lib.prototypes = p;
  lib.class_of = std::move(class_of);
  lib.num_classes = 2;
  for (Eigen::Index i = 0; i < p.rows(); ++i) lib.provenance.push_back("s" + std::to_string(i));
  return lib;
}

// Mean intensity of the top-left quadrant, red channel (channel-major rows).
cp::Matrix quadrant_encoder(const cp::Matrix& x) {
  const int hw = static_cast<int>(x.cols() / 3);
  const int side = static_cast<int>(std::lround(std::sqrt(hw)));
  cp::Matrix z(x.rows(), 1);
  for (Eigen::Index n = 0; n < x.rows(); ++n) {
    double s = 0;
    for (int y = 0; y < side / 2; ++y)
      for (int c = 0; c < side / 2; ++c) s += x(n, y * side + c);
    z(n, 0) = s / (side * side / 4.0);
  }
  return z;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Nearest, HandOrdering) {
  cp::Matrix p(3, 1);
  p << 0.5, 0.2, 0.9;
  const auto lib = projected_lib(p, {0, 1, 0});
  const auto top = ex::nearest_prototypes(cp::Vector::Zero(1), lib, 2);
  ASSERT_EQ(top.size(), 2u);
  EXPECT_EQ(top[0].index, 1);
  EXPECT_EQ(top[1].index, 0);
  EXPECT_EQ(top[0].provenance, "s1");
  const auto exact = ex::nearest_prototypes(cp::Vector::Constant(1, 0.9), lib, 1);
  EXPECT_EQ(exact[0].index, 2);
  EXPECT_EQ(exact[0].distance, 0.0);
  const auto all = ex::nearest_prototypes(cp::Vector::Constant(1, 0.3), lib, 3);
  for (std::size_t i = 1; i < all.size(); ++i) EXPECT_LE(all[i - 1].distance, all[i].distance);
}

TEST(Nearest, UnprojectedLibraryIsRefused) {
  cp::Matrix p(2, 1);
  p << 0, 1;
  auto lib = projected_lib(p, {0, 1});
  lib.provenance[1].reset();
  EXPECT_THROW(ex::nearest_prototypes(cp::Vector::Zero(1), lib, 1), cp::ContractViolation);
}

TEST(Heatmap, ConstantImageGivesZeros) {
  const cp::Image img(16, 16, 0.4);
  const auto h = ex::similarity_heatmap(img, quadrant_encoder, cp::Vector::Constant(1, 1.0));
  EXPECT_EQ(h, cp::Matrix::Zero(16, 16));
}

TEST(Heatmap, NormalisedAndLocalised) {
  cp::Image img(16, 16, 0.1);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) img.at(y, x, 0) = 0.9;
  const auto h = ex::similarity_heatmap(img, quadrant_encoder, cp::Vector::Constant(1, 0.9));
  EXPECT_NEAR(h.maxCoeff(), 1.0, 1e-12);
  EXPECT_GE(h.minCoeff(), 0.0);
  std::vector<std::uint8_t> tl(256, 0), br(256, 0);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) {
      if (y < 8 && x < 8) tl[y * 16 + x] = 1;
      if (y >= 8 && x >= 8) br[y * 16 + x] = 1;
    }
  EXPECT_GT(ex::region_mean(h, tl), ex::region_mean(h, br));
  EXPECT_EQ(ex::region_mean(h, std::vector<std::uint8_t>(256, 0)), 0.0);
}

TEST(Heatmap, PatchLargerThanImage) {
  ex::HeatmapOptions opt;
  opt.patch = 20;
  EXPECT_THROW(ex::similarity_heatmap(cp::Image(16, 16), quadrant_encoder, cp::Vector::Zero(1), opt),
               cp::ContractViolation);
}

TEST(Report, EmptyAndDeterministic) {
  const fs::path dir = fs::temp_directory_path() / "causalproto_test_report";
  fs::remove_all(dir);
  ex::render_report({}, dir);
  EXPECT_TRUE(fs::exists(dir / "index.html"));
  EXPECT_EQ(slurp(dir / "index.html").find("<img"), std::string::npos);

  ex::Explainer e;
  cp::Matrix p(2, 1);
  p << 0.2, 0.8;
  e.library = projected_lib(p, {0, 1});
  e.encode = quadrant_encoder;
  e.image_size = 16;
  e.predict = [](const cp::Vector& z) {
    cp::Vector probs(2);
    probs << 1 - z(0), z(0);
    return std::make_pair(probs, cp::Matrix());
  };
  e.sources["s0"] = cp::Image(16, 16, 0.3);
  cp::Image img(16, 16, 0.1);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) img.at(y, x, 0) = 0.7;
  const auto bundle = e.explain(img, "x", 2, 1);
  EXPECT_EQ(bundle.topk.size(), 2u);
  EXPECT_FALSE(bundle.topk[0].thumbnail.empty() && bundle.topk[1].thumbnail.empty());
  ASSERT_EQ(bundle.heatmap.rows(), 16);

  const fs::path d1 = fs::temp_directory_path() / "causalproto_test_report1";
  const fs::path d2 = fs::temp_directory_path() / "causalproto_test_report2";
  fs::remove_all(d1);
  fs::remove_all(d2);
  auto b3 = e.explain(img, "x", 2, 1);
  b3.topk.push_back(b3.topk[0]);  // k = 3 panel
  ex::render_report({b3}, d1);
  ex::render_report({b3}, d2);
  const auto html = slurp(d1 / "index.html");
  EXPECT_EQ(html, slurp(d2 / "index.html"));
  std::size_t count = 0;
  for (auto pos = html.find("<img"); pos != std::string::npos; pos = html.find("<img", pos + 1)) ++count;
  EXPECT_EQ(count, 4u);
}

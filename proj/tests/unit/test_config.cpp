#include "causalproto/config.hpp"
#include "causalproto/error.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>

namespace cp = causalproto;
namespace cf = causalproto::config;

TEST(Config, JsonRoundTrip) {
  cf::RunConfig c;
  c.train.beta = 0.25;
  c.train.ablation = cp::train::Ablation::parse("no_mi+no_do");
  c.data.rho_test = 0.3;
  c.seeds = {4, 5};
  const auto back = cf::from_json(cf::to_json(c));
  EXPECT_EQ(cf::to_json(back), cf::to_json(c));
  EXPECT_EQ(back.train.ablation.variant_name(), "no_mi+no_do");
  EXPECT_EQ(cf::config_hash(back), cf::config_hash(c));
}

TEST(Config, UnknownKeysAndWrongTypes) {
  EXPECT_THROW(cf::from_json(R"({"betta": 1})"), cp::ConfigError);
  EXPECT_THROW(cf::from_json(R"({"data": {"rho": 1}})"), cp::ConfigError);
  EXPECT_THROW(cf::from_json(R"({"epochs": "ten"})"), cp::ConfigError);
  EXPECT_THROW(cf::from_json(R"({"epochs": 1.5})"), cp::ConfigError);
  EXPECT_THROW(cf::from_json("{not json"), cp::ConfigError);
  EXPECT_THROW(cf::from_json(R"({"ablation": "erm+no_mi"})"), cp::ConfigError);
  EXPECT_THROW(cf::from_json(R"({"beta": -1})"), cp::ConfigError);
  EXPECT_THROW(cf::load("/nonexistent/config.json"), cp::ConfigError);
}

TEST(Config, Overrides) {
  cf::RunConfig c;
  cf::apply_override(c, "ablation=no_mi");
  EXPECT_EQ(c.train.ablation.variant_name(), "no_mi");
  cf::apply_override(c, "data.rho_train=0.5");
  EXPECT_EQ(c.data.rho_train, 0.5);
  cf::apply_override(c, "encoder.latent_dim=16");
  EXPECT_EQ(c.train.encoder.latent_dim, 16);
  cf::apply_override(c, "learning_rate=1");
  EXPECT_EQ(c.train.learning_rate, 1.0);
  cf::apply_override(c, "data.image_size=24");
  EXPECT_EQ(c.train.encoder.image_size, 24);
  EXPECT_THROW(cf::apply_override(c, "nope=1"), cp::ConfigError);
  EXPECT_THROW(cf::apply_override(c, "data=1"), cp::ConfigError);
  EXPECT_THROW(cf::apply_override(c, "epochs"), cp::ConfigError);
  EXPECT_THROW(cf::apply_override(c, "ablation=erm+no_mi"), cp::ConfigError);
}

TEST(Config, HashChangesIffEffectiveFieldChanges) {
  cf::RunConfig a;
  const auto h = cf::config_hash(a);
  EXPECT_EQ(h.size(), 40u);
  cf::RunConfig same;
  cf::apply_override(same, "beta=0.5");  // default value
  EXPECT_EQ(cf::config_hash(same), h);
  for (const char* o : {"beta=0.51", "data.seed=9", "encoder.channels=[8,16]", "ablation=no_do", "seeds=[1,2]",
                        "data.overlap=true"}) {
    cf::RunConfig b;
    cf::apply_override(b, o);
    EXPECT_NE(cf::config_hash(b), h) << o;
  }
}

TEST(Config, OutputRootFromEnvironment) {
  ::setenv("CAUSALPROTO_OUT", "/tmp/somewhere", 1);
  EXPECT_EQ(cf::output_root(), std::filesystem::path("/tmp/somewhere"));
  ::unsetenv("CAUSALPROTO_OUT");
  EXPECT_EQ(cf::output_root("fallback"), std::filesystem::path("fallback"));
}

TEST(Manifest, RoundTripAndTamperDetection) {
  const auto dir = std::filesystem::temp_directory_path() / "causalproto_test_run";
  std::filesystem::remove_all(dir);
  cf::RunManifest m;
  m.config.train.epochs = 3;
  m.hash = cf::config_hash(m.config);
  m.command = "causalproto train";
  m.artifacts = {"model.ckpt"};
  m.write(dir);
  const auto back = cf::RunManifest::read(dir);
  EXPECT_EQ(back.hash, m.hash);
  EXPECT_EQ(back.config.train.epochs, 3);
  auto bad = m;
  bad.hash = std::string(40, '0');
  EXPECT_THROW(cf::RunManifest::from_json(bad.to_json()), cp::ConfigError);
}

TEST(Config, PresetsLoad) {
  const std::filesystem::path root = CAUSALPROTO_SOURCE_DIR;
  const auto desk = cf::load(root / "presets" / "desk.json");
  const auto fullscale = cf::load(root / "presets" / "fullscale.json");
  const auto shift = cf::load(root / "presets" / "shift.json");
  EXPECT_EQ(fullscale.train.epochs, 100);
  EXPECT_EQ(fullscale.train.learning_rate, 1e-4);
  EXPECT_EQ(fullscale.train.batch_size, 32);
  EXPECT_EQ(fullscale.train.K_per_class, 10);
  EXPECT_EQ(fullscale.train.M, 50);
  EXPECT_EQ(fullscale.train.lambda1, 0.1);
  EXPECT_EQ(fullscale.train.lambda2, 0.1);
  EXPECT_EQ(fullscale.train.beta, 0.5);
  EXPECT_EQ(shift.data.rho_train, 0.9);
  EXPECT_EQ(shift.data.rho_test, 0.0);
  EXPECT_EQ(desk.seeds.size(), 3u);
}

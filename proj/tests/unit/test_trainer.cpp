#include "causalproto/error.hpp"
#include "causalproto/trainer.hpp"

#include "fixtures.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

namespace cp = causalproto;
namespace tr = causalproto::train;
using cp::testing::tiny_config;

namespace {

tr::Batch tiny_batch(int n = 2, std::uint64_t seed = 3) {
  return cp::testing::batch_of(cp::testing::random_samples(n, 16, 3, seed), 16);
}

}  // namespace

TEST(Ablation, ParseAndNames) {
  EXPECT_EQ(tr::Ablation::parse("full").variant_name(), "full");
  EXPECT_EQ(tr::Ablation::parse("").variant_name(), "full");
  EXPECT_EQ(tr::Ablation::parse("no_mi").variant_name(), "no_mi");
  EXPECT_EQ(tr::Ablation::parse("no_do,no_mi").variant_name(), "no_mi+no_do");
  EXPECT_EQ(tr::Ablation::parse("erm_baseline").variant_name(), "erm");
  EXPECT_THROW(tr::Ablation::parse("erm+no_mi"), cp::ConfigError);
  EXPECT_THROW(tr::Ablation::parse("no_such"), cp::ConfigError);
  const auto v = tr::standard_variants();
  ASSERT_EQ(v.size(), 6u);
  EXPECT_EQ(v.front().variant_name(), "full");
  EXPECT_EQ(v.back().variant_name(), "erm");
}

TEST(Objective, MatchesStraightLineRecomputation) {
  for (bool shared : {false, true}) {
    auto cfg = tiny_config();
    cfg.lambda1 = 0.3;
    cfg.lambda2 = 0.2;
    cfg.beta = 0.4;
    cfg.ablation.shared_proto = shared;
    auto state = tr::TrainState::create(cfg);
    const auto batch = tiny_batch(2);
    const auto terms = tr::total_loss(batch, state, cfg);
    const auto [zc, zs] = state.model.encoder.encode_matrix(batch.input);
    const auto m = cp::testing::manual_terms(state.model, cfg, zc, zs, batch.labels);
    EXPECT_NEAR(terms.ce, m.ce, 1e-10);
    EXPECT_NEAR(terms.cluster, m.cluster, 1e-10);
    EXPECT_NEAR(terms.proto, m.proto, 1e-10);
    EXPECT_NEAR(terms.mi, m.mi, 1e-10);
    EXPECT_NEAR(terms.total, m.ce + 0.3 * m.cluster + 0.2 * m.proto + 0.4 * m.mi, 1e-10);
  }
}

TEST(Objective, ReducesToCrossEntropy) {
  auto cfg = tiny_config();
  cfg.lambda1 = cfg.lambda2 = cfg.beta = 0.0;
  auto state = tr::TrainState::create(cfg);
  const auto t = tr::total_loss(tiny_batch(4), state, cfg);
  EXPECT_NEAR(t.total, t.ce, 1e-12);
}

TEST(Objective, AblationsZeroCoefficients) {
  auto cfg = tiny_config();
  cfg.lambda1 = 0.5;
  cfg.beta = 0.5;
  cfg.lambda2 = 0.0;
  const auto batch = tiny_batch(4);
  auto state = tr::TrainState::create(cfg);
  auto c1 = cfg;
  c1.ablation.no_cluster = true;
  c1.ablation.no_mi = true;
  const auto t = tr::total_loss(batch, state, c1);
  EXPECT_NEAR(t.total, t.ce, 1e-12);
}

TEST(Objective, NoDoUsesConditionalProbabilities) {
  auto cfg = tiny_config();
  cfg.ablation.no_do = true;
  cfg.lambda1 = cfg.lambda2 = cfg.beta = 0.0;
  auto state = tr::TrainState::create(cfg);
  const auto batch = tiny_batch(3);
  const auto zc = state.model.encoder.encode_causal_matrix(batch.input);
  double ce = 0;
  for (int i = 0; i < 3; ++i) {
    const auto p = cp::proto::causal_class_probs(cp::Vector(zc.row(i).transpose()), state.model.causal);
    ce -= std::log(p(batch.labels[i])) / 3;
  }
  EXPECT_NEAR(tr::total_loss(batch, state, cfg).ce, ce, 1e-10);
}

TEST(Objective, EmptyBatchAndBadLabel) {
  auto cfg = tiny_config();
  auto state = tr::TrainState::create(cfg);
  tr::Batch empty;
  empty.input.resize(0, 3 * 16 * 16);
  EXPECT_THROW(tr::total_loss(empty, state, cfg), cp::ContractViolation);
  auto b = tiny_batch(2);
  b.labels[0] = 7;
  EXPECT_THROW(tr::total_loss(b, state, cfg), cp::ContractViolation);
}

TEST(Objective, NonFiniteTermIsNamed) {
  auto cfg = tiny_config();
  auto state = tr::TrainState::create(cfg);
  state.model.spurious.prototypes(0, 0) = std::nan("");
  try {
    tr::total_loss(tiny_batch(2), state, cfg);
    FAIL() << "expected NumericError";
  } catch (const cp::NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("ce"), std::string::npos) << e.what();
  }
}

class Gradients : public ::testing::TestWithParam<cp::testing::Term> {};

TEST_P(Gradients, CentralDifferences) {
  auto cfg = tiny_config();
  cfg.lambda1 = 0.1;
  cfg.lambda2 = 0.1;
  cfg.beta = 0.5;
  auto state = tr::TrainState::create(cfg);
  cp::testing::jitter_biases(state.model, cfg);
  const auto r = cp::testing::check_gradients(state.model, cfg, tiny_batch(2, 5), GetParam());
  EXPECT_GT(r.checked, 50);
  EXPECT_LT(r.rel_error, 1e-4) << cp::testing::term_name(GetParam());
}

INSTANTIATE_TEST_SUITE_P(Terms, Gradients,
                         ::testing::Values(cp::testing::Term::ce, cp::testing::Term::cluster,
                                           cp::testing::Term::proto, cp::testing::Term::mi,
                                           cp::testing::Term::total),
                         [](const auto& info) { return std::string(cp::testing::term_name(info.param)); });

TEST(Training, ZeroLearningRateKeepsParameters) {
  auto cfg = tiny_config();
  cfg.learning_rate = 0.0;
  cfg.weight_decay = 0.0;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  cfg.keep_best = false;
  cfg.projection_period = 100;
  const auto data = cp::testing::random_samples(8, 16, 3, 1);
  const auto init = tr::TrainState::create(cfg);
  const auto res = tr::train(cfg, data, {});
  auto a = const_cast<tr::Model&>(init.model).main_params(cfg);
  auto b = const_cast<tr::Model&>(res.state.model).main_params(cfg);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name == "proto.causal") continue;  // final projection moves these
    EXPECT_EQ(*a[i].value, *b[i].value) << a[i].name;
  }
}

TEST(Training, DeterministicTrace) {
  auto cfg = tiny_config();
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.learning_rate = 1e-2;
  const auto data = cp::testing::random_samples(12, 16, 3, 2);
  const auto a = tr::train(cfg, data, data);
  const auto b = tr::train(cfg, data, data);
  ASSERT_EQ(a.log.size(), 2u);
  for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(tr::to_json_line(a.log[i]), tr::to_json_line(b.log[i]));
}

TEST(Training, LogNamesVariant) {
  auto cfg = tiny_config();
  cfg.epochs = 1;
  cfg.ablation = tr::Ablation::parse("no_mi");
  const auto data = cp::testing::random_samples(6, 16, 3, 2);
  const auto r = tr::train(cfg, data, {});
  EXPECT_NE(tr::to_json_line(r.log[0]).find("\"variant\":\"no_mi\""), std::string::npos);
}

TEST(Training, ProjectionAnchorsPrototypes) {
  auto cfg = tiny_config();
  cfg.epochs = 1;
  const auto data = cp::testing::random_samples(9, 16, 3, 4);
  const auto r = tr::train(cfg, data, {});
  const auto& lib = r.state.model.causal;
  ASSERT_TRUE(lib.projected());
  const auto lat = tr::compute_latents(r.state.model, cfg, data);
  for (int k = 0; k < lib.size(); ++k) {
    bool found = false;
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (data[i].sample_id == *lib.provenance[k]) {
        EXPECT_EQ(lib.prototypes.row(k), lat.z_c.row(static_cast<Eigen::Index>(i)));
        EXPECT_EQ(data[i].label, lib.class_of[k]);
        found = true;
      }
    }
    EXPECT_TRUE(found);
  }
}

TEST(Training, DivergenceAbortsWithDump) {
  auto cfg = tiny_config();
  cfg.epochs = 1;
  cfg.divergence_threshold = -1.0;  // any loss counts as divergence
  const auto dir = std::filesystem::temp_directory_path() / "causalproto_test_diverge";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  tr::TrainOptions opt;
  opt.dump_dir = dir;
  const auto data = cp::testing::random_samples(4, 16, 3, 2);
  EXPECT_THROW(tr::train(cfg, data, {}, opt), cp::NumericError);
  EXPECT_TRUE(std::filesystem::exists(dir / "divergence_dump.ckpt"));
}

TEST(Checkpoint, RoundTripAndResume) {
  auto cfg = tiny_config();
  cfg.epochs = 1;
  cfg.batch_size = 3;
  const auto data = cp::testing::random_samples(6, 16, 3, 7);
  const auto path = std::filesystem::temp_directory_path() / "causalproto_test_ckpt.bin";
  auto state = tr::TrainState::create(cfg);
  const auto b1 = cp::testing::batch_of({data[0], data[1], data[2]}, 16);
  const auto b2 = cp::testing::batch_of({data[3], data[4], data[5]}, 16);
  tr::train_step(state, b1, cfg, 1e-2);
  tr::save_checkpoint(path, state, "{\"k\":1}");
  auto loaded = tr::load_checkpoint(path, cfg);
  EXPECT_EQ(loaded.config_json, "{\"k\":1}");
  EXPECT_EQ(tr::checkpoint_config(path), "{\"k\":1}");
  const auto ta = tr::train_step(state, b2, cfg, 1e-2);
  const auto tb = tr::train_step(loaded.state, b2, cfg, 1e-2);
  EXPECT_EQ(ta.total, tb.total);
  auto pa = state.model.all_params();
  auto pb = loaded.state.model.all_params();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(*pa[i].value, *pb[i].value) << pa[i].name;
}

TEST(Checkpoint, MismatchedShapesAndGarbage) {
  auto cfg = tiny_config();
  const auto path = std::filesystem::temp_directory_path() / "causalproto_test_ckpt2.bin";
  tr::save_checkpoint(path, tr::TrainState::create(cfg), "{}");
  auto other = cfg;
  other.encoder.latent_dim = 5;
  EXPECT_THROW(tr::load_checkpoint(path, other), cp::IoError);
  {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os << "not a checkpoint";
  }
  EXPECT_THROW(tr::load_checkpoint(path, cfg), cp::IoError);
}

TEST(Erm, TrainsAboveChanceOnAlignedData) {
  cp::datagen::ScmConfig d;
  d.image_size = 16;
  d.rho_train = d.rho_test = 1.0;
  d.samples_per_split = 150;
  d.seed = 3;
  auto cfg = tiny_config();
  cfg.ablation = tr::Ablation::parse("erm");
  cfg.encoder.channels = {4, 8};
  cfg.encoder.latent_dim = 8;
  cfg.learning_rate = 1e-2;
  cfg.epochs = 5;
  const auto train_set = cp::datagen::generate_dataset(d, cp::datagen::Split::train);
  const auto test_set = cp::datagen::generate_dataset(d, cp::datagen::Split::test);
  const auto r = tr::train(cfg, train_set, {});
  const auto rep = tr::evaluate(r.state.model, cfg, train_set, test_set);
  EXPECT_GT(rep.bacc, 0.5);
  EXPECT_TRUE(std::isnan(rep.purity));
}

TEST(Suite, RowCountAndCsvRoundTrip) {
  auto cfg = tiny_config();
  cfg.epochs = 1;
  cfg.eval_q_steps = 5;
  const auto data = cp::testing::random_samples(9, 16, 3, 8);
  const auto rows = tr::run_ablation_suite(
      cfg, [&](std::uint64_t) { return tr::Datasets{data, data, data}; }, {1, 2});
  ASSERT_EQ(rows.size(), 12u);
  EXPECT_EQ(rows[0].variant, "full");
  EXPECT_EQ(rows[6].seed, 2);
  const auto path = std::filesystem::temp_directory_path() / "causalproto_test_results.csv";
  tr::write_results_csv(path, rows);
  const auto back = tr::read_results_csv(path);
  ASSERT_EQ(back.size(), rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) EXPECT_EQ(cp::metrics::to_csv_row(back[i]), cp::metrics::to_csv_row(rows[i]));
}

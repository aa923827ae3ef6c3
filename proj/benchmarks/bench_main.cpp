#include "causalproto/autograd.hpp"
#include "causalproto/intervention.hpp"
#include "causalproto/mi_club.hpp"
#include "causalproto/proto_spaces.hpp"
#include "causalproto/trainer.hpp"

#include <benchmark/benchmark.h>

#include <random>

namespace cp = causalproto;

namespace {

cp::Matrix gaussian(int rows, int cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  cp::Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

cp::ag::ConvGeometry geometry(int size, int cin, int cout) {
  cp::ag::ConvGeometry g;
  g.in_channels = cin;
  g.height = g.width = size;
  g.out_channels = cout;
  g.kernel = 3;
  g.stride = 2;
  g.pad = 1;
  return g;
}

void BM_Conv2dForward(benchmark::State& st) {
  const int batch = static_cast<int>(st.range(0));
  const auto g = geometry(32, 3, 8);
  const cp::Matrix x = gaussian(batch, 3 * 32 * 32, 1);
  const cp::Matrix w = gaussian(g.out_channels, g.patch_size(), 2);
  const cp::Matrix b = cp::Matrix::Zero(1, g.out_channels);
  for (auto _ : st) {
    cp::ag::Tape tape;
    auto y = cp::ag::conv2d(tape.constant(x), tape.constant(w), tape.constant(b), g);
    benchmark::DoNotOptimize(y.value().data());
  }
  st.SetItemsProcessed(st.iterations() * batch);
}
BENCHMARK(BM_Conv2dForward)->Arg(1)->Arg(32);

void BM_Conv2dBackward(benchmark::State& st) {
  const int batch = static_cast<int>(st.range(0));
  const auto g = geometry(32, 3, 8);
  const cp::Matrix x = gaussian(batch, 3 * 32 * 32, 1);
  const cp::Matrix w = gaussian(g.out_channels, g.patch_size(), 2);
  const cp::Matrix b = cp::Matrix::Zero(1, g.out_channels);
  for (auto _ : st) {
    cp::ag::Tape tape;
    auto wv = tape.variable(w);
    auto y = cp::ag::sum(cp::ag::conv2d(tape.variable(x), wv, tape.variable(b), g));
    tape.backward(y);
    benchmark::DoNotOptimize(wv.grad().data());
  }
  st.SetItemsProcessed(st.iterations() * batch);
}
BENCHMARK(BM_Conv2dBackward)->Arg(1)->Arg(32);

void BM_ClubPenalty(benchmark::State& st) {
  const int n = static_cast<int>(st.range(0));
  std::mt19937_64 rng(3);
  cp::mi::GaussianCondModel q(32, 128, rng);
  const cp::Matrix zc = gaussian(n, 32, 4), zs = gaussian(n, 32, 5);
  for (auto _ : st) benchmark::DoNotOptimize(cp::mi::club_penalty(zc, zs, q));
  st.SetComplexityN(n);
}
BENCHMARK(BM_ClubPenalty)->RangeMultiplier(2)->Range(8, 256)->Complexity(benchmark::oNSquared);

void BM_InterveneBatch(benchmark::State& st) {
  const int m = static_cast<int>(st.range(0));
  std::mt19937_64 rng(6);
  cp::model::FusionNet fusion(32, 128, 3, rng);
  const cp::Matrix zc = gaussian(32, 32, 7), ctx = gaussian(m, 32, 8);
  for (auto _ : st) benchmark::DoNotOptimize(cp::intervention::intervene_batch(zc, ctx, fusion).data());
}
BENCHMARK(BM_InterveneBatch)->Arg(1)->Arg(10)->Arg(50);

void BM_TrainStepDesk(benchmark::State& st) {
  cp::train::TrainConfig cfg;
  cfg.encoder.latent_dim = 32;
  cfg.encoder.image_size = 32;
  cfg.encoder.channels = {8, 16, 32};
  cfg.seed = 1;
  auto state = cp::train::TrainState::create(cfg);
  std::vector<cp::datagen::ImageSample> samples(32);
  const cp::Matrix pix = gaussian(32, 3 * 32 * 32, 9).cwiseAbs().cwiseMin(1.0);
  for (int i = 0; i < 32; ++i) {
    samples[i].pixels = cp::Image(32, 32);
    for (std::size_t k = 0; k < samples[i].pixels.data.size(); ++k) samples[i].pixels.data[k] = pix(i, k);
    samples[i].label = i % 3;
    samples[i].sample_id = std::to_string(i);
  }
  std::vector<int> index(32);
  for (int i = 0; i < 32; ++i) index[i] = i;
  const auto batch = cp::train::make_batch(samples, index, 32);
  for (auto _ : st) benchmark::DoNotOptimize(cp::train::train_step(state, batch, cfg, 1e-4).total);
}
BENCHMARK(BM_TrainStepDesk)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();

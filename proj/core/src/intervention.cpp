#include "causalproto/intervention.hpp"

#include "causalproto/error.hpp"

#include <algorithm>
#include <numeric>

namespace causalproto::intervention {

std::string to_string(PoolingMode m) { return m == PoolingMode::geometric ? "geometric" : "arithmetic"; }

PoolingMode pooling_mode_from_string(const std::string& s) {
  if (s == "arithmetic") return PoolingMode::arithmetic;
  if (s == "geometric") return PoolingMode::geometric;
  throw ConfigError("unknown nwgm_mode '" + s + "' (expected arithmetic|geometric)");
}

std::vector<double> context_weights(const Options& opt, int num_contexts) {
  CAUSALPROTO_REQUIRE(num_contexts >= 1, "intervene: spurious library is empty");
  if (opt.weights.empty()) return std::vector<double>(num_contexts, 1.0 / num_contexts);
  CAUSALPROTO_REQUIRE(static_cast<int>(opt.weights.size()) == num_contexts,
                      "intervene: context weight count does not match M");
  const double total = std::accumulate(opt.weights.begin(), opt.weights.end(), 0.0);
  CAUSALPROTO_REQUIRE(total > 0.0, "intervene: context weights sum to zero");
  std::vector<double> w;
  for (double v : opt.weights) {
    CAUSALPROTO_REQUIRE(v >= 0.0, "intervene: negative context weight");
    w.push_back(v / total);
  }
  return w;
}

ag::Var intervened_log_probs(nn::Binding& b, const ag::Var& z_c, const ag::Var& contexts,
                             const model::FusionNet& fusion, const Options& opt) {
  const auto m = contexts.rows();
  CAUSALPROTO_REQUIRE(m >= 1, "intervene: spurious library is empty");
  const auto n = z_c.rows();
  std::vector<double> w = context_weights(opt, static_cast<int>(m));
  // Row n*M + m pairs sample n with context m.
  ag::Var logits = fusion.forward(b, ag::repeat_rows(z_c, m), ag::tile_rows(contexts, n));
  if (opt.mode == PoolingMode::geometric) {
    return ag::log_softmax_rows(ag::group_weighted_sum_rows(logits, w));
  }
  // Zero-weight contexts drop out of the mixture entirely.
  std::vector<int> keep;
  std::vector<double> kept_w;
  for (Eigen::Index i = 0; i < m; ++i) {
    if (w[i] > 0.0) {
      keep.push_back(static_cast<int>(i));
      kept_w.push_back(w[i]);
    }
  }
  ag::Var lsm = ag::log_softmax_rows(logits);
  if (static_cast<Eigen::Index>(keep.size()) != m) {
    std::vector<int> rows;
    for (Eigen::Index i = 0; i < n; ++i) {
      for (int k : keep) rows.push_back(static_cast<int>(i * m + k));
    }
    lsm = ag::select_rows(lsm, rows);
  }
  return ag::group_logsumexp_rows(lsm, kept_w);
}

Matrix intervene_batch(const Matrix& z_c, const Matrix& contexts, const model::FusionNet& fusion,
                       const Options& opt) {
  ag::Tape tape;
  nn::Binding b(tape, false);
  return intervened_log_probs(b, tape.constant(z_c), tape.constant(contexts), fusion, opt)
      .value()
      .array()
      .exp();
}

InterventionOutput intervene(const Vector& z_c, const proto::SpuriousLibrary& lib,
                             const model::FusionNet& fusion, const Options& opt) {
  const int m = lib.size();
  CAUSALPROTO_REQUIRE(m >= 1, "intervene: spurious library is empty");
  CAUSALPROTO_REQUIRE(z_c.size() == fusion.latent_dim() && lib.prototypes.cols() == fusion.latent_dim(),
                      "intervene: latent dimension mismatch");
  std::vector<double> w = context_weights(opt, m);
  // Each context is evaluated on its own and contributions are summed in
  // sorted order, so the result does not depend on the dictionary order.
  Matrix logits(m, fusion.num_classes());
  for (int k = 0; k < m; ++k) logits.row(k) = fusion.logits(z_c, lib.prototypes.row(k).transpose()).transpose();
  InterventionOutput out;
  out.per_context.resize(m, fusion.num_classes());
  for (int k = 0; k < m; ++k) {
    const Eigen::RowVectorXd e = (logits.row(k).array() - logits.row(k).maxCoeff()).exp();
    out.per_context.row(k) = e / e.sum();
  }
  const auto sorted_sum = [](std::vector<double> terms) {
    std::sort(terms.begin(), terms.end());
    double acc = 0.0;
    for (double t : terms) acc += t;
    return acc;
  };
  out.probs.resize(fusion.num_classes());
  if (opt.mode == PoolingMode::geometric) {
    Vector mean_logits(fusion.num_classes());
    for (int c = 0; c < fusion.num_classes(); ++c) {
      std::vector<double> terms;
      for (int k = 0; k < m; ++k) terms.push_back(w[k] * logits(k, c));
      mean_logits(c) = sorted_sum(std::move(terms));
    }
    Vector e = (mean_logits.array() - mean_logits.maxCoeff()).exp();
    out.probs = e / e.sum();
  } else {
    for (int c = 0; c < fusion.num_classes(); ++c) {
      std::vector<double> terms;
      for (int k = 0; k < m; ++k) terms.push_back(w[k] * out.per_context(k, c));
      out.probs(c) = sorted_sum(std::move(terms));
    }
  }
  return out;
}

Vector conditional_predict(const Vector& z_c, const proto::CausalLibrary& lib, proto::DistanceKind kind) {
  return proto::causal_class_probs(z_c, lib, kind);
}

}  // namespace causalproto::intervention

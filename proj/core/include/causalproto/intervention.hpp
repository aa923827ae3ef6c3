#pragma once

// Backdoor-adjusted prediction: the fusion classifier is evaluated against
// every spurious prototype and the per-context softmaxes are pooled, i.e.
//
//   P(Y | do(X)) ~= sum_m w_m Softmax(F(z_c, p_s,m)),  w_m = 1/M by default.

#include "causalproto/model.hpp"
#include "causalproto/proto_spaces.hpp"

#include <string>
#include <vector>

namespace causalproto::intervention {

enum class PoolingMode {
  arithmetic,  // mean of per-context softmaxes
  geometric,   // softmax of mean per-context logits
};

std::string to_string(PoolingMode m);
PoolingMode pooling_mode_from_string(const std::string& s);

struct Options {
  PoolingMode mode = PoolingMode::arithmetic;
  /// Optional context prior (normalised internally); empty means uniform 1/M.
  std::vector<double> weights;
};

struct InterventionOutput {
  Vector probs;        // C
  Matrix per_context;  // M x C
};

/// Normalised context weights for M contexts.
std::vector<double> context_weights(const Options& opt, int num_contexts);

InterventionOutput intervene(const Vector& z_c, const proto::SpuriousLibrary& lib,
                             const model::FusionNet& fusion, const Options& opt = {});

/// log P(Y | do(X)) for a batch (N x C) on a tape. `contexts` is M x D.
ag::Var intervened_log_probs(nn::Binding& b, const ag::Var& z_c, const ag::Var& contexts,
                             const model::FusionNet& fusion, const Options& opt = {});

/// Batch probabilities (N x C) on frozen parameters.
Matrix intervene_batch(const Matrix& z_c, const Matrix& contexts, const model::FusionNet& fusion,
                       const Options& opt = {});

/// Conditional prediction P(Y | Z_C) from the causal library; used when the
/// intervention head is ablated.
Vector conditional_predict(const Vector& z_c, const proto::CausalLibrary& lib,
                           proto::DistanceKind kind = proto::DistanceKind::euclidean);

}  // namespace causalproto::intervention

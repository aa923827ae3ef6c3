#pragma once

// Variational contrastive log-ratio upper bound (vCLUB) on I(Z_C; Z_S).
//
// q(z_c | z_s) is a diagonal Gaussian whose mean and log-variance come from a
// one-hidden-layer MLP on z_s. The batch estimate is
//
//   (1/N) sum_i [ log q(zc_i | zs_i) - (1/N) sum_j log q(zc_j | zs_i) ]
//
// with every negative pair j enumerated (no sampled negatives).

#include "causalproto/nn.hpp"

#include <random>

namespace causalproto::mi {

inline constexpr double kLogVarMin = -8.0;
inline constexpr double kLogVarMax = 8.0;

class GaussianCondModel {
 public:
  struct Output {
    ag::Var mu;
    ag::Var logvar;
  };

  GaussianCondModel() = default;
  GaussianCondModel(int latent_dim, int hidden, std::mt19937_64& rng);

  /// Row-wise conditional parameters for z_s (N x D); log-variance clamped to [-8, 8].
  Output forward(nn::Binding& b, const ag::Var& z_s) const;

  void collect(const std::string& prefix, std::vector<nn::ParamRef>& out);
  int latent_dim() const { return latent_dim_; }
  nn::Mlp& net() { return net_; }
  const nn::Mlp& net() const { return net_; }

 private:
  int latent_dim_ = 0;
  nn::Mlp net_;
};

/// log q(z_c | z_s) for one pair. Throws NumericError on non-finite parameters or result.
double log_q(const Vector& z_c, const Vector& z_s, const GaussianCondModel& model);

/// Reduces an N x N matrix L(i, j) = log q(zc_j | zs_i) to
/// (1/N) sum_i [L(i,i) - (1/N) sum_j L(i,j)]. The summation pairs (i,j) with
/// (j,i) so that row-independent matrices give exactly zero.
ag::Var contrastive_gap(const ag::Var& logq_matrix);

/// Batch penalty on the tape. q's parameters enter as constants, so gradients
/// reach z_c and z_s (including through q's input) but never q itself.
ag::Var club_penalty(ag::Tape& tape, const ag::Var& z_c, const ag::Var& z_s,
                     const GaussianCondModel& model);
double club_penalty(const Matrix& z_c, const Matrix& z_s, const GaussianCondModel& model);

/// One ascent step on mean log q(zc_i | zs_i) with the latents held fixed.
/// Returns the negative log-likelihood measured before the update.
double fit_q_step(const Matrix& z_c, const Matrix& z_s, GaussianCondModel& model, nn::Adam& opt,
                  double lr);

/// Mean negative log-likelihood of paired latents under q.
double paired_nll(const Matrix& z_c, const Matrix& z_s, const GaussianCondModel& model);

/// Penalty evaluated over a whole latent set; batch_size 0 uses one N x N
/// block, otherwise the average over consecutive blocks of that size.
double estimate_bound(const Matrix& z_c, const Matrix& z_s, const GaussianCondModel& model,
                      int batch_size = 0);

}  // namespace causalproto::mi

#include "causalproto/mi_club.hpp"

#include "causalproto/error.hpp"

#include <cmath>

namespace causalproto::mi {

GaussianCondModel::GaussianCondModel(int latent_dim, int hidden, std::mt19937_64& rng)
    : latent_dim_(latent_dim), net_(latent_dim, hidden, 2 * latent_dim, rng) {
  // Start from a unit-variance, zero-mean guess.
  net_.output.weight *= 0.1;
}

GaussianCondModel::Output GaussianCondModel::forward(nn::Binding& b, const ag::Var& z_s) const {
  CAUSALPROTO_REQUIRE(z_s.cols() == latent_dim_, "q(z_c|z_s): latent dimension mismatch");
  ag::Var out = net_.forward(b, z_s);
  return {ag::slice_cols(out, 0, latent_dim_),
          ag::clamp(ag::slice_cols(out, latent_dim_, latent_dim_), kLogVarMin, kLogVarMax)};
}

void GaussianCondModel::collect(const std::string& prefix, std::vector<nn::ParamRef>& out) {
  net_.collect(prefix, out);
}

namespace {

void require_finite_model(const GaussianCondModel& model) {
  const auto& n = model.net();
  for (const Matrix* m : {&n.hidden.weight, &n.hidden.bias, &n.output.weight, &n.output.bias}) {
    if (!m->allFinite()) throw NumericError("q(z_c|z_s) has non-finite parameters");
  }
}

void require_paired(const Matrix& z_c, const Matrix& z_s, const GaussianCondModel& model) {
  CAUSALPROTO_REQUIRE(z_c.rows() == z_s.rows(), "club: z_c and z_s must have the same row count");
  CAUSALPROTO_REQUIRE(z_c.rows() >= 1, "club: empty batch");
  CAUSALPROTO_REQUIRE(z_c.cols() == model.latent_dim() && z_s.cols() == model.latent_dim(),
                      "club: latent dimension mismatch");
}

}  // namespace

double log_q(const Vector& z_c, const Vector& z_s, const GaussianCondModel& model) {
  CAUSALPROTO_REQUIRE(z_c.size() == model.latent_dim() && z_s.size() == model.latent_dim(),
                      "log_q: latent dimension mismatch");
  require_finite_model(model);
  if (!z_c.allFinite() || !z_s.allFinite()) throw NumericError("log_q: non-finite latent");
  ag::Tape tape;
  nn::Binding b(tape, false);
  Matrix zc = z_c.transpose();
  Matrix zs = z_s.transpose();
  auto q = model.forward(b, tape.constant(zs));
  const double v = ag::gauss_logq_paired(tape.constant(zc), q.mu, q.logvar).scalar();
  if (!std::isfinite(v)) throw NumericError("log_q evaluated to a non-finite value");
  return v;
}

ag::Var contrastive_gap(const ag::Var& logq_matrix) {
  const Matrix& l = logq_matrix.value();
  CAUSALPROTO_REQUIRE(l.rows() == l.cols() && l.rows() >= 1, "contrastive_gap: need a square matrix");
  const Eigen::Index n = l.rows();
  const double nn2 = static_cast<double>(n) * static_cast<double>(n);
  // sum_i sum_j (L_ii - L_ij) / N^2, with the i == j terms vanishing and
  // the (i,j), (j,i) terms accumulated together.
  double acc = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) acc += (l(i, i) - l(i, j)) + (l(j, j) - l(j, i));
  }
  Matrix v(1, 1);
  v(0, 0) = acc / nn2;
  return logq_matrix.tape().record(std::move(v), {logq_matrix}, [logq_matrix, n, nn2](ag::Tape& t, const Matrix& g) {
    Matrix d = Matrix::Constant(n, n, -g(0, 0) / nn2);
    for (Eigen::Index i = 0; i < n; ++i) d(i, i) += g(0, 0) * static_cast<double>(n) / nn2;
    t.accumulate(logq_matrix, d);
  });
}

ag::Var club_penalty(ag::Tape& tape, const ag::Var& z_c, const ag::Var& z_s,
                     const GaussianCondModel& model) {
  CAUSALPROTO_REQUIRE(z_c.rows() == z_s.rows(), "club: z_c and z_s must have the same row count");
  CAUSALPROTO_REQUIRE(z_c.rows() >= 1, "club: empty batch");
  nn::Binding frozen(tape, false);
  auto q = model.forward(frozen, z_s);
  return contrastive_gap(ag::gauss_logq_matrix(z_c, q.mu, q.logvar));
}

double club_penalty(const Matrix& z_c, const Matrix& z_s, const GaussianCondModel& model) {
  require_paired(z_c, z_s, model);
  require_finite_model(model);
  ag::Tape tape;
  const double v = club_penalty(tape, tape.constant(z_c), tape.constant(z_s), model).scalar();
  if (!std::isfinite(v)) throw NumericError("club penalty evaluated to a non-finite value");
  return v;
}

double paired_nll(const Matrix& z_c, const Matrix& z_s, const GaussianCondModel& model) {
  require_paired(z_c, z_s, model);
  ag::Tape tape;
  nn::Binding b(tape, false);
  auto q = model.forward(b, tape.constant(z_s));
  return -ag::mean(ag::gauss_logq_paired(tape.constant(z_c), q.mu, q.logvar)).scalar();
}

double fit_q_step(const Matrix& z_c, const Matrix& z_s, GaussianCondModel& model, nn::Adam& opt,
                  double lr) {
  require_paired(z_c, z_s, model);
  ag::Tape tape;
  nn::Binding b(tape, true);
  auto q = model.forward(b, tape.constant(z_s));
  ag::Var nll = ag::scale(ag::mean(ag::gauss_logq_paired(tape.constant(z_c), q.mu, q.logvar)), -1.0);
  const double value = nll.scalar();
  if (!std::isfinite(value)) throw NumericError("q fit: non-finite negative log-likelihood");
  tape.backward(nll);
  std::vector<nn::ParamRef> params;
  model.collect("q", params);
  std::vector<Matrix> grads;
  grads.reserve(params.size());
  for (const auto& p : params) grads.push_back(b.grad(*p.value));
  opt.step(params, grads, lr);
  return value;
}

double estimate_bound(const Matrix& z_c, const Matrix& z_s, const GaussianCondModel& model,
                      int batch_size) {
  require_paired(z_c, z_s, model);
  const Eigen::Index n = z_c.rows();
  if (batch_size <= 0 || batch_size >= n) return club_penalty(z_c, z_s, model);
  double total = 0.0;
  double weight = 0.0;
  for (Eigen::Index start = 0; start < n; start += batch_size) {
    const Eigen::Index len = std::min<Eigen::Index>(batch_size, n - start);
    const double w = static_cast<double>(len);
    total += w * club_penalty(z_c.middleRows(start, len), z_s.middleRows(start, len), model);
    weight += w;
  }
  return total / weight;
}

}  // namespace causalproto::mi

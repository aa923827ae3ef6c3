#include "causalproto/nn.hpp"

#include "causalproto/error.hpp"

#include <cmath>
#include <numbers>

namespace causalproto::nn {

ag::Var Binding::operator()(const Matrix& param) {
  auto it = vars_.find(&param);
  if (it != vars_.end()) return it->second;
  ag::Var v = trainable_ ? tape_->variable(param) : tape_->constant(param);
  vars_.emplace(&param, v);
  return v;
}

Matrix Binding::grad(const Matrix& param) const {
  auto it = vars_.find(&param);
  if (it == vars_.end() || !it->second.requires_grad()) {
    return Matrix::Zero(param.rows(), param.cols());
  }
  return it->second.grad();
}

Matrix he_normal(Eigen::Index rows, Eigen::Index cols, double fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Linear::Linear(int in, int out, std::mt19937_64& rng)
    : weight(he_normal(in, out, in, rng)), bias(Matrix::Zero(1, out)) {}

ag::Var Linear::forward(Binding& b, const ag::Var& x) const {
  return ag::add_rowvec(ag::matmul(x, b(weight)), b(bias));
}

void Linear::collect(const std::string& prefix, std::vector<ParamRef>& out) {
  out.push_back({prefix + ".weight", &weight});
  out.push_back({prefix + ".bias", &bias});
}

Conv2d::Conv2d(const ag::ConvGeometry& g, std::mt19937_64& rng)
    : geometry(g),
      weight(he_normal(g.out_channels, g.patch_size(), g.patch_size(), rng)),
      bias(Matrix::Zero(1, g.out_channels)) {}

ag::Var Conv2d::forward(Binding& b, const ag::Var& x) const {
  return ag::conv2d(x, b(weight), b(bias), geometry);
}

void Conv2d::collect(const std::string& prefix, std::vector<ParamRef>& out) {
  out.push_back({prefix + ".weight", &weight});
  out.push_back({prefix + ".bias", &bias});
}

Mlp::Mlp(int in, int width, int out, std::mt19937_64& rng)
    : hidden(in, width, rng), output(width, out, rng) {}

ag::Var Mlp::forward(Binding& b, const ag::Var& x) const {
  return output.forward(b, ag::relu(hidden.forward(b, x)));
}

void Mlp::collect(const std::string& prefix, std::vector<ParamRef>& out) {
  hidden.collect(prefix + ".hidden", out);
  output.collect(prefix + ".output", out);
}

void Adam::step(const std::vector<ParamRef>& params, const std::vector<Matrix>& grads, double lr) {
  CAUSALPROTO_REQUIRE(params.size() == grads.size(), "Adam::step: params/grads size mismatch");
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double c1 = 1.0 - std::pow(opt_.beta1, t);
  const double c2 = 1.0 - std::pow(opt_.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& p = *params[i].value;
    CAUSALPROTO_REQUIRE(grads[i].rows() == p.rows() && grads[i].cols() == p.cols(),
                        "Adam::step: gradient shape mismatch for " + params[i].name);
    Matrix g = grads[i];
    if (opt_.weight_decay != 0.0) g += opt_.weight_decay * p;
    auto [it, inserted] = state_.try_emplace(params[i].name);
    Moments& s = it->second;
    if (inserted || s.m.rows() != p.rows() || s.m.cols() != p.cols()) {
      s.m = Matrix::Zero(p.rows(), p.cols());
      s.v = Matrix::Zero(p.rows(), p.cols());
    }
    s.m = opt_.beta1 * s.m + (1.0 - opt_.beta1) * g;
    s.v = opt_.beta2 * s.v + (1.0 - opt_.beta2) * g.cwiseProduct(g);
    p.array() -= lr * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + opt_.eps);
  }
}

double cosine_lr(double base, std::int64_t step, std::int64_t total) {
  if (total <= 0) return base;
  const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * frac));
}

}  // namespace causalproto::nn

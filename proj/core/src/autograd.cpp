#include "causalproto/autograd.hpp"

#include "causalproto/error.hpp"

#include <cmath>
#include <limits>
#include <memory>
#include <numbers>

namespace causalproto::ag {

const Matrix& Var::value() const { return tape_->value(id_); }
const Matrix& Var::grad() const { return tape_->grad(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

double Var::scalar() const {
  const Matrix& v = value();
  CAUSALPROTO_REQUIRE(v.size() == 1, "scalar() on a non 1x1 value");
  return v(0, 0);
}

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix{}, false, {}});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::variable(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix{}, true, {}});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::record(Matrix value, std::initializer_list<Var> parents, BackwardFn fn) {
  bool any = false;
  for (const Var& p : parents) any = any || p.requires_grad();
  nodes_.push_back(Node{std::move(value), Matrix{}, any, any ? std::move(fn) : BackwardFn{}});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

const Matrix& Tape::grad(int id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::accumulate(const Var& v, const Matrix& g) { accumulate_expr(v, g); }

void Tape::backward(const Var& root) {
  CAUSALPROTO_REQUIRE(root.tape_ == this, "backward() on a foreign Var");
  CAUSALPROTO_REQUIRE(root.value().size() == 1, "backward() needs a scalar root");
  for (Node& n : nodes_) n.grad.resize(0, 0);
  if (!root.requires_grad()) return;
  nodes_[root.id()].grad = Matrix::Ones(1, 1);
  for (int id = root.id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.backward || n.grad.size() == 0) continue;
    n.backward(*this, n.grad);
  }
}

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ContractViolation(std::string(op) + ": shape mismatch");
  }
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  CAUSALPROTO_REQUIRE(a.cols() == b.rows(), "matmul: inner dimension mismatch");
  Tape& t = a.tape();
  return t.record(a.value() * b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (a.requires_grad()) t.accumulate_expr(a, g * b.value().transpose());
    if (b.requires_grad()) t.accumulate_expr(b, a.value().transpose() * g);
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  return a.tape().record(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  return a.tape().record(a.value() - b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate_expr(b, -g);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  return a.tape().record(a.value().cwiseProduct(b.value()), {a, b},
                         [a, b](Tape& t, const Matrix& g) {
                           if (a.requires_grad()) t.accumulate_expr(a, g.cwiseProduct(b.value()));
                           if (b.requires_grad()) t.accumulate_expr(b, g.cwiseProduct(a.value()));
                         });
}

Var scale(const Var& a, double s) {
  return a.tape().record(a.value() * s, {a},
                         [a, s](Tape& t, const Matrix& g) { t.accumulate_expr(a, g * s); });
}

Var add_scalar(const Var& a, double s) {
  Matrix v = a.value().array() + s;
  return a.tape().record(std::move(v), {a}, [a](Tape& t, const Matrix& g) { t.accumulate(a, g); });
}

Var add_rowvec(const Var& a, const Var& r) {
  CAUSALPROTO_REQUIRE(r.rows() == 1 && r.cols() == a.cols(), "add_rowvec: shape mismatch");
  Matrix v = a.value().rowwise() + r.value().row(0);
  return a.tape().record(std::move(v), {a, r}, [a, r](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    if (r.requires_grad()) t.accumulate_expr(r, g.colwise().sum());
  });
}

Var relu(const Var& a) {
  Matrix v = a.value().cwiseMax(0.0);
  return a.tape().record(std::move(v), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate_expr(a, (a.value().array() > 0.0).select(g, 0.0));
  });
}

Var tanh(const Var& a) {
  Matrix v = a.value().array().tanh();
  Var saved = a.tape().constant(v);
  return a.tape().record(std::move(v), {a}, [a, saved](Tape& t, const Matrix& g) {
    const Matrix& y = saved.value();
    t.accumulate_expr(a, g.array() * (1.0 - y.array().square()));
  });
}

Var exp(const Var& a) {
  Matrix v = a.value().array().exp();
  Var saved = a.tape().constant(v);
  return a.tape().record(std::move(v), {a}, [a, saved](Tape& t, const Matrix& g) {
    t.accumulate_expr(a, g.cwiseProduct(saved.value()));
  });
}

Var log(const Var& a) {
  Matrix v = a.value().array().log();
  return a.tape().record(std::move(v), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate_expr(a, g.cwiseQuotient(a.value()));
  });
}

Var sqrt(const Var& a) {
  Matrix v = a.value().array().sqrt();
  Var saved = a.tape().constant(v);
  return a.tape().record(std::move(v), {a}, [a, saved](Tape& t, const Matrix& g) {
    const Matrix& y = saved.value();
    Matrix d = (y.array() > 0.0).select(g.array() * 0.5 / y.array(), 0.0);
    t.accumulate(a, d);
  });
}

Var square(const Var& a) {
  Matrix v = a.value().array().square();
  return a.tape().record(std::move(v), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate_expr(a, 2.0 * g.cwiseProduct(a.value()));
  });
}

Var clamp(const Var& a, double lo, double hi) {
  Matrix v = a.value().cwiseMax(lo).cwiseMin(hi);
  return a.tape().record(std::move(v), {a}, [a, lo, hi](Tape& t, const Matrix& g) {
    const auto& x = a.value().array();
    t.accumulate_expr(a, ((x >= lo) && (x <= hi)).select(g, 0.0));
  });
}

Var detach(const Var& a) { return a.tape().constant(a.value()); }

Var sum(const Var& a) {
  Matrix v(1, 1);
  v(0, 0) = a.value().sum();
  return a.tape().record(std::move(v), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate_expr(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

Var mean(const Var& a) {
  CAUSALPROTO_REQUIRE(a.value().size() > 0, "mean of an empty matrix");
  const double n = static_cast<double>(a.value().size());
  Matrix v(1, 1);
  v(0, 0) = a.value().sum() / n;
  return a.tape().record(std::move(v), {a}, [a, n](Tape& t, const Matrix& g) {
    t.accumulate_expr(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0) / n));
  });
}

Var sum_rows(const Var& a) {
  Matrix v = a.value().rowwise().sum();
  return a.tape().record(std::move(v), {a}, [a](Tape& t, const Matrix& g) {
    Matrix d = g.col(0).replicate(1, a.cols());
    t.accumulate(a, d);
  });
}

Var mean_over_rows(const Var& a) {
  const double n = static_cast<double>(a.rows());
  Matrix v = a.value().colwise().sum() / n;
  return a.tape().record(std::move(v), {a}, [a, n](Tape& t, const Matrix& g) {
    Matrix d = (g.row(0) / n).replicate(a.rows(), 1);
    t.accumulate(a, d);
  });
}

Var concat_cols(const Var& a, const Var& b) {
  CAUSALPROTO_REQUIRE(a.rows() == b.rows(), "concat_cols: row mismatch");
  Matrix v(a.rows(), a.cols() + b.cols());
  v << a.value(), b.value();
  return a.tape().record(std::move(v), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (a.requires_grad()) t.accumulate_expr(a, g.leftCols(a.cols()));
    if (b.requires_grad()) t.accumulate_expr(b, g.rightCols(b.cols()));
  });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  CAUSALPROTO_REQUIRE(start >= 0 && count >= 0 && start + count <= a.cols(),
                      "slice_cols: out of range");
  Matrix v = a.value().middleCols(start, count);
  return a.tape().record(std::move(v), {a}, [a, start, count](Tape& t, const Matrix& g) {
    Matrix d = Matrix::Zero(a.rows(), a.cols());
    d.middleCols(start, count) = g;
    t.accumulate(a, d);
  });
}

Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols) {
  CAUSALPROTO_REQUIRE(rows * cols == a.value().size(), "reshape: size mismatch");
  Matrix v = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
  return a.tape().record(std::move(v), {a}, [a](Tape& t, const Matrix& g) {
    Matrix d = Eigen::Map<const Matrix>(g.data(), a.rows(), a.cols());
    t.accumulate(a, d);
  });
}

Var repeat_rows(const Var& a, Eigen::Index times) {
  CAUSALPROTO_REQUIRE(times >= 1, "repeat_rows: times must be positive");
  const Eigen::Index n = a.rows();
  Matrix v(n * times, a.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index r = 0; r < times; ++r) v.row(i * times + r) = a.value().row(i);
  }
  return a.tape().record(std::move(v), {a}, [a, n, times](Tape& t, const Matrix& g) {
    Matrix d = Matrix::Zero(n, a.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index r = 0; r < times; ++r) d.row(i) += g.row(i * times + r);
    }
    t.accumulate(a, d);
  });
}

Var tile_rows(const Var& a, Eigen::Index times) {
  CAUSALPROTO_REQUIRE(times >= 1, "tile_rows: times must be positive");
  const Eigen::Index m = a.rows();
  Matrix v(m * times, a.cols());
  for (Eigen::Index r = 0; r < times; ++r) v.middleRows(r * m, m) = a.value();
  return a.tape().record(std::move(v), {a}, [a, m, times](Tape& t, const Matrix& g) {
    Matrix d = Matrix::Zero(m, a.cols());
    for (Eigen::Index r = 0; r < times; ++r) d += g.middleRows(r * m, m);
    t.accumulate(a, d);
  });
}

Var group_mean_rows(const Var& a, Eigen::Index group) {
  CAUSALPROTO_REQUIRE(group >= 1 && a.rows() % group == 0, "group_mean_rows: bad group size");
  const Eigen::Index n = a.rows() / group;
  const double inv = 1.0 / static_cast<double>(group);
  Matrix v = Matrix::Zero(n, a.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index r = 0; r < group; ++r) v.row(i) += a.value().row(i * group + r);
    v.row(i) *= inv;
  }
  return a.tape().record(std::move(v), {a}, [a, n, group, inv](Tape& t, const Matrix& g) {
    Matrix d(a.rows(), a.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index r = 0; r < group; ++r) d.row(i * group + r) = g.row(i) * inv;
    }
    t.accumulate(a, d);
  });
}

Var group_weighted_sum_rows(const Var& a, std::span<const double> weights) {
  const auto group = static_cast<Eigen::Index>(weights.size());
  CAUSALPROTO_REQUIRE(group >= 1 && a.rows() % group == 0,
                      "group_weighted_sum_rows: bad group size");
  const Eigen::Index n = a.rows() / group;
  std::vector<double> w(weights.begin(), weights.end());
  Matrix v = Matrix::Zero(n, a.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index r = 0; r < group; ++r) v.row(i) += w[r] * a.value().row(i * group + r);
  }
  return a.tape().record(std::move(v), {a}, [a, n, group, w](Tape& t, const Matrix& g) {
    Matrix d(a.rows(), a.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index r = 0; r < group; ++r) d.row(i * group + r) = g.row(i) * w[r];
    }
    t.accumulate(a, d);
  });
}

Var group_logsumexp_rows(const Var& a, std::span<const double> weights) {
  const auto group = static_cast<Eigen::Index>(weights.size());
  CAUSALPROTO_REQUIRE(group >= 1 && a.rows() % group == 0, "group_logsumexp_rows: bad group size");
  std::vector<double> logw(weights.size());
  for (std::size_t r = 0; r < weights.size(); ++r) {
    CAUSALPROTO_REQUIRE(weights[r] > 0.0, "group_logsumexp_rows: weights must be positive");
    logw[r] = std::log(weights[r]);
  }
  const Eigen::Index n = a.rows() / group;
  const Matrix& v = a.value();
  Matrix out(n, a.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index c = 0; c < a.cols(); ++c) {
      double mx = -std::numeric_limits<double>::infinity();
      for (Eigen::Index r = 0; r < group; ++r) mx = std::max(mx, v(i * group + r, c) + logw[r]);
      double acc = 0.0;
      for (Eigen::Index r = 0; r < group; ++r) acc += std::exp(v(i * group + r, c) + logw[r] - mx);
      out(i, c) = mx + std::log(acc);
    }
  }
  Matrix saved = out;
  return a.tape().record(std::move(out), {a}, [a, logw, saved, n, group](Tape& t, const Matrix& g) {
    const Matrix& v = a.value();
    Matrix d(v.rows(), v.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index r = 0; r < group; ++r) {
        for (Eigen::Index c = 0; c < v.cols(); ++c) {
          d(i * group + r, c) = g(i, c) * std::exp(v(i * group + r, c) + logw[r] - saved(i, c));
        }
      }
    }
    t.accumulate(a, d);
  });
}

Var select_rows(const Var& a, std::span<const int> index) {
  std::vector<int> idx(index.begin(), index.end());
  Matrix v(static_cast<Eigen::Index>(idx.size()), a.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    CAUSALPROTO_REQUIRE(idx[r] >= 0 && idx[r] < a.rows(), "select_rows: index out of range");
    v.row(r) = a.value().row(idx[r]);
  }
  return a.tape().record(std::move(v), {a}, [a, idx](Tape& t, const Matrix& g) {
    Matrix d = Matrix::Zero(a.rows(), a.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) d.row(idx[r]) += g.row(r);
    t.accumulate(a, d);
  });
}

Var sq_dist(const Var& a, const Var& b) {
  CAUSALPROTO_REQUIRE(a.cols() == b.cols(), "sq_dist: dimension mismatch");
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  Matrix v(av.rows(), bv.rows());
  for (Eigen::Index i = 0; i < av.rows(); ++i) {
    for (Eigen::Index k = 0; k < bv.rows(); ++k) v(i, k) = (av.row(i) - bv.row(k)).squaredNorm();
  }
  return a.tape().record(std::move(v), {a, b}, [a, b](Tape& t, const Matrix& g) {
    const Matrix& av = a.value();
    const Matrix& bv = b.value();
    // sum_k g_ik (a_i - b_k) = a_i * rowsum(g)_i - (g b)_i
    if (a.requires_grad()) {
      Matrix da = 2.0 * (av.array().colwise() * g.rowwise().sum().array()).matrix() -
                  2.0 * g * bv;
      t.accumulate(a, da);
    }
    if (b.requires_grad()) {
      Matrix db = 2.0 * (bv.array().colwise() * g.colwise().sum().transpose().array()).matrix() -
                  2.0 * g.transpose() * av;
      t.accumulate(b, db);
    }
  });
}

namespace {

Vector row_logsumexp(const Matrix& a) {
  Vector out(a.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double m = a.row(i).maxCoeff();
    if (!std::isfinite(m)) {
      out(i) = m;
      continue;
    }
    out(i) = m + std::log((a.row(i).array() - m).exp().sum());
  }
  return out;
}

}  // namespace

Var logsumexp_rows(const Var& a) {
  Vector lse = row_logsumexp(a.value());
  Matrix v = lse;
  return a.tape().record(std::move(v), {a}, [a, lse](Tape& t, const Matrix& g) {
    Matrix p = (a.value().colwise() - lse).array().exp();
    t.accumulate_expr(a, p.array().colwise() * g.col(0).array());
  });
}

Var log_softmax_rows(const Var& a) {
  Vector lse = row_logsumexp(a.value());
  Matrix v = a.value().colwise() - lse;
  Var saved = a.tape().constant(v);
  return a.tape().record(std::move(v), {a}, [a, saved](Tape& t, const Matrix& g) {
    Matrix p = saved.value().array().exp();
    Matrix d = g - (p.array().colwise() * g.rowwise().sum().array()).matrix();
    t.accumulate(a, d);
  });
}

Var softmax_rows(const Var& a) {
  Vector lse = row_logsumexp(a.value());
  Matrix v = (a.value().colwise() - lse).array().exp();
  Var saved = a.tape().constant(v);
  return a.tape().record(std::move(v), {a}, [a, saved](Tape& t, const Matrix& g) {
    const Matrix& s = saved.value();
    Vector inner = g.cwiseProduct(s).rowwise().sum();
    Matrix d = s.array() * (g.colwise() - inner).array();
    t.accumulate(a, d);
  });
}

Var pick(const Var& a, std::span<const int> index) {
  CAUSALPROTO_REQUIRE(static_cast<Eigen::Index>(index.size()) == a.rows(), "pick: size mismatch");
  std::vector<int> idx(index.begin(), index.end());
  Matrix v(a.rows(), 1);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    CAUSALPROTO_REQUIRE(idx[i] >= 0 && idx[i] < a.cols(), "pick: index out of range");
    v(i, 0) = a.value()(i, idx[i]);
  }
  return a.tape().record(std::move(v), {a}, [a, idx](Tape& t, const Matrix& g) {
    Matrix d = Matrix::Zero(a.rows(), a.cols());
    for (Eigen::Index i = 0; i < a.rows(); ++i) d(i, idx[i]) = g(i, 0);
    t.accumulate(a, d);
  });
}

Var masked_row_min(const Var& a, const std::vector<std::vector<bool>>& mask) {
  CAUSALPROTO_REQUIRE(static_cast<Eigen::Index>(mask.size()) == a.rows(),
                      "masked_row_min: mask rows mismatch");
  std::vector<int> arg(a.rows(), -1);
  Matrix v = Matrix::Zero(a.rows(), 1);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    CAUSALPROTO_REQUIRE(static_cast<Eigen::Index>(mask[i].size()) == a.cols(),
                        "masked_row_min: mask cols mismatch");
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < a.cols(); ++k) {
      if (mask[i][k] && a.value()(i, k) < best) {
        best = a.value()(i, k);
        arg[i] = static_cast<int>(k);
      }
    }
    if (arg[i] >= 0) v(i, 0) = best;
  }
  return a.tape().record(std::move(v), {a}, [a, arg](Tape& t, const Matrix& g) {
    Matrix d = Matrix::Zero(a.rows(), a.cols());
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      if (arg[i] >= 0) d(i, arg[i]) = g(i, 0);
    }
    t.accumulate(a, d);
  });
}

Var row_min(const Var& a) {
  std::vector<std::vector<bool>> all(a.rows(), std::vector<bool>(a.cols(), true));
  return masked_row_min(a, all);
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, const ConvGeometry& g) {
  const int hw = g.height * g.width;
  CAUSALPROTO_REQUIRE(x.cols() == static_cast<Eigen::Index>(g.in_channels) * hw,
                      "conv2d: input width does not match geometry");
  CAUSALPROTO_REQUIRE(weight.rows() == g.out_channels && weight.cols() == g.patch_size(),
                      "conv2d: weight shape does not match geometry");
  CAUSALPROTO_REQUIRE(bias.rows() == 1 && bias.cols() == g.out_channels,
                      "conv2d: bias shape does not match geometry");
  const Eigen::Index n = x.rows();
  const int ho = g.out_height();
  const int wo = g.out_width();
  const int ohw = ho * wo;
  const int k = g.kernel;

  auto cols = std::make_shared<Matrix>(g.patch_size(), n * ohw);
  const Matrix& xv = x.value();
  for (Eigen::Index s = 0; s < n; ++s) {
    for (int c = 0; c < g.in_channels; ++c) {
      for (int ki = 0; ki < k; ++ki) {
        for (int kj = 0; kj < k; ++kj) {
          const int r = (c * k + ki) * k + kj;
          double* dst = cols->row(r).data() + s * ohw;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * g.stride - g.pad + ki;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * g.stride - g.pad + kj;
              const bool inside = iy >= 0 && iy < g.height && ix >= 0 && ix < g.width;
              dst[oy * wo + ox] = inside ? xv(s, c * hw + iy * g.width + ix) : 0.0;
            }
          }
        }
      }
    }
  }
  Matrix big = weight.value() * (*cols);
  Matrix v(n, static_cast<Eigen::Index>(g.out_channels) * ohw);
  for (Eigen::Index s = 0; s < n; ++s) {
    for (int co = 0; co < g.out_channels; ++co) {
      v.row(s).segment(co * ohw, ohw) =
          big.row(co).segment(s * ohw, ohw).array() + bias.value()(0, co);
    }
  }
  return x.tape().record(
      std::move(v), {x, weight, bias}, [x, weight, bias, g, cols, n, ohw](Tape& t, const Matrix& up) {
        const int hw = g.height * g.width;
        const int ho = g.out_height();
        const int wo = g.out_width();
        const int k = g.kernel;
        Matrix gbig(g.out_channels, n * ohw);
        for (Eigen::Index s = 0; s < n; ++s) {
          for (int co = 0; co < g.out_channels; ++co) {
            gbig.row(co).segment(s * ohw, ohw) = up.row(s).segment(co * ohw, ohw);
          }
        }
        if (weight.requires_grad()) t.accumulate_expr(weight, gbig * cols->transpose());
        if (bias.requires_grad()) t.accumulate_expr(bias, gbig.rowwise().sum().transpose());
        if (!x.requires_grad()) return;
        Matrix dcols = weight.value().transpose() * gbig;
        Matrix dx = Matrix::Zero(n, x.cols());
        for (Eigen::Index s = 0; s < n; ++s) {
          for (int c = 0; c < g.in_channels; ++c) {
            for (int ki = 0; ki < k; ++ki) {
              for (int kj = 0; kj < k; ++kj) {
                const int r = (c * k + ki) * k + kj;
                const double* src = dcols.row(r).data() + s * ohw;
                for (int oy = 0; oy < ho; ++oy) {
                  const int iy = oy * g.stride - g.pad + ki;
                  if (iy < 0 || iy >= g.height) continue;
                  for (int ox = 0; ox < wo; ++ox) {
                    const int ix = ox * g.stride - g.pad + kj;
                    if (ix < 0 || ix >= g.width) continue;
                    dx(s, c * hw + iy * g.width + ix) += src[oy * wo + ox];
                  }
                }
              }
            }
          }
        }
        t.accumulate(x, dx);
      });
}

Var global_avg_pool(const Var& x, int channels) {
  CAUSALPROTO_REQUIRE(channels > 0 && x.cols() % channels == 0, "global_avg_pool: bad channels");
  const Eigen::Index area = x.cols() / channels;
  Matrix v(x.rows(), channels);
  for (Eigen::Index s = 0; s < x.rows(); ++s) {
    for (int c = 0; c < channels; ++c) {
      v(s, c) = x.value().row(s).segment(c * area, area).sum() / static_cast<double>(area);
    }
  }
  return x.tape().record(std::move(v), {x}, [x, channels, area](Tape& t, const Matrix& g) {
    Matrix d(x.rows(), x.cols());
    for (Eigen::Index s = 0; s < x.rows(); ++s) {
      for (int c = 0; c < channels; ++c) {
        d.row(s).segment(c * area, area).setConstant(g(s, c) / static_cast<double>(area));
      }
    }
    t.accumulate(x, d);
  });
}

namespace {
constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 * ln(2*pi)
}

Var gauss_logq_matrix(const Var& zc, const Var& mu, const Var& logvar) {
  require_same_shape(zc, mu, "gauss_logq_matrix");
  require_same_shape(mu, logvar, "gauss_logq_matrix");
  const Eigen::Index n = zc.rows();
  const Eigen::Index d = zc.cols();
  const Matrix& z = zc.value();
  const Matrix& m = mu.value();
  const Matrix& lv = logvar.value();
  Matrix inv = (-lv.array()).exp();
  Matrix v(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      double acc = 0.0;
      for (Eigen::Index k = 0; k < d; ++k) {
        const double diff = z(j, k) - m(i, k);
        acc += -kHalfLog2Pi - 0.5 * lv(i, k) - 0.5 * diff * diff * inv(i, k);
      }
      v(i, j) = acc;
    }
  }
  return zc.tape().record(std::move(v), {zc, mu, logvar},
                          [zc, mu, logvar, inv](Tape& t, const Matrix& g) {
                            const Eigen::Index n = zc.rows();
                            const Eigen::Index d = zc.cols();
                            const Matrix& z = zc.value();
                            const Matrix& m = mu.value();
                            Matrix dz = Matrix::Zero(n, d);
                            Matrix dm = Matrix::Zero(n, d);
                            Matrix dlv = Matrix::Zero(n, d);
                            for (Eigen::Index i = 0; i < n; ++i) {
                              for (Eigen::Index j = 0; j < n; ++j) {
                                const double gij = g(i, j);
                                if (gij == 0.0) continue;
                                for (Eigen::Index k = 0; k < d; ++k) {
                                  const double diff = z(j, k) - m(i, k);
                                  const double w = diff * inv(i, k);
                                  dz(j, k) -= gij * w;
                                  dm(i, k) += gij * w;
                                  dlv(i, k) += gij * (-0.5 + 0.5 * diff * w);
                                }
                              }
                            }
                            t.accumulate(zc, dz);
                            t.accumulate(mu, dm);
                            t.accumulate(logvar, dlv);
                          });
}

Var gauss_logq_paired(const Var& zc, const Var& mu, const Var& logvar) {
  require_same_shape(zc, mu, "gauss_logq_paired");
  require_same_shape(mu, logvar, "gauss_logq_paired");
  const Matrix& z = zc.value();
  const Matrix& m = mu.value();
  const Matrix& lv = logvar.value();
  Matrix inv = (-lv.array()).exp();
  Matrix diff = z - m;
  Matrix v = (-kHalfLog2Pi - 0.5 * lv.array() - 0.5 * diff.array().square() * inv.array())
                 .rowwise()
                 .sum();
  return zc.tape().record(std::move(v), {zc, mu, logvar},
                          [zc, mu, logvar, inv, diff](Tape& t, const Matrix& g) {
                            Matrix w = diff.cwiseProduct(inv);
                            Matrix gw = w.array().colwise() * g.col(0).array();
                            if (zc.requires_grad()) t.accumulate_expr(zc, -gw);
                            if (mu.requires_grad()) t.accumulate(mu, gw);
                            if (logvar.requires_grad()) {
                              Matrix dlv = (-0.5 + 0.5 * diff.array() * w.array()).colwise() *
                                           g.col(0).array();
                              t.accumulate(logvar, dlv);
                            }
                          });
}

}  // namespace causalproto::ag

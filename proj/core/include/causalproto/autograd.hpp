#pragma once

// Minimal tape-based reverse-mode differentiation over dense row-major
// double matrices. Every loss in the library is assembled from these ops so
// that one set of finite-difference checks covers the whole objective.

#include <Eigen/Dense>

#include <deque>
#include <functional>
#include <span>
#include <vector>

namespace causalproto {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

namespace ag {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  const Matrix& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;
  bool requires_grad() const;
  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  int id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Matrix& upstream)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var variable(Matrix value);

  /// Seeds d(root)/d(root) = 1 and propagates to every node recorded before it.
  void backward(const Var& root);

  /// Records an op result. `fn` is only kept when a parent requires grad.
  Var record(Matrix value, std::initializer_list<Var> parents, BackwardFn fn);

  const Matrix& value(int id) const { return nodes_[id].value; }
  const Matrix& grad(int id);
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }

  /// Adds `g` into the gradient slot of `v` if it participates in differentiation.
  void accumulate(const Var& v, const Matrix& g);
  template <typename Expr>
  void accumulate_expr(const Var& v, const Expr& g) {
    if (!v.requires_grad()) return;
    Node& n = nodes_[v.id()];
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += Matrix(g);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::deque<Node> nodes_;
};

// --- elementwise and linear algebra ---
Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
/// a (N x K) + r (1 x K) broadcast over rows.
Var add_rowvec(const Var& a, const Var& r);
Var relu(const Var& a);
Var tanh(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
/// Exact sqrt; the subgradient at 0 is taken as 0.
Var sqrt(const Var& a);
Var square(const Var& a);
/// Clamp with zero gradient outside [lo, hi].
Var clamp(const Var& a, double lo, double hi);
/// Value copy with no gradient path.
Var detach(const Var& a);

// --- reductions and reshapes ---
Var sum(const Var& a);
Var mean(const Var& a);
/// N x K -> N x 1.
Var sum_rows(const Var& a);
/// N x K -> 1 x K.
Var mean_over_rows(const Var& a);
Var concat_cols(const Var& a, const Var& b);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
/// Row-major reinterpretation.
Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols);
/// Each row repeated `times` times consecutively: (N x D) -> (N*times x D).
Var repeat_rows(const Var& a, Eigen::Index times);
/// Whole matrix stacked `times` times: (M x D) -> (times*M x D).
Var tile_rows(const Var& a, Eigen::Index times);
/// Mean over consecutive row groups of size `group`: (N*group x K) -> (N x K).
Var group_mean_rows(const Var& a, Eigen::Index group);
/// Weighted sum over consecutive groups: out[n] = sum_g w[g] * a[n*G+g].
Var group_weighted_sum_rows(const Var& a, std::span<const double> weights);
/// out(n, c) = log sum_g w[g] exp(a(n*G+g, c)), computed with a per-entry max shift.
Var group_logsumexp_rows(const Var& a, std::span<const double> weights);
/// Rows of `a` at `index`, in order (repeats allowed).
Var select_rows(const Var& a, std::span<const int> index);

// --- distances, softmax family, selection ---
/// Pairwise squared Euclidean distances: (N x D), (K x D) -> (N x K).
Var sq_dist(const Var& a, const Var& b);
Var logsumexp_rows(const Var& a);
Var log_softmax_rows(const Var& a);
Var softmax_rows(const Var& a);
/// out[i] = a[i, index[i]] -> N x 1.
Var pick(const Var& a, std::span<const int> index);
/// Row minimum over columns where mask(i, k) is true -> N x 1. Rows with no
/// allowed column produce 0 with no gradient.
Var masked_row_min(const Var& a, const std::vector<std::vector<bool>>& mask);
Var row_min(const Var& a);

// --- convolutional pieces ---
struct ConvGeometry {
  int in_channels = 0;
  int height = 0;
  int width = 0;
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;
  int pad = 1;

  int out_height() const { return (height + 2 * pad - kernel) / stride + 1; }
  int out_width() const { return (width + 2 * pad - kernel) / stride + 1; }
  int patch_size() const { return in_channels * kernel * kernel; }
};

/// x: N x (C*H*W) channel-major rows; weight: Cout x (C*k*k); bias: 1 x Cout.
Var conv2d(const Var& x, const Var& weight, const Var& bias, const ConvGeometry& g);
/// N x (C*HW) -> N x C.
Var global_avg_pool(const Var& x, int channels);

// --- Gaussian conditional log-densities ---
/// out(i, j) = log N(zc_j ; mu_i, diag(exp(logvar_i))) -> N x N.
Var gauss_logq_matrix(const Var& zc, const Var& mu, const Var& logvar);
/// out(i) = log N(zc_i ; mu_i, diag(exp(logvar_i))) -> N x 1.
Var gauss_logq_paired(const Var& zc, const Var& mu, const Var& logvar);

}  // namespace ag
}  // namespace causalproto

#pragma once

#include "causalproto/autograd.hpp"

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

namespace causalproto::nn {

/// Non-owning reference to a named parameter matrix inside some module.
struct ParamRef {
  std::string name;
  Matrix* value = nullptr;
};

/// Lifts parameter matrices onto a tape exactly once per tape and remembers
/// the mapping so gradients can be read back after backward().
class Binding {
 public:
  Binding(ag::Tape& tape, bool trainable) : tape_(&tape), trainable_(trainable) {}

  ag::Var operator()(const Matrix& param);
  /// Gradient of a bound parameter, or zeros if it never reached the tape.
  Matrix grad(const Matrix& param) const;
  ag::Tape& tape() const { return *tape_; }
  bool trainable() const { return trainable_; }

 private:
  ag::Tape* tape_;
  bool trainable_;
  std::unordered_map<const Matrix*, ag::Var> vars_;
};

/// He-normal initialisation for a fan-in of `fan_in`.
Matrix he_normal(Eigen::Index rows, Eigen::Index cols, double fan_in, std::mt19937_64& rng);

/// Affine map x W + b with W stored (in x out).
struct Linear {
  Matrix weight;
  Matrix bias;

  Linear() = default;
  Linear(int in, int out, std::mt19937_64& rng);

  ag::Var forward(Binding& b, const ag::Var& x) const;
  void collect(const std::string& prefix, std::vector<ParamRef>& out);
  int in_features() const { return static_cast<int>(weight.rows()); }
  int out_features() const { return static_cast<int>(weight.cols()); }
};

struct Conv2d {
  ag::ConvGeometry geometry;
  Matrix weight;
  Matrix bias;

  Conv2d() = default;
  Conv2d(const ag::ConvGeometry& g, std::mt19937_64& rng);

  ag::Var forward(Binding& b, const ag::Var& x) const;
  void collect(const std::string& prefix, std::vector<ParamRef>& out);
};

/// One-hidden-layer perceptron with ReLU.
struct Mlp {
  Linear hidden;
  Linear output;

  Mlp() = default;
  Mlp(int in, int width, int out, std::mt19937_64& rng);

  ag::Var forward(Binding& b, const ag::Var& x) const;
  void collect(const std::string& prefix, std::vector<ParamRef>& out);
};

/// Adam with classic (coupled) L2 weight decay, keyed by parameter name.
class Adam {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  Adam() = default;
  explicit Adam(Options opt) : opt_(opt) {}

  /// Applies one update at learning rate `lr`. `grads[i]` belongs to `params[i]`.
  void step(const std::vector<ParamRef>& params, const std::vector<Matrix>& grads, double lr);

  std::int64_t steps() const { return steps_; }
  const Options& options() const { return opt_; }

  // Checkpoint access.
  struct Moments {
    Matrix m;
    Matrix v;
  };
  const std::map<std::string, Moments>& moments() const { return state_; }
  void restore(std::int64_t steps, std::map<std::string, Moments> state) {
    steps_ = steps;
    state_ = std::move(state);
  }

 private:
  Options opt_;
  std::int64_t steps_ = 0;
  std::map<std::string, Moments> state_;
};

/// Cosine decay from `base` to 0 over `total` steps.
double cosine_lr(double base, std::int64_t step, std::int64_t total);

}  // namespace causalproto::nn

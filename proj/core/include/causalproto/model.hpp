#pragma once

#include "causalproto/image.hpp"
#include "causalproto/nn.hpp"

#include <optional>
#include <random>
#include <span>
#include <vector>

namespace causalproto::model {

struct EncoderSpec {
  int latent_dim = 64;
  int image_size = 32;
  /// Output channels of each conv block; depth = channels.size().
  std::vector<int> channels{8, 16, 32};
  int kernel = 3;
  int stride = 2;
  /// Share the first conv block between the causal and spurious branches.
  bool share_stem = false;
  /// Squash latents into (-1, 1) with tanh.
  bool bounded_latent = true;
};

void validate(const EncoderSpec& spec);

struct LatentPair {
  Vector z_c;
  Vector z_s;
};

/// Packs images into an N x (3*H*W) channel-major matrix. Every image must be
/// image_size x image_size, otherwise ContractViolation.
Matrix to_input(std::span<const Image* const> images, int image_size);
Matrix to_input(const std::vector<Image>& images, int image_size);

/// Stack of stride-2 conv+ReLU blocks, global average pooling, linear head to D.
class CnnEncoder {
 public:
  CnnEncoder() = default;
  /// `first_block` is 0 for a full branch, 1 when a shared stem precedes it.
  CnnEncoder(const EncoderSpec& spec, int first_block, std::mt19937_64& rng);

  ag::Var forward(nn::Binding& b, const ag::Var& x) const;
  void collect(const std::string& prefix, std::vector<nn::ParamRef>& out);

  /// Geometry of block `i` for a spec (shared with the stem).
  static ag::ConvGeometry block_geometry(const EncoderSpec& spec, int i);

 private:
  std::vector<nn::Conv2d> blocks_;
  nn::Linear head_;
  bool bounded_ = true;
};

/// Parallel encoders f_c and f_s over the same image.
class DualEncoder {
 public:
  struct Output {
    ag::Var z_c;
    ag::Var z_s;
  };

  DualEncoder() = default;
  DualEncoder(const EncoderSpec& spec, std::mt19937_64& rng);

  Output forward(nn::Binding& b, const ag::Var& x) const;
  ag::Var forward_causal(nn::Binding& b, const ag::Var& x) const;
  ag::Var forward_spurious(nn::Binding& b, const ag::Var& x) const;

  /// Evaluation-mode forward passes on frozen parameters.
  LatentPair encode(const Image& image) const;
  std::vector<LatentPair> encode_batch(const std::vector<Image>& images) const;
  /// Latents of an already packed input (rows = samples).
  std::pair<Matrix, Matrix> encode_matrix(const Matrix& input) const;
  Matrix encode_causal_matrix(const Matrix& input) const;

  void collect(const std::string& prefix, std::vector<nn::ParamRef>& out);
  const EncoderSpec& spec() const { return spec_; }

 private:
  ag::Var stem(nn::Binding& b, const ag::Var& x) const;

  EncoderSpec spec_;
  std::optional<nn::Conv2d> stem_;
  CnnEncoder causal_;
  CnnEncoder spurious_;
};

/// F: (z_c (+) p_s) in R^{2D} -> class logits in R^C, one hidden ReLU layer.
class FusionNet {
 public:
  FusionNet() = default;
  FusionNet(int latent_dim, int hidden, int num_classes, std::mt19937_64& rng);

  /// Row-wise logits for paired rows of z_c and p_s.
  ag::Var forward(nn::Binding& b, const ag::Var& z_c, const ag::Var& p_s) const;
  Vector logits(const Vector& z_c, const Vector& p_s) const;

  void collect(const std::string& prefix, std::vector<nn::ParamRef>& out);
  int latent_dim() const { return latent_dim_; }
  int num_classes() const { return num_classes_; }
  nn::Mlp& net() { return net_; }
  const nn::Mlp& net() const { return net_; }

 private:
  int latent_dim_ = 0;
  int num_classes_ = 0;
  nn::Mlp net_;
};

/// Single-branch ERM baseline: encoder + linear classifier, plain cross-entropy.
class ErmClassifier {
 public:
  ErmClassifier() = default;
  ErmClassifier(const EncoderSpec& spec, int num_classes, std::mt19937_64& rng);

  ag::Var features(nn::Binding& b, const ag::Var& x) const;
  ag::Var logits(nn::Binding& b, const ag::Var& features) const;
  Matrix features_matrix(const Matrix& input) const;
  Matrix logits_matrix(const Matrix& input) const;

  void collect(const std::string& prefix, std::vector<nn::ParamRef>& out);
  const EncoderSpec& spec() const { return spec_; }

 private:
  EncoderSpec spec_;
  CnnEncoder encoder_;
  nn::Linear head_;
};

}  // namespace causalproto::model

#include "causalproto/model.hpp"

#include "causalproto/error.hpp"

namespace causalproto::model {

void validate(const EncoderSpec& spec) {
  if (spec.latent_dim < 1) throw ConfigError("latent_dim must be >= 1");
  if (spec.channels.empty()) throw ConfigError("encoder needs at least one conv block");
  for (int c : spec.channels) {
    if (c < 1) throw ConfigError("encoder channel counts must be positive");
  }
  if (spec.kernel < 1 || spec.stride < 1) throw ConfigError("kernel and stride must be positive");
  if (spec.image_size < 1) throw ConfigError("image_size must be positive");
  if (spec.share_stem && spec.channels.size() < 2) {
    throw ConfigError("share_stem needs at least two conv blocks");
  }
  int size = spec.image_size;
  for (std::size_t i = 0; i < spec.channels.size(); ++i) {
    size = (size + 2 * (spec.kernel / 2) - spec.kernel) / spec.stride + 1;
    if (size < 1) throw ConfigError("encoder downsamples the image below 1x1");
  }
}

Matrix to_input(std::span<const Image* const> images, int image_size) {
  const int hw = image_size * image_size;
  Matrix x(static_cast<Eigen::Index>(images.size()), 3 * hw);
  for (std::size_t n = 0; n < images.size(); ++n) {
    const Image& img = *images[n];
    if (img.height != image_size || img.width != image_size) {
      throw ContractViolation("image is " + std::to_string(img.height) + "x" +
                              std::to_string(img.width) + ", encoder expects " +
                              std::to_string(image_size) + "x" + std::to_string(image_size));
    }
    for (int y = 0; y < image_size; ++y) {
      for (int xx = 0; xx < image_size; ++xx) {
        for (int c = 0; c < 3; ++c) x(n, c * hw + y * image_size + xx) = img.at(y, xx, c);
      }
    }
  }
  return x;
}

Matrix to_input(const std::vector<Image>& images, int image_size) {
  std::vector<const Image*> ptrs;
  ptrs.reserve(images.size());
  for (const auto& i : images) ptrs.push_back(&i);
  return to_input(std::span<const Image* const>(ptrs), image_size);
}

ag::ConvGeometry CnnEncoder::block_geometry(const EncoderSpec& spec, int i) {
  int size = spec.image_size;
  int in = 3;
  for (int b = 0; b < i; ++b) {
    size = (size + 2 * (spec.kernel / 2) - spec.kernel) / spec.stride + 1;
    in = spec.channels[b];
  }
  ag::ConvGeometry g;
  g.in_channels = in;
  g.height = size;
  g.width = size;
  g.out_channels = spec.channels[i];
  g.kernel = spec.kernel;
  g.stride = spec.stride;
  g.pad = spec.kernel / 2;
  return g;
}

CnnEncoder::CnnEncoder(const EncoderSpec& spec, int first_block, std::mt19937_64& rng) {
  validate(spec);
  for (int i = first_block; i < static_cast<int>(spec.channels.size()); ++i) {
    blocks_.emplace_back(block_geometry(spec, i), rng);
  }
  head_ = nn::Linear(spec.channels.back(), spec.latent_dim, rng);
  bounded_ = spec.bounded_latent;
}

ag::Var CnnEncoder::forward(nn::Binding& b, const ag::Var& x) const {
  ag::Var h = x;
  for (const auto& block : blocks_) h = ag::relu(block.forward(b, h));
  h = ag::global_avg_pool(h, blocks_.empty() ? 1 : blocks_.back().geometry.out_channels);
  h = head_.forward(b, h);
  return bounded_ ? ag::tanh(h) : h;
}

void CnnEncoder::collect(const std::string& prefix, std::vector<nn::ParamRef>& out) {
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    blocks_[i].collect(prefix + ".block" + std::to_string(i), out);
  }
  head_.collect(prefix + ".head", out);
}

DualEncoder::DualEncoder(const EncoderSpec& spec, std::mt19937_64& rng) : spec_(spec) {
  validate(spec);
  if (spec.share_stem) stem_.emplace(CnnEncoder::block_geometry(spec, 0), rng);
  const int first = spec.share_stem ? 1 : 0;
  causal_ = CnnEncoder(spec, first, rng);
  spurious_ = CnnEncoder(spec, first, rng);
}

ag::Var DualEncoder::stem(nn::Binding& b, const ag::Var& x) const {
  return stem_ ? ag::relu(stem_->forward(b, x)) : x;
}

DualEncoder::Output DualEncoder::forward(nn::Binding& b, const ag::Var& x) const {
  ag::Var h = stem(b, x);
  return {causal_.forward(b, h), spurious_.forward(b, h)};
}

ag::Var DualEncoder::forward_causal(nn::Binding& b, const ag::Var& x) const {
  return causal_.forward(b, stem(b, x));
}

ag::Var DualEncoder::forward_spurious(nn::Binding& b, const ag::Var& x) const {
  return spurious_.forward(b, stem(b, x));
}

std::pair<Matrix, Matrix> DualEncoder::encode_matrix(const Matrix& input) const {
  CAUSALPROTO_REQUIRE(input.cols() == 3 * spec_.image_size * spec_.image_size,
                      "encode: input width does not match the encoder image size");
  ag::Tape tape;
  nn::Binding b(tape, false);
  auto out = forward(b, tape.constant(input));
  return {out.z_c.value(), out.z_s.value()};
}

Matrix DualEncoder::encode_causal_matrix(const Matrix& input) const {
  CAUSALPROTO_REQUIRE(input.cols() == 3 * spec_.image_size * spec_.image_size,
                      "encode: input width does not match the encoder image size");
  ag::Tape tape;
  nn::Binding b(tape, false);
  return forward_causal(b, tape.constant(input)).value();
}

LatentPair DualEncoder::encode(const Image& image) const {
  const Image* ptr = &image;
  auto [zc, zs] = encode_matrix(to_input(std::span<const Image* const>(&ptr, 1), spec_.image_size));
  return {zc.row(0).transpose(), zs.row(0).transpose()};
}

std::vector<LatentPair> DualEncoder::encode_batch(const std::vector<Image>& images) const {
  auto [zc, zs] = encode_matrix(to_input(images, spec_.image_size));
  std::vector<LatentPair> out(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    out[i] = {zc.row(i).transpose(), zs.row(i).transpose()};
  }
  return out;
}

void DualEncoder::collect(const std::string& prefix, std::vector<nn::ParamRef>& out) {
  if (stem_) stem_->collect(prefix + ".stem", out);
  causal_.collect(prefix + ".causal", out);
  spurious_.collect(prefix + ".spurious", out);
}

FusionNet::FusionNet(int latent_dim, int hidden, int num_classes, std::mt19937_64& rng)
    : latent_dim_(latent_dim), num_classes_(num_classes), net_(2 * latent_dim, hidden, num_classes, rng) {}

ag::Var FusionNet::forward(nn::Binding& b, const ag::Var& z_c, const ag::Var& p_s) const {
  CAUSALPROTO_REQUIRE(z_c.cols() == latent_dim_ && p_s.cols() == latent_dim_,
                      "fuse_logits: latent dimension mismatch");
  return net_.forward(b, ag::concat_cols(z_c, p_s));
}

Vector FusionNet::logits(const Vector& z_c, const Vector& p_s) const {
  CAUSALPROTO_REQUIRE(z_c.size() == latent_dim_ && p_s.size() == latent_dim_,
                      "fuse_logits: latent dimension mismatch");
  ag::Tape tape;
  nn::Binding b(tape, false);
  Matrix zc = z_c.transpose();
  Matrix ps = p_s.transpose();
  return forward(b, tape.constant(zc), tape.constant(ps)).value().row(0).transpose();
}

void FusionNet::collect(const std::string& prefix, std::vector<nn::ParamRef>& out) {
  net_.collect(prefix, out);
}

ErmClassifier::ErmClassifier(const EncoderSpec& spec, int num_classes, std::mt19937_64& rng)
    : spec_(spec), encoder_(spec, 0, rng), head_(spec.latent_dim, num_classes, rng) {}

ag::Var ErmClassifier::features(nn::Binding& b, const ag::Var& x) const { return encoder_.forward(b, x); }

ag::Var ErmClassifier::logits(nn::Binding& b, const ag::Var& features) const {
  return head_.forward(b, features);
}

Matrix ErmClassifier::features_matrix(const Matrix& input) const {
  ag::Tape tape;
  nn::Binding b(tape, false);
  return features(b, tape.constant(input)).value();
}

Matrix ErmClassifier::logits_matrix(const Matrix& input) const {
  ag::Tape tape;
  nn::Binding b(tape, false);
  return logits(b, features(b, tape.constant(input))).value();
}

void ErmClassifier::collect(const std::string& prefix, std::vector<nn::ParamRef>& out) {
  encoder_.collect(prefix + ".encoder", out);
  head_.collect(prefix + ".head", out);
}

}  // namespace causalproto::model

#pragma once

// Case-based explanations: nearest projected causal prototypes with their
// source images, occlusion heatmaps, and static PNG/HTML reports.

#include "causalproto/image.hpp"
#include "causalproto/proto_spaces.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace causalproto::explain {

struct PrototypeMatch {
  int index = 0;
  int class_id = 0;
  double distance = 0.0;
  std::string provenance;
  Image thumbnail;  // empty when the source image is unavailable
};

/// The k prototypes closest to z_c in ascending distance (ties: lower index).
/// Throws ContractViolation when the library was never projected.
std::vector<PrototypeMatch> nearest_prototypes(const Vector& z_c, const proto::CausalLibrary& lib, int k,
                                               proto::DistanceKind kind = proto::DistanceKind::euclidean);

/// Maps packed images (N x 3HW) to causal latents (N x D).
using EncodeFn = std::function<Matrix(const Matrix&)>;

struct HeatmapOptions {
  int patch = 8;
  int stride = 4;
  proto::DistanceKind kind = proto::DistanceKind::euclidean;
};

/// Occlusion attribution: heat at a patch position is the increase in
/// distance to `prototype` when that patch is replaced by the image's
/// per-channel mean. The coarse grid is bilinearly upsampled to H x W and
/// min-max normalised; a map with zero range becomes all zeros.
Matrix similarity_heatmap(const Image& image, const EncodeFn& encode, const Vector& prototype,
                          const HeatmapOptions& opt = {});
/// Same for prototype `index` of a projected library.
Matrix similarity_heatmap(const Image& image, const EncodeFn& encode, const proto::CausalLibrary& lib,
                          int index, const HeatmapOptions& opt = {});

/// Mean heat over pixels where mask != 0 (0 when the mask is empty).
double region_mean(const Matrix& heatmap, const std::vector<std::uint8_t>& mask);

struct ExplanationBundle {
  std::string sample_id;
  Image input;
  int label = -1;  // -1 when unknown
  Vector probs;
  int predicted = 0;
  std::vector<PrototypeMatch> topk;
  /// Prototype the heatmap refers to: nearest prototype of the predicted class.
  int heatmap_prototype = 0;
  Matrix heatmap;
  /// Per-context probabilities (M x C); empty for models without contexts.
  Matrix per_context;
  /// Mean entropy (nats) of the per-context probability rows.
  double context_entropy = 0.0;
};

/// Everything needed to explain samples of one trained model.
struct Explainer {
  EncodeFn encode;
  proto::CausalLibrary library;
  /// Class probabilities and per-context rows for a causal latent.
  std::function<std::pair<Vector, Matrix>(const Vector&)> predict;
  int image_size = 32;
  /// Source images by sample id, for prototype thumbnails.
  std::map<std::string, Image> sources;
  HeatmapOptions heatmap;
  proto::DistanceKind kind = proto::DistanceKind::euclidean;

  ExplanationBundle explain(const Image& image, const std::string& sample_id, int k, int label = -1) const;
};

/// Writes panel PNGs and index.html into out_dir. File names depend only on
/// bundle order and sample ids, so equal inputs give identical files.
void render_report(const std::vector<ExplanationBundle>& bundles, const std::filesystem::path& out_dir);

/// Blends a heat map over the image with a black-red-yellow ramp.
Image overlay(const Image& image, const Matrix& heatmap, double alpha = 0.6);

}  // namespace causalproto::explain

#pragma once

// Synthetic images drawn from a structural causal model X <- (C, S), Y <- C
// with a tunable backdoor between the artifact S and the label Y, plus the
// on-disk manifest format shared with real image folders.

#include "causalproto/image.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace causalproto::datagen {

enum class Split { train, val, test };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct ScmConfig {
  int num_classes = 3;
  int num_artifacts = 3;
  int image_size = 32;
  /// Probability that the artifact id equals (label mod num_artifacts); else uniform.
  double rho_train = 0.9;
  double rho_test = 0.0;
  int samples_per_split = 600;
  double noise_std = 0.03;
  /// Opacity of the rendered artifacts in (0, 1].
  double artifact_strength = 1.0;
  std::uint64_t seed = 0;
  /// When false, lesions stay inside the central disk and artifacts inside the border band.
  bool overlap = false;
};

/// Throws ConfigError on C < 2, num_artifacts < 2, image_size < 16, rho outside [0, 1], ...
void validate(const ScmConfig& cfg);

struct ImageSample {
  Image pixels;
  int label = 0;
  std::optional<int> artifact_id;
  std::string sample_id;
};

/// Per-pixel ground truth for one generated sample (row-major, H*W).
struct RegionMasks {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> causal;
  std::vector<std::uint8_t> artifact;
};

struct GeneratedSample {
  ImageSample sample;
  RegionMasks masks;
};

/// rho applied to a split: train and val use rho_train, test uses rho_test.
double split_rho(const ScmConfig& cfg, Split split);

/// Renders sample `index` of `split`. Depends only on (cfg, split, index).
GeneratedSample generate_sample(const ScmConfig& cfg, Split split, int index);

/// All samples of a split. `threads` > 1 generates in parallel with identical output.
std::vector<ImageSample> generate_dataset(const ScmConfig& cfg, Split split, int threads = 1);
std::vector<GeneratedSample> generate_with_masks(const ScmConfig& cfg, Split split,
                                                 int threads = 1);

inline constexpr const char* kManifestName = "manifest.csv";
inline constexpr const char* kManifestHeader = "sample_id,path,label,artifact_id";

/// Writes `dir/images/<sample_id>.png` and `dir/manifest.csv`.
void write_manifest(const std::vector<ImageSample>& samples, const std::filesystem::path& dir);

/// Loads `dir/manifest.csv`; images are resampled to image_size x image_size.
std::vector<ImageSample> read_manifest(const std::filesystem::path& dir, int image_size);

/// Builds a manifest for an existing folder of PNGs labelled by a CSV with
/// header `image_id,label` (image file `<image_id>.png`). Artifact ids are left blank.
void import_labeled_folder(const std::filesystem::path& image_dir,
                           const std::filesystem::path& labels_csv,
                           const std::filesystem::path& out_dir);

/// Counts (label, artifact) co-occurrences; rows are labels.
std::vector<std::vector<int>> contingency(const std::vector<ImageSample>& samples,
                                          int num_classes, int num_artifacts);

}  // namespace causalproto::datagen

#pragma once

// Run configuration: training and data-generation settings as one JSON
// document, dotted-key overrides, a content hash, and the run manifest.

#include "causalproto/datagen.hpp"
#include "causalproto/trainer.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace causalproto::config {

struct RunConfig {
  train::TrainConfig train;
  datagen::ScmConfig data;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  /// Worker threads for data generation only.
  int threads = 1;
};

/// Pretty-printed JSON with every effective field; training fields at the top
/// level, generator fields under "data".
std::string to_json(const RunConfig& cfg);
/// Strict parse: unknown keys and wrong types raise ConfigError.
RunConfig from_json(const std::string& text);
RunConfig load(const std::filesystem::path& path);
void save(const std::filesystem::path& path, const RunConfig& cfg);

/// Applies `key=value` where key is dotted ("data.rho_train", "encoder.latent_dim").
/// The value is read as JSON when it parses, as a bare string otherwise.
/// The ablation key also accepts a variant name ("no_mi", "no_mi+no_do", "erm").
void apply_override(RunConfig& cfg, const std::string& assignment);

/// Git-style blob SHA-1 of the canonical (compact, key-sorted) JSON form.
/// Two configs hash equally iff every effective field is equal.
std::string config_hash(const RunConfig& cfg);

/// Generator settings for run seed `seed`: the data seed is offset by it so
/// repeated seeds also resample the data.
datagen::ScmConfig data_for_seed(const RunConfig& cfg, std::uint64_t seed);

/// Output root: $CAUSALPROTO_OUT when set, else `fallback`.
std::filesystem::path output_root(const std::filesystem::path& fallback = "runs");

/// Snapshot written as run.json at the top of every run directory.
struct RunManifest {
  RunConfig config;
  std::string hash;
  std::string command;
  /// Relative paths of files the run produced.
  std::vector<std::string> artifacts;

  std::string to_json() const;
  static RunManifest from_json(const std::string& text);
  static RunManifest read(const std::filesystem::path& run_dir);
  void write(const std::filesystem::path& run_dir) const;
};

inline constexpr const char* kRunManifestName = "run.json";

}  // namespace causalproto::config

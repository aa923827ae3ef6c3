#include "causalproto/datagen.hpp"

#include "causalproto/error.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <thread>

namespace causalproto::datagen {

namespace fs = std::filesystem;

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + s + "' (expected train|val|test)");
}

void validate(const ScmConfig& cfg) {
  if (cfg.num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (cfg.num_artifacts < 2) throw ConfigError("num_artifacts must be >= 2");
  if (cfg.image_size < 16) throw ConfigError("image_size must be >= 16");
  if (!(cfg.rho_train >= 0.0 && cfg.rho_train <= 1.0)) throw ConfigError("rho_train must lie in [0,1]");
  if (!(cfg.rho_test >= 0.0 && cfg.rho_test <= 1.0)) throw ConfigError("rho_test must lie in [0,1]");
  if (cfg.samples_per_split < 0) throw ConfigError("samples_per_split must be >= 0");
  if (!(cfg.noise_std >= 0.0)) throw ConfigError("noise_std must be >= 0");
  if (!(cfg.artifact_strength > 0.0 && cfg.artifact_strength <= 1.0)) {
    throw ConfigError("artifact_strength must be in (0, 1]");
  }
}

double split_rho(const ScmConfig& cfg, Split split) {
  return split == Split::test ? cfg.rho_test : cfg.rho_train;
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::uint64_t sample_seed(std::uint64_t seed, Split split, int index) {
  const std::uint64_t lane = static_cast<std::uint64_t>(split) + 1;
  return splitmix64(splitmix64(seed) ^ splitmix64((lane << 40) + static_cast<std::uint64_t>(index)));
}

using Rgb = std::array<double, 3>;

Rgb permute(const Rgb& c, int shift) {
  return {c[(0 + shift) % 3], c[(1 + shift) % 3], c[(2 + shift) % 3]};
}

class Renderer {
 public:
  Renderer(const ScmConfig& cfg, std::mt19937_64& rng)
      : cfg_(cfg),
        rng_(rng),
        size_(cfg.image_size),
        band_(std::max(2, static_cast<int>(std::lround(0.125 * cfg.image_size)))),
        img_(cfg.image_size, cfg.image_size),
        causal_(static_cast<std::size_t>(size_) * size_, 0),
        artifact_(static_cast<std::size_t>(size_) * size_, 0) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }

  void background() {
    const Rgb skin{0.86 * uniform(0.92, 1.04), 0.68 * uniform(0.92, 1.04), 0.58 * uniform(0.92, 1.04)};
    const double phase = uniform(0.0, 2.0 * std::numbers::pi);
    const double angle = uniform(0.0, 2.0 * std::numbers::pi);
    for (int y = 0; y < size_; ++y) {
      for (int x = 0; x < size_; ++x) {
        const double t = (std::cos(angle) * x + std::sin(angle) * y) / size_;
        const double shade = 1.0 + 0.03 * std::sin(2.0 * std::numbers::pi * t + phase);
        for (int c = 0; c < 3; ++c) img_.at(y, x, c) = skin[c] * shade;
      }
    }
    skin_ = skin;
  }

  // Morphology depends on the class only: shape mode y % 3 (round, lobed,
  // striated) and centre variant (y / 3) % 3 (plain, pale centre, dark core).
  void lesion(int label) {
    const double mid = (size_ - 1) / 2.0;
    const double cx = mid + uniform(-0.03, 0.03) * size_;
    const double cy = mid + uniform(-0.03, 0.03) * size_;
    const double r0 = 0.22 * size_ * uniform(0.9, 1.1);
    const double rot = uniform(0.0, 2.0 * std::numbers::pi);
    const double aspect = uniform(1.0, 1.15);
    const double tone = uniform(0.75, 1.2);
    const Rgb base{0.42 * tone, 0.26 * tone, 0.18 * tone};
    const int mode = label % 3;
    const int variant = (label / 3) % 3;
    const int lobes = 5 + (label / 9) % 3;
    const double wobble = uniform(0.0, 2.0 * std::numbers::pi);
    const double limit = size_ / 2.0 - band_;

    for (int y = 0; y < size_; ++y) {
      for (int x = 0; x < size_; ++x) {
        const double dx = x - cx;
        const double dy = y - cy;
        const double u = std::cos(rot) * dx + std::sin(rot) * dy;
        const double w = (-std::sin(rot) * dx + std::cos(rot) * dy) * aspect;
        const double r = std::hypot(u, w);
        const double theta = std::atan2(w, u);
        double radius = r0;
        if (mode == 1) radius *= 1.0 + 0.32 * std::cos(lobes * theta) + 0.05 * std::cos(3 * theta + wobble);
        double alpha = std::clamp(radius - r + 0.5, 0.0, 1.0);
        if (!cfg_.overlap && std::hypot(x - mid, y - mid) > limit) alpha = 0.0;
        if (alpha <= 0.0) continue;

        Rgb col = base;
        if (mode == 2) {
          const double stripe = std::sin(2.0 * std::numbers::pi * u / (0.55 * r0));
          for (double& c : col) c *= 1.0 + 0.6 * stripe;
        }
        if (variant == 1 && r < 0.45 * radius) {
          for (int c = 0; c < 3; ++c) col[c] = 0.4 * col[c] + 0.6 * skin_[c];
        } else if (variant == 2 && r < 0.3 * radius) {
          for (double& c : col) c *= 0.4;
        }
        for (int c = 0; c < 3; ++c) {
          img_.at(y, x, c) = (1.0 - alpha) * img_.at(y, x, c) + alpha * col[c];
        }
        if (alpha > 0.5) causal_[static_cast<std::size_t>(y) * size_ + x] = 1;
      }
    }
  }

  void paint(int y, int x, const Rgb& col) {
    if (y < 0 || y >= size_ || x < 0 || x >= size_) return;
    const double a = cfg_.artifact_strength;
    for (int c = 0; c < 3; ++c) img_.at(y, x, c) = (1.0 - a) * img_.at(y, x, c) + a * col[c];
    artifact_[static_cast<std::size_t>(y) * size_ + x] = 1;
  }

  // One visual style per artifact id; ids beyond six reuse a style with permuted colours.
  void artifact(int id) {
    const int style = id % 6;
    const int shift = (id / 6) % 3;
    const int reach = cfg_.overlap ? size_ / 2 : band_;
    switch (style) {
      case 0: {  // corner colour patch, top-left
        const Rgb col = permute({0.15, 0.35, 0.95}, shift);
        for (int y = 0; y < reach; ++y)
          for (int x = 0; x < 2 * band_; ++x) paint(y, x, col);
        break;
      }
      case 1: {  // ruler hash marks along the bottom edge
        const Rgb col = permute({0.08, 0.08, 0.1}, shift);
        const int offset = static_cast<int>(uniform(0.0, 3.0));
        for (int x = offset; x < size_; x += 3) {
          const int len = (x / 3) % 2 == 0 ? reach : std::max(1, reach / 2);
          for (int k = 0; k < len; ++k) paint(size_ - 1 - k, x, col);
        }
        break;
      }
      case 2: {  // dark frame vignette
        for (int y = 0; y < size_; ++y) {
          for (int x = 0; x < size_; ++x) {
            const int d = std::min({y, x, size_ - 1 - y, size_ - 1 - x});
            if (d >= reach) continue;
            const double f = 1.0 - cfg_.artifact_strength * (0.7 - 0.6 * static_cast<double>(d) / reach);
            for (int c = 0; c < 3; ++c) {
              img_.at(y, x, c) *= shift == 0 ? f : (c == shift ? 1.0 : f);
            }
            artifact_[static_cast<std::size_t>(y) * size_ + x] = 1;
          }
        }
        break;
      }
      case 3: {  // hair strokes running parallel to a border
        const Rgb col = permute({0.12, 0.08, 0.06}, shift);
        for (int s = 0; s < 3; ++s) {
          const int side = static_cast<int>(uniform(0.0, 4.0));
          const double depth = uniform(0.5, reach - 0.5);
          const double start = uniform(0.0, 0.4) * size_;
          const double len = uniform(0.4, 0.6) * size_;
          const double bend = uniform(-1.0, 1.0);
          for (double t = 0.0; t <= 1.0; t += 0.5 / size_) {
            const double along = start + t * len;
            const double across = depth + bend * std::sin(std::numbers::pi * t);
            const int a = static_cast<int>(std::lround(along));
            const int b = static_cast<int>(std::lround(std::clamp(across, 0.0, reach - 1.0)));
            switch (side) {
              case 0: paint(b, a, col); break;
              case 1: paint(size_ - 1 - b, a, col); break;
              case 2: paint(a, b, col); break;
              default: paint(a, size_ - 1 - b, col); break;
            }
          }
        }
        break;
      }
      case 4: {  // corner colour patch, bottom-right
        const Rgb col = permute({0.2, 0.8, 0.3}, shift);
        for (int y = size_ - reach; y < size_; ++y)
          for (int x = size_ - 2 * band_; x < size_; ++x) paint(y, x, col);
        break;
      }
      default: {  // specular bubbles
        const Rgb col = permute({0.97, 0.97, 0.97}, shift);
        for (int b = 0; b < 4; ++b) {
          const int side = static_cast<int>(uniform(0.0, 4.0));
          const double along = uniform(0.1, 0.9) * size_;
          const double across = uniform(0.5, reach - 0.5);
          double by = 0, bx = 0;
          switch (side) {
            case 0: by = across; bx = along; break;
            case 1: by = size_ - 1 - across; bx = along; break;
            case 2: by = along; bx = across; break;
            default: by = along; bx = size_ - 1 - across; break;
          }
          for (int y = static_cast<int>(by) - 2; y <= static_cast<int>(by) + 2; ++y)
            for (int x = static_cast<int>(bx) - 2; x <= static_cast<int>(bx) + 2; ++x)
              if (std::hypot(y - by, x - bx) <= 1.3) paint(y, x, col);
        }
        break;
      }
    }
  }

  void noise() {
    if (cfg_.noise_std > 0.0) {
      std::normal_distribution<double> n(0.0, cfg_.noise_std);
      for (double& v : img_.data) v += n(rng_);
    }
    quantize_8bit(img_);
  }

  GeneratedSample finish(ImageSample s) {
    s.pixels = std::move(img_);
    GeneratedSample out{std::move(s), RegionMasks{size_, size_, std::move(causal_), std::move(artifact_)}};
    return out;
  }

 private:
  const ScmConfig& cfg_;
  std::mt19937_64& rng_;
  int size_;
  int band_;
  Image img_;
  Rgb skin_{};
  std::vector<std::uint8_t> causal_;
  std::vector<std::uint8_t> artifact_;
};

template <typename T, typename Fn>
std::vector<T> parallel_generate(int count, int threads, Fn fn) {
  std::vector<T> out(count);
  threads = std::clamp(threads, 1, std::max(1, count));
  if (threads == 1) {
    for (int i = 0; i < count; ++i) out[i] = fn(i);
    return out;
  }
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      for (int i = t; i < count; i += threads) out[i] = fn(i);
    });
  }
  for (auto& th : pool) th.join();
  return out;
}

}  // namespace

GeneratedSample generate_sample(const ScmConfig& cfg, Split split, int index) {
  validate(cfg);
  std::mt19937_64 rng(sample_seed(cfg.seed, split, index));
  const int label = std::uniform_int_distribution<int>(0, cfg.num_classes - 1)(rng);
  const double rho = split_rho(cfg, split);
  int artifact = 0;
  if (std::uniform_real_distribution<double>(0.0, 1.0)(rng) < rho) {
    artifact = label % cfg.num_artifacts;
  } else {
    artifact = std::uniform_int_distribution<int>(0, cfg.num_artifacts - 1)(rng);
  }

  Renderer r(cfg, rng);
  r.background();
  r.lesion(label);
  r.artifact(artifact);
  r.noise();

  ImageSample s;
  s.label = label;
  s.artifact_id = artifact;
  char id[32];
  std::snprintf(id, sizeof(id), "%s_%06d", to_string(split).c_str(), index);
  s.sample_id = id;
  return r.finish(std::move(s));
}

std::vector<GeneratedSample> generate_with_masks(const ScmConfig& cfg, Split split, int threads) {
  validate(cfg);
  return parallel_generate<GeneratedSample>(cfg.samples_per_split, threads,
                                            [&](int i) { return generate_sample(cfg, split, i); });
}

std::vector<ImageSample> generate_dataset(const ScmConfig& cfg, Split split, int threads) {
  validate(cfg);
  return parallel_generate<ImageSample>(cfg.samples_per_split, threads,
                                        [&](int i) { return generate_sample(cfg, split, i).sample; });
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string strip_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

int parse_int(const std::string& text, const std::string& file, std::size_t line, const char* what) {
  std::size_t pos = 0;
  int v = 0;
  try {
    v = std::stoi(text, &pos);
  } catch (const std::exception&) {
    throw ParseError(file, line, std::string("invalid ") + what + " '" + text + "'");
  }
  if (pos != text.size()) throw ParseError(file, line, std::string("invalid ") + what + " '" + text + "'");
  return v;
}

void write_lines(const fs::path& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& l : lines) out << l << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace

void write_manifest(const std::vector<ImageSample>& samples, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (ec) throw IoError("cannot create directory " + (dir / "images").string() + ": " + ec.message());
  std::vector<std::string> lines{kManifestHeader};
  for (const auto& s : samples) {
    if (s.sample_id.empty() || s.sample_id.find_first_of(",\n\r/") != std::string::npos) {
      throw ContractViolation("sample_id '" + s.sample_id + "' is empty or contains , / or newline");
    }
    const std::string rel = "images/" + s.sample_id + ".png";
    write_png(dir / rel, s.pixels);
    lines.push_back(s.sample_id + "," + rel + "," + std::to_string(s.label) + "," +
                    (s.artifact_id ? std::to_string(*s.artifact_id) : std::string{}));
  }
  write_lines(dir / kManifestName, lines);
}

std::vector<ImageSample> read_manifest(const fs::path& dir, int image_size) {
  const fs::path path = dir / kManifestName;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest " + path.string());
  const std::string file = path.string();
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) throw ParseError(file, 1, "missing header line");
  ++lineno;
  if (strip_cr(line) != kManifestHeader) {
    throw ParseError(file, lineno, std::string("expected header '") + kManifestHeader + "'");
  }
  std::vector<ImageSample> out;
  while (std::getline(in, line)) {
    ++lineno;
    line = strip_cr(line);
    if (line.empty()) continue;
    const auto fields = split_csv(line);
    if (fields.size() != 4) {
      throw ParseError(file, lineno, "expected 4 fields, got " + std::to_string(fields.size()));
    }
    ImageSample s;
    s.sample_id = fields[0];
    if (s.sample_id.empty()) throw ParseError(file, lineno, "empty sample_id");
    s.label = parse_int(fields[2], file, lineno, "label");
    if (s.label < 0) throw ParseError(file, lineno, "negative label");
    if (!fields[3].empty()) {
      s.artifact_id = parse_int(fields[3], file, lineno, "artifact_id");
      if (*s.artifact_id < 0) throw ParseError(file, lineno, "negative artifact_id");
    }
    try {
      s.pixels = resize_bilinear(read_png(dir / fields[1]), image_size, image_size);
    } catch (const IoError& e) {
      throw ParseError(file, lineno, e.what());
    }
    out.push_back(std::move(s));
  }
  return out;
}

void import_labeled_folder(const fs::path& image_dir, const fs::path& labels_csv,
                           const fs::path& out_dir) {
  std::ifstream in(labels_csv, std::ios::binary);
  if (!in) throw IoError("cannot open label file " + labels_csv.string());
  const std::string file = labels_csv.string();
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) throw ParseError(file, 1, "missing header line");
  ++lineno;
  if (strip_cr(line) != "image_id,label") throw ParseError(file, lineno, "expected header 'image_id,label'");

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create directory " + out_dir.string() + ": " + ec.message());
  const fs::path abs_out = fs::absolute(out_dir);
  std::vector<std::string> lines{kManifestHeader};
  while (std::getline(in, line)) {
    ++lineno;
    line = strip_cr(line);
    if (line.empty()) continue;
    const auto fields = split_csv(line);
    if (fields.size() != 2) throw ParseError(file, lineno, "expected 2 fields");
    const int label = parse_int(fields[1], file, lineno, "label");
    const fs::path image = fs::absolute(image_dir / (fields[0] + ".png"));
    if (!fs::exists(image)) throw ParseError(file, lineno, "missing image " + image.string());
    lines.push_back(fields[0] + "," + fs::relative(image, abs_out).generic_string() + "," +
                    std::to_string(label) + ",");
  }
  write_lines(out_dir / kManifestName, lines);
}

std::vector<std::vector<int>> contingency(const std::vector<ImageSample>& samples, int num_classes,
                                          int num_artifacts) {
  std::vector<std::vector<int>> table(num_classes, std::vector<int>(num_artifacts, 0));
  for (const auto& s : samples) {
    CAUSALPROTO_REQUIRE(s.label >= 0 && s.label < num_classes, "contingency: label out of range");
    CAUSALPROTO_REQUIRE(s.artifact_id.has_value(), "contingency: sample without artifact id");
    CAUSALPROTO_REQUIRE(*s.artifact_id >= 0 && *s.artifact_id < num_artifacts,
                        "contingency: artifact out of range");
    ++table[s.label][*s.artifact_id];
  }
  return table;
}

}  // namespace causalproto::datagen

#include "causalproto/explain.hpp"

#include "causalproto/error.hpp"
#include "causalproto/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace causalproto::explain {

std::vector<PrototypeMatch> nearest_prototypes(const Vector& z_c, const proto::CausalLibrary& lib, int k,
                                               proto::DistanceKind kind) {
  CAUSALPROTO_REQUIRE(lib.size() > 0, "nearest_prototypes: empty library");
  CAUSALPROTO_REQUIRE(k >= 1 && k <= lib.size(), "nearest_prototypes: k must be in [1, K_total]");
  CAUSALPROTO_REQUIRE(z_c.size() == lib.dim(), "nearest_prototypes: latent dimension mismatch");
  if (!lib.projected()) {
    throw ContractViolation(
        "causal prototypes carry no provenance; run prototype projection before asking for explanations");
  }
  std::vector<std::pair<double, int>> d;
  for (int p = 0; p < lib.size(); ++p) {
    d.emplace_back(proto::distance(z_c, lib.prototypes.row(p).transpose(), kind), p);
  }
  std::sort(d.begin(), d.end());
  std::vector<PrototypeMatch> out;
  for (int i = 0; i < k; ++i) {
    PrototypeMatch m;
    m.index = d[i].second;
    m.class_id = lib.class_of[m.index];
    m.distance = d[i].first;
    m.provenance = *lib.provenance[m.index];
    out.push_back(std::move(m));
  }
  return out;
}

namespace {

std::vector<int> positions(int size, int patch, int stride) {
  std::vector<int> out;
  for (int p = 0; p + patch <= size; p += stride) out.push_back(p);
  if (out.empty() || out.back() + patch < size) out.push_back(size - patch);
  return out;
}

// Linear interpolation weights of pixel coordinate `v` between grid centres.
std::pair<int, double> locate(double v, const std::vector<double>& centres) {
  if (centres.size() == 1 || v <= centres.front()) return {0, 0.0};
  if (v >= centres.back()) return {static_cast<int>(centres.size()) - 2, 1.0};
  int i = 0;
  while (centres[i + 1] < v) ++i;
  return {i, (v - centres[i]) / (centres[i + 1] - centres[i])};
}

}  // namespace

Matrix similarity_heatmap(const Image& image, const EncodeFn& encode, const Vector& prototype,
                          const HeatmapOptions& opt) {
  CAUSALPROTO_REQUIRE(opt.patch >= 1 && opt.stride >= 1, "similarity_heatmap: patch and stride must be positive");
  if (opt.patch > image.height || opt.patch > image.width) {
    throw ContractViolation("similarity_heatmap: occlusion patch " + std::to_string(opt.patch) +
                            " is larger than the " + std::to_string(image.height) + "x" +
                            std::to_string(image.width) + " image");
  }
  const int h = image.height;
  const int w = image.width;
  double mean[3] = {0, 0, 0};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) mean[c] += image.at(y, x, c);
  for (double& m : mean) m /= static_cast<double>(h) * w;

  const std::vector<int> ys = positions(h, opt.patch, opt.stride);
  const std::vector<int> xs = positions(w, opt.patch, opt.stride);
  std::vector<Image> batch;
  batch.push_back(image);
  for (int py : ys) {
    for (int px : xs) {
      Image occ = image;
      for (int y = py; y < py + opt.patch; ++y)
        for (int x = px; x < px + opt.patch; ++x)
          for (int c = 0; c < 3; ++c) occ.at(y, x, c) = mean[c];
      batch.push_back(std::move(occ));
    }
  }
  CAUSALPROTO_REQUIRE(h == w, "similarity_heatmap: square images expected");
  const Matrix z = encode(model::to_input(batch, h));
  CAUSALPROTO_REQUIRE(z.cols() == prototype.size(), "similarity_heatmap: latent dimension mismatch");
  const double base = proto::distance(z.row(0).transpose(), prototype, opt.kind);

  Matrix grid(static_cast<Eigen::Index>(ys.size()), static_cast<Eigen::Index>(xs.size()));
  for (std::size_t i = 0; i < ys.size(); ++i)
    for (std::size_t j = 0; j < xs.size(); ++j)
      grid(i, j) = proto::distance(z.row(1 + i * xs.size() + j).transpose(), prototype, opt.kind) - base;

  std::vector<double> cy, cx;
  for (int p : ys) cy.push_back(p + opt.patch / 2.0 - 0.5);
  for (int p : xs) cx.push_back(p + opt.patch / 2.0 - 0.5);
  Matrix heat(h, w);
  for (int y = 0; y < h; ++y) {
    const auto [iy, ty] = locate(y, cy);
    const int iy1 = std::min(iy + 1, static_cast<int>(cy.size()) - 1);
    for (int x = 0; x < w; ++x) {
      const auto [ix, tx] = locate(x, cx);
      const int ix1 = std::min(ix + 1, static_cast<int>(cx.size()) - 1);
      const double top = (1 - tx) * grid(iy, ix) + tx * grid(iy, ix1);
      const double bot = (1 - tx) * grid(iy1, ix) + tx * grid(iy1, ix1);
      heat(y, x) = (1 - ty) * top + ty * bot;
    }
  }
  const double lo = heat.minCoeff();
  const double range = heat.maxCoeff() - lo;
  if (!(range > 1e-12)) return Matrix::Zero(h, w);
  return (heat.array() - lo) / range;
}

Matrix similarity_heatmap(const Image& image, const EncodeFn& encode, const proto::CausalLibrary& lib, int index,
                          const HeatmapOptions& opt) {
  CAUSALPROTO_REQUIRE(index >= 0 && index < lib.size(), "similarity_heatmap: prototype index out of range");
  if (!lib.projected()) {
    throw ContractViolation("similarity_heatmap: causal prototypes are not projected; run projection first");
  }
  return similarity_heatmap(image, encode, Vector(lib.prototypes.row(index).transpose()), opt);
}

double region_mean(const Matrix& heatmap, const std::vector<std::uint8_t>& mask) {
  CAUSALPROTO_REQUIRE(static_cast<Eigen::Index>(mask.size()) == heatmap.size(), "region_mean: mask size mismatch");
  double sum = 0.0;
  long n = 0;
  for (Eigen::Index i = 0; i < heatmap.rows(); ++i) {
    for (Eigen::Index j = 0; j < heatmap.cols(); ++j) {
      if (mask[i * heatmap.cols() + j]) {
        sum += heatmap(i, j);
        ++n;
      }
    }
  }
  return n == 0 ? 0.0 : sum / n;
}

ExplanationBundle Explainer::explain(const Image& image, const std::string& sample_id, int k, int label) const {
  ExplanationBundle b;
  b.sample_id = sample_id;
  b.input = image;
  b.label = label;
  const Matrix z = encode(model::to_input(std::vector<Image>{image}, image_size));
  const Vector z_c = z.row(0).transpose();
  auto [probs, per_context] = predict(z_c);
  b.probs = probs;
  b.probs.maxCoeff(&b.predicted);
  b.per_context = per_context;
  if (per_context.rows() > 0) {
    double h = 0.0;
    for (Eigen::Index m = 0; m < per_context.rows(); ++m) {
      for (Eigen::Index c = 0; c < per_context.cols(); ++c) {
        const double p = per_context(m, c);
        if (p > 0.0) h -= p * std::log(p);
      }
    }
    b.context_entropy = h / static_cast<double>(per_context.rows());
  }
  b.topk = nearest_prototypes(z_c, library, k, kind);
  for (auto& m : b.topk) {
    auto it = sources.find(m.provenance);
    if (it != sources.end()) m.thumbnail = it->second;
  }
  double best = std::numeric_limits<double>::infinity();
  b.heatmap_prototype = b.topk.front().index;
  for (int p = 0; p < library.size(); ++p) {
    if (library.class_of[p] != b.predicted) continue;
    const double d = proto::distance(z_c, library.prototypes.row(p).transpose(), kind);
    if (d < best) {
      best = d;
      b.heatmap_prototype = p;
    }
  }
  HeatmapOptions hopt = heatmap;
  hopt.kind = kind;
  b.heatmap = similarity_heatmap(image, encode, library, b.heatmap_prototype, hopt);
  return b;
}

Image overlay(const Image& image, const Matrix& heatmap, double alpha) {
  CAUSALPROTO_REQUIRE(heatmap.rows() == image.height && heatmap.cols() == image.width, "overlay: size mismatch");
  Image out = image;
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      const double v = std::clamp(heatmap(y, x), 0.0, 1.0);
      const double ramp[3] = {std::min(1.0, 2.0 * v), std::max(0.0, 2.0 * v - 1.0), 0.0};
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = (1.0 - alpha) * image.at(y, x, c) + alpha * ramp[c];
    }
  }
  quantize_8bit(out);
  return out;
}

namespace {

std::string safe_name(const std::string& s) {
  std::string out;
  for (char ch : s) out.push_back(std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_' ? ch : '_');
  return out;
}

std::string html_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out.push_back(ch);
    }
  }
  return out;
}

// Input and heat overlay side by side with a 2-pixel gap.
Image side_by_side(const Image& a, const Image& b) {
  Image out(a.height, a.width + 2 + b.width, 1.0);
  for (int y = 0; y < a.height; ++y) {
    for (int x = 0; x < a.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = a.at(y, x, c);
    for (int x = 0; x < b.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, a.width + 2 + x, c) = b.at(y, x, c);
  }
  return out;
}

}  // namespace

void render_report(const std::vector<ExplanationBundle>& bundles, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create report directory " + out_dir.string() + ": " + ec.message());
  std::ostringstream html;
  html << std::fixed << std::setprecision(4);
  html << "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Explanations</title>\n"
       << "<style>body{font-family:sans-serif}img{image-rendering:pixelated;margin:2px}"
       << ".panel{border:1px solid #ccc;padding:8px;margin:8px 0}.protos{display:flex;gap:8px}"
       << "figure{margin:0;text-align:center;font-size:12px}</style></head><body>\n"
       << "<h1>Explanations</h1>\n";
  for (std::size_t i = 0; i < bundles.size(); ++i) {
    const auto& b = bundles[i];
    std::ostringstream stem;
    stem << std::setw(4) << std::setfill('0') << i << "_" << safe_name(b.sample_id);
    const std::string main_png = stem.str() + "_input_heat.png";
    write_png(out_dir / main_png, side_by_side(b.input, overlay(b.input, b.heatmap)));
    html << "<div class=\"panel\"><h2>" << html_escape(b.sample_id) << "</h2>\n<p>predicted class "
         << b.predicted;
    if (b.label >= 0) html << ", label " << b.label;
    html << "; probabilities [";
    for (Eigen::Index c = 0; c < b.probs.size(); ++c) html << (c ? ", " : "") << b.probs(c);
    html << "]";
    if (b.per_context.rows() > 0) html << "; mean per-context entropy " << b.context_entropy << " nats";
    html << "; heatmap w.r.t. prototype #" << b.heatmap_prototype << "</p>\n";
    html << "<img src=\"" << main_png << "\" width=\"" << 3 * (2 * b.input.width + 2) << "\" alt=\"input and heatmap\">\n";
    html << "<div class=\"protos\">\n";
    for (std::size_t k = 0; k < b.topk.size(); ++k) {
      const auto& m = b.topk[k];
      const std::string png = stem.str() + "_proto" + std::to_string(k) + ".png";
      if (!m.thumbnail.empty()) {
        write_png(out_dir / png, m.thumbnail);
      } else {
        write_png(out_dir / png, Image(std::max(1, b.input.height), std::max(1, b.input.width), 0.5));
      }
      html << "<figure><img src=\"" << png << "\" width=\"96\" alt=\"prototype " << m.index << "\">"
           << "<figcaption>#" << m.index << " class " << m.class_id << "<br>d = " << m.distance << "<br>"
           << html_escape(m.provenance) << "</figcaption></figure>\n";
    }
    html << "</div></div>\n";
  }
  html << "</body></html>\n";
  std::ofstream os(out_dir / "index.html", std::ios::trunc);
  if (!os) throw IoError("cannot write " + (out_dir / "index.html").string());
  os << html.str();
  if (!os) throw IoError("failed writing " + (out_dir / "index.html").string());
}

}  // namespace causalproto::explain

#include "causalproto/metrics.hpp"

#include "causalproto/error.hpp"

#include <boost/math/distributions/students_t.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

namespace causalproto::metrics {

Classification classification_metrics(const std::vector<int>& preds, const std::vector<int>& labels,
                                       int num_classes) {
  CAUSALPROTO_REQUIRE(preds.size() == labels.size(), "classification_metrics: length mismatch");
  CAUSALPROTO_REQUIRE(!labels.empty(), "classification_metrics: empty input");
  CAUSALPROTO_REQUIRE(num_classes >= 1, "classification_metrics: num_classes < 1");
  std::vector<long> tp(num_classes, 0), support(num_classes, 0), predicted(num_classes, 0);
  long correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    const int p = preds[i];
    CAUSALPROTO_REQUIRE(y >= 0 && y < num_classes && p >= 0 && p < num_classes,
                        "classification_metrics: class id out of range");
    ++support[y];
    ++predicted[p];
    if (p == y) {
      ++tp[y];
      ++correct;
    }
  }
  Classification out;
  out.acc = static_cast<double>(correct) / static_cast<double>(labels.size());
  double recall_sum = 0.0;
  int present = 0;
  double f1_sum = 0.0;
  for (int c = 0; c < num_classes; ++c) {
    if (support[c] > 0) {
      recall_sum += static_cast<double>(tp[c]) / static_cast<double>(support[c]);
      ++present;
    }
    const long denom = support[c] + predicted[c];
    f1_sum += denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp[c]) / static_cast<double>(denom);
  }
  out.bacc = recall_sum / present;
  out.macro_f1 = f1_sum / num_classes;
  return out;
}

double prototype_purity(const proto::CausalLibrary& lib, const Matrix& latents,
                        const std::vector<int>& labels, int n_neighbors) {
  CAUSALPROTO_REQUIRE(lib.size() > 0, "prototype_purity: empty library");
  CAUSALPROTO_REQUIRE(latents.rows() == static_cast<Eigen::Index>(labels.size()),
                      "prototype_purity: latents and labels disagree in length");
  CAUSALPROTO_REQUIRE(n_neighbors >= 1 && n_neighbors <= latents.rows(),
                      "prototype_purity: n_neighbors must be in [1, dataset size]");
  CAUSALPROTO_REQUIRE(latents.cols() == lib.dim(), "prototype_purity: latent dimension mismatch");
  const Eigen::Index n = latents.rows();
  double total = 0.0;
  std::vector<std::pair<double, Eigen::Index>> d(n);
  for (int k = 0; k < lib.size(); ++k) {
    for (Eigen::Index i = 0; i < n; ++i) {
      d[i] = {(latents.row(i) - lib.prototypes.row(k)).squaredNorm(), i};
    }
    std::partial_sort(d.begin(), d.begin() + n_neighbors, d.end());
    int hits = 0;
    for (int j = 0; j < n_neighbors; ++j) hits += labels[d[j].second] == lib.class_of[k] ? 1 : 0;
    total += static_cast<double>(hits) / n_neighbors;
  }
  return total / lib.size();
}

double spurious_diversity(const Matrix& z_s, const Matrix& prototypes) {
  CAUSALPROTO_REQUIRE(z_s.rows() > 0, "spurious_diversity: empty latent set");
  CAUSALPROTO_REQUIRE(prototypes.rows() > 0, "spurious_diversity: empty library");
  CAUSALPROTO_REQUIRE(z_s.cols() == prototypes.cols(), "spurious_diversity: dimension mismatch");
  std::vector<long> counts(prototypes.rows(), 0);
  for (Eigen::Index i = 0; i < z_s.rows(); ++i) {
    Eigen::Index best = 0;
    (prototypes.rowwise() - z_s.row(i)).rowwise().squaredNorm().minCoeff(&best);
    ++counts[best];
  }
  // Sorting makes the sum independent of prototype order.
  std::sort(counts.begin(), counts.end());
  const double n = static_cast<double>(z_s.rows());
  double h = 0.0;
  for (long c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / n;
    h -= p * std::log(p);
  }
  return std::max(h, 0.0);
}

double spurious_diversity(const Matrix& z_s, const proto::SpuriousLibrary& lib) {
  return spurious_diversity(z_s, lib.prototypes);
}

double paired_ttest(const std::vector<double>& a, const std::vector<double>& b) {
  CAUSALPROTO_REQUIRE(a.size() == b.size(), "paired_ttest: series lengths differ");
  CAUSALPROTO_REQUIRE(a.size() >= 2, "paired_ttest: need at least two pairs");
  const std::size_t n = a.size();
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
  const double mean = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (double v : d) ss += (v - mean) * (v - mean);
  const bool constant = std::all_of(d.begin(), d.end(), [&](double v) { return v == d.front(); });
  if (constant || ss == 0.0) return d.front() != 0.0 ? 0.0 : 1.0;
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  const double t = mean / (sd / std::sqrt(static_cast<double>(n)));
  boost::math::students_t dist(static_cast<double>(n - 1));
  return 2.0 * boost::math::cdf(boost::math::complement(dist, std::fabs(t)));
}

namespace {

std::string fmt_field(double v) {
  if (std::isnan(v)) return "";
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

double parse_field(const std::string& s) {
  if (s.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw ConfigError("results row: invalid number '" + s + "'");
  }
  if (used != s.size()) throw ConfigError("results row: invalid number '" + s + "'");
  return v;
}

nlohmann::json nan_to_null(double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); }

double null_to_nan(const nlohmann::json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

}  // namespace

std::string to_csv_row(const MetricsReport& r) {
  std::ostringstream os;
  os << r.variant << ',' << r.seed << ',' << fmt_field(r.acc) << ',' << fmt_field(r.bacc) << ','
     << fmt_field(r.macro_f1) << ',' << fmt_field(r.nmi_bound) << ',' << fmt_field(r.purity) << ','
     << fmt_field(r.div);
  return os.str();
}

MetricsReport from_csv_row(const std::string& line) {
  std::vector<std::string> f;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      f.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  f.push_back(cur);
  if (f.size() != 8) throw ConfigError("results row: expected 8 fields, got " + std::to_string(f.size()));
  MetricsReport r;
  r.variant = f[0];
  try {
    r.seed = std::stoll(f[1]);
  } catch (const std::exception&) {
    throw ConfigError("results row: invalid seed '" + f[1] + "'");
  }
  r.acc = parse_field(f[2]);
  r.bacc = parse_field(f[3]);
  r.macro_f1 = parse_field(f[4]);
  r.nmi_bound = parse_field(f[5]);
  r.purity = parse_field(f[6]);
  r.div = parse_field(f[7]);
  return r;
}

std::string to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["variant"] = r.variant;
  j["seed"] = r.seed;
  j["acc"] = nan_to_null(r.acc);
  j["bacc"] = nan_to_null(r.bacc);
  j["f1"] = nan_to_null(r.macro_f1);
  j["nmi"] = nan_to_null(r.nmi_bound);
  j["purity"] = nan_to_null(r.purity);
  j["div"] = nan_to_null(r.div);
  return j.dump(2);
}

MetricsReport from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
    MetricsReport r;
    r.variant = j.at("variant").get<std::string>();
    r.seed = j.at("seed").get<std::int64_t>();
    r.acc = null_to_nan(j.at("acc"));
    r.bacc = null_to_nan(j.at("bacc"));
    r.macro_f1 = null_to_nan(j.at("f1"));
    r.nmi_bound = null_to_nan(j.at("nmi"));
    r.purity = null_to_nan(j.at("purity"));
    r.div = null_to_nan(j.at("div"));
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("metrics report: ") + e.what());
  }
}

std::pair<double, double> mean_std(const std::vector<double>& xs) {
  CAUSALPROTO_REQUIRE(!xs.empty(), "mean_std: empty series");
  const double n = static_cast<double>(xs.size());
  const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  if (xs.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double v : xs) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / (n - 1.0))};
}

}  // namespace causalproto::metrics

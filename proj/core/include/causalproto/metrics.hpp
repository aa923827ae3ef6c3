#pragma once

#include "causalproto/proto_spaces.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace causalproto::metrics {

struct Classification {
  double acc = 0.0;
  double bacc = 0.0;
  double macro_f1 = 0.0;
};

/// Acc, balanced accuracy and macro-F1. Classes absent from `labels` are left
/// out of the balanced-accuracy mean; per-class F1 with 0/0 counts as 0.
Classification classification_metrics(const std::vector<int>& preds, const std::vector<int>& labels,
                                       int num_classes);

/// Mean over prototypes of the fraction of its `n_neighbors` nearest training
/// latents whose label matches the prototype's class. Distance ties go to the
/// lower sample index.
double prototype_purity(const proto::CausalLibrary& lib, const Matrix& latents,
                        const std::vector<int>& labels, int n_neighbors = 20);

/// Entropy (nats) of the hard nearest-prototype assignment histogram.
double spurious_diversity(const Matrix& z_s, const proto::SpuriousLibrary& lib);
/// Same, for an explicit prototype matrix.
double spurious_diversity(const Matrix& z_s, const Matrix& prototypes);

/// Two-sided paired t-test p-value. When every difference is identical the
/// test is degenerate: p = 0 if that difference is nonzero, else 1.
double paired_ttest(const std::vector<double>& a, const std::vector<double>& b);

struct MetricsReport {
  std::string variant;
  std::int64_t seed = 0;
  double acc = 0.0;
  double bacc = 0.0;
  double macro_f1 = 0.0;
  /// vCLUB estimate of I(Z_C; Z_S) in nats; NaN when the model has no latent pair.
  double nmi_bound = 0.0;
  /// NaN when the model has no causal library (ERM).
  double purity = 0.0;
  /// NaN when the model has no spurious library (ERM).
  double div = 0.0;
};

inline constexpr const char* kResultsHeader = "variant,seed,acc,bacc,f1,nmi,purity,div";

/// One CSV row matching kResultsHeader; NaN fields are written empty.
std::string to_csv_row(const MetricsReport& r);
/// Parses a row written by to_csv_row. Throws ConfigError on bad input.
MetricsReport from_csv_row(const std::string& line);

std::string to_json(const MetricsReport& r);
MetricsReport from_json(const std::string& text);

/// Mean and sample standard deviation.
std::pair<double, double> mean_std(const std::vector<double>& xs);

}  // namespace causalproto::metrics

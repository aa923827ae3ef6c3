#include "causalproto/proto_spaces.hpp"

#include "causalproto/error.hpp"

#include <cmath>
#include <limits>

namespace causalproto::proto {

std::string to_string(DistanceKind k) { return k == DistanceKind::squared ? "squared" : "euclidean"; }

DistanceKind distance_kind_from_string(const std::string& s) {
  if (s == "euclidean") return DistanceKind::euclidean;
  if (s == "squared") return DistanceKind::squared;
  throw ConfigError("unknown distance '" + s + "' (expected euclidean|squared)");
}

CausalLibrary CausalLibrary::random(int num_classes, int per_class, int dim, double scale,
                                    std::mt19937_64& rng) {
  CAUSALPROTO_REQUIRE(num_classes >= 1 && per_class >= 1 && dim >= 1,
                      "CausalLibrary::random: sizes must be positive");
  std::normal_distribution<double> n(0.0, scale);
  CausalLibrary lib;
  lib.num_classes = num_classes;
  lib.prototypes.resize(static_cast<Eigen::Index>(num_classes) * per_class, dim);
  for (Eigen::Index i = 0; i < lib.prototypes.size(); ++i) lib.prototypes.data()[i] = n(rng);
  for (int y = 0; y < num_classes; ++y) {
    for (int k = 0; k < per_class; ++k) lib.class_of.push_back(y);
  }
  lib.provenance.assign(lib.class_of.size(), std::nullopt);
  return lib;
}

bool CausalLibrary::projected() const {
  if (provenance.empty()) return false;
  for (const auto& p : provenance) {
    if (!p) return false;
  }
  return true;
}

void CausalLibrary::validate() const {
  CAUSALPROTO_REQUIRE(num_classes >= 1, "causal library: no classes");
  CAUSALPROTO_REQUIRE(static_cast<Eigen::Index>(class_of.size()) == prototypes.rows(),
                      "causal library: class_of size does not match prototype count");
  CAUSALPROTO_REQUIRE(provenance.size() == class_of.size(),
                      "causal library: provenance size does not match prototype count");
  std::vector<int> count(num_classes, 0);
  for (int c : class_of) {
    CAUSALPROTO_REQUIRE(c >= 0 && c < num_classes, "causal library: class id out of range");
    ++count[c];
  }
  for (int y = 0; y < num_classes; ++y) {
    if (count[y] == 0) throw ContractViolation("causal library: class " + std::to_string(y) + " has no prototype");
  }
}

SpuriousLibrary SpuriousLibrary::random(int count, int dim, double scale, std::mt19937_64& rng) {
  CAUSALPROTO_REQUIRE(count >= 1 && dim >= 1, "SpuriousLibrary::random: sizes must be positive");
  std::normal_distribution<double> n(0.0, scale);
  SpuriousLibrary lib;
  lib.prototypes.resize(count, dim);
  for (Eigen::Index i = 0; i < lib.prototypes.size(); ++i) lib.prototypes.data()[i] = n(rng);
  return lib;
}

int prototypes_per_class(int k, bool k_is_total, int num_classes) {
  if (k < 1) throw ConfigError("K must be >= 1");
  if (!k_is_total) return k;
  if (k < num_classes) throw ConfigError("K total must be at least the number of classes");
  return k / num_classes;
}

double distance(const Vector& a, const Vector& b, DistanceKind kind) {
  CAUSALPROTO_REQUIRE(a.size() == b.size(), "distance: dimension mismatch");
  const double sq = (a - b).squaredNorm();
  return kind == DistanceKind::squared ? sq : std::sqrt(sq);
}

ag::Var grouped_logsumexp(const ag::Var& a, const std::vector<int>& class_of, int num_classes) {
  CAUSALPROTO_REQUIRE(static_cast<Eigen::Index>(class_of.size()) == a.cols(),
                      "grouped_logsumexp: class_of size mismatch");
  const Matrix& v = a.value();
  const Eigen::Index n = v.rows();
  const double ninf = -std::numeric_limits<double>::infinity();
  Matrix mx = Matrix::Constant(n, num_classes, ninf);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index k = 0; k < v.cols(); ++k) mx(i, class_of[k]) = std::max(mx(i, class_of[k]), v(i, k));
  }
  Matrix acc = Matrix::Zero(n, num_classes);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index k = 0; k < v.cols(); ++k) acc(i, class_of[k]) += std::exp(v(i, k) - mx(i, class_of[k]));
  }
  Matrix out(n, num_classes);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int y = 0; y < num_classes; ++y) {
      out(i, y) = std::isfinite(mx(i, y)) ? mx(i, y) + std::log(acc(i, y)) : ninf;
    }
  }
  Matrix saved = out;
  return a.tape().record(std::move(out), {a}, [a, class_of, saved](ag::Tape& t, const Matrix& g) {
    const Matrix& v = a.value();
    Matrix d(v.rows(), v.cols());
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
      for (Eigen::Index k = 0; k < v.cols(); ++k) {
        const int y = class_of[k];
        d(i, k) = g(i, y) * std::exp(v(i, k) - saved(i, y));
      }
    }
    t.accumulate(a, d);
  });
}

ag::Var distances(const ag::Var& z, const ag::Var& prototypes, DistanceKind kind) {
  ag::Var sq = ag::sq_dist(z, prototypes);
  return kind == DistanceKind::squared ? sq : ag::sqrt(sq);
}

ag::Var causal_log_probs(const ag::Var& z_c, const ag::Var& prototypes,
                         const std::vector<int>& class_of, int num_classes, DistanceKind kind) {
  CAUSALPROTO_REQUIRE(prototypes.rows() >= 1, "causal_log_probs: empty library");
  ag::Var neg = ag::scale(distances(z_c, prototypes, kind), -1.0);
  return ag::log_softmax_rows(grouped_logsumexp(neg, class_of, num_classes));
}

Matrix causal_class_probs(const Matrix& z_c, const CausalLibrary& lib, DistanceKind kind) {
  lib.validate();
  CAUSALPROTO_REQUIRE(z_c.cols() == lib.dim(), "causal_class_probs: latent dimension mismatch");
  ag::Tape tape;
  ag::Var lp = causal_log_probs(tape.constant(z_c), tape.constant(lib.prototypes), lib.class_of,
                                lib.num_classes, kind);
  return lp.value().array().exp();
}

Vector causal_class_probs(const Vector& z_c, const CausalLibrary& lib, DistanceKind kind) {
  Matrix row = z_c.transpose();
  return causal_class_probs(row, lib, kind).row(0).transpose();
}

CausalLibrary project_prototypes(const CausalLibrary& lib, const Matrix& latents,
                                 const std::vector<int>& labels,
                                 const std::vector<std::string>& sample_ids) {
  lib.validate();
  CAUSALPROTO_REQUIRE(static_cast<Eigen::Index>(labels.size()) == latents.rows() &&
                          sample_ids.size() == labels.size(),
                      "project_prototypes: latents, labels and ids must have equal length");
  CAUSALPROTO_REQUIRE(latents.cols() == lib.dim(), "project_prototypes: latent dimension mismatch");
  std::vector<std::vector<Eigen::Index>> members(lib.num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    CAUSALPROTO_REQUIRE(labels[i] >= 0 && labels[i] < lib.num_classes,
                        "project_prototypes: label out of range");
    members[labels[i]].push_back(static_cast<Eigen::Index>(i));
  }
  for (int y = 0; y < lib.num_classes; ++y) {
    if (members[y].empty()) {
      throw ContractViolation("project_prototypes: class " + std::to_string(y) +
                              " has no training latent");
    }
  }
  CausalLibrary out = lib;
  for (int k = 0; k < lib.size(); ++k) {
    const auto& cand = members[lib.class_of[k]];
    Eigen::Index best = cand.front();
    double best_d = (latents.row(best) - lib.prototypes.row(k)).squaredNorm();
    for (std::size_t c = 1; c < cand.size(); ++c) {
      const double d = (latents.row(cand[c]) - lib.prototypes.row(k)).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = cand[c];
      }
    }
    out.prototypes.row(k) = latents.row(best);
    out.provenance[k] = sample_ids[best];
  }
  return out;
}

ag::Var entropy(const ag::Var& p) {
  CAUSALPROTO_REQUIRE(p.rows() == 1, "entropy: expects a single probability row");
  const Matrix& v = p.value();
  double h = 0.0;
  for (Eigen::Index m = 0; m < v.cols(); ++m) {
    if (v(0, m) > 0.0) h -= v(0, m) * std::log(v(0, m));
  }
  Matrix out(1, 1);
  out(0, 0) = h;
  return p.tape().record(std::move(out), {p}, [p](ag::Tape& t, const Matrix& g) {
    const Matrix& v = p.value();
    Matrix d = Matrix::Zero(1, v.cols());
    for (Eigen::Index m = 0; m < v.cols(); ++m) {
      if (v(0, m) > 0.0) d(0, m) = -g(0, 0) * (std::log(v(0, m)) + 1.0);
    }
    t.accumulate(p, d);
  });
}

ag::Var cluster_loss(const ag::Var& z_s, const ag::Var& prototypes, double tau, DistanceKind kind) {
  CAUSALPROTO_REQUIRE(z_s.rows() >= 1, "cluster_loss: empty batch");
  CAUSALPROTO_REQUIRE(prototypes.rows() >= 1, "cluster_loss: empty spurious library");
  CAUSALPROTO_REQUIRE(tau >= 0.0, "cluster_loss: tau must be non-negative");
  ag::Var d = distances(z_s, prototypes, kind);
  ag::Var attraction = ag::mean(ag::row_min(d));
  if (tau == 0.0) return attraction;
  ag::Var assign = ag::mean_over_rows(ag::softmax_rows(ag::scale(d, -1.0)));
  return ag::sub(attraction, ag::scale(entropy(assign), tau));
}

double cluster_loss(const Matrix& z_s, const SpuriousLibrary& lib, double tau, DistanceKind kind) {
  CAUSALPROTO_REQUIRE(z_s.cols() == lib.prototypes.cols(), "cluster_loss: latent dimension mismatch");
  ag::Tape tape;
  return cluster_loss(tape.constant(z_s), tape.constant(lib.prototypes), tau, kind).scalar();
}

ag::Var proto_loss(const ag::Var& z_c, const std::vector<int>& labels, const ag::Var& prototypes,
                   const std::vector<int>& class_of, double margin, DistanceKind kind) {
  CAUSALPROTO_REQUIRE(z_c.rows() >= 1, "proto_loss: empty batch");
  CAUSALPROTO_REQUIRE(static_cast<Eigen::Index>(labels.size()) == z_c.rows(),
                      "proto_loss: label count mismatch");
  CAUSALPROTO_REQUIRE(static_cast<Eigen::Index>(class_of.size()) == prototypes.rows(),
                      "proto_loss: class_of size mismatch");
  const Eigen::Index n = z_c.rows();
  const Eigen::Index k = prototypes.rows();
  std::vector<std::vector<bool>> own(n, std::vector<bool>(k));
  std::vector<std::vector<bool>> other(n, std::vector<bool>(k));
  bool multi_class = false;
  for (Eigen::Index i = 0; i < n; ++i) {
    bool has_own = false;
    for (Eigen::Index j = 0; j < k; ++j) {
      own[i][j] = class_of[j] == labels[i];
      other[i][j] = !own[i][j];
      has_own = has_own || own[i][j];
      multi_class = multi_class || other[i][j];
    }
    if (!has_own) {
      throw ContractViolation("proto_loss: label " + std::to_string(labels[i]) + " has no prototype");
    }
  }
  ag::Var d = distances(z_c, prototypes, kind);
  ag::Var attract = ag::masked_row_min(d, own);
  if (!multi_class) return ag::mean(attract);
  ag::Var hinge = ag::relu(ag::scale(ag::add_scalar(ag::masked_row_min(d, other), -margin), -1.0));
  return ag::mean(ag::add(attract, hinge));
}

double proto_loss(const Matrix& z_c, const std::vector<int>& labels, const CausalLibrary& lib,
                  double margin, DistanceKind kind) {
  lib.validate();
  CAUSALPROTO_REQUIRE(z_c.cols() == lib.dim(), "proto_loss: latent dimension mismatch");
  ag::Tape tape;
  return proto_loss(tape.constant(z_c), labels, tape.constant(lib.prototypes), lib.class_of, margin,
                    kind)
      .scalar();
}

}  // namespace causalproto::proto

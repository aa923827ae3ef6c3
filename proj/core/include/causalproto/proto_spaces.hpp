#pragma once

#include "causalproto/autograd.hpp"

#include <optional>
#include <random>
#include <string>
#include <vector>

namespace causalproto::proto {

enum class DistanceKind { euclidean, squared };

std::string to_string(DistanceKind k);
DistanceKind distance_kind_from_string(const std::string& s);

/// Class-assigned causal prototypes; provenance is filled by projection.
struct CausalLibrary {
  Matrix prototypes;  // K_total x D
  std::vector<int> class_of;
  std::vector<std::optional<std::string>> provenance;
  int num_classes = 0;

  /// `per_class` prototypes for every class, entries drawn from N(0, scale^2).
  static CausalLibrary random(int num_classes, int per_class, int dim, double scale,
                              std::mt19937_64& rng);

  int size() const { return static_cast<int>(prototypes.rows()); }
  int dim() const { return static_cast<int>(prototypes.cols()); }
  /// True once every prototype carries provenance.
  bool projected() const;
  /// Throws ContractViolation when some class has no prototype or shapes disagree.
  void validate() const;
};

/// Free spurious prototypes (M x D); no class assignment, no provenance.
struct SpuriousLibrary {
  Matrix prototypes;

  static SpuriousLibrary random(int count, int dim, double scale, std::mt19937_64& rng);
  int size() const { return static_cast<int>(prototypes.rows()); }
};

/// Prototypes per class when "K" denotes either a per-class count or a total split evenly.
int prototypes_per_class(int k, bool k_is_total, int num_classes);

double distance(const Vector& a, const Vector& b, DistanceKind kind = DistanceKind::euclidean);

/// out(i, y) = log sum_{k : class_of[k] == y} exp(a(i, k)), with per-group max shift.
ag::Var grouped_logsumexp(const ag::Var& a, const std::vector<int>& class_of, int num_classes);

/// Distance matrix (N x K) between rows of z and prototypes.
ag::Var distances(const ag::Var& z, const ag::Var& prototypes, DistanceKind kind);

/// log P(y | z_c) for every row (N x C), prototype-proximity softmax.
ag::Var causal_log_probs(const ag::Var& z_c, const ag::Var& prototypes,
                         const std::vector<int>& class_of, int num_classes,
                         DistanceKind kind = DistanceKind::euclidean);

Vector causal_class_probs(const Vector& z_c, const CausalLibrary& lib,
                          DistanceKind kind = DistanceKind::euclidean);
Matrix causal_class_probs(const Matrix& z_c, const CausalLibrary& lib,
                          DistanceKind kind = DistanceKind::euclidean);

/// Replaces every prototype by the nearest latent of its own class (ties: lowest row).
CausalLibrary project_prototypes(const CausalLibrary& lib, const Matrix& latents,
                                 const std::vector<int>& labels,
                                 const std::vector<std::string>& sample_ids);

/// Shannon entropy (nats) of a 1 x M probability row, 0 log 0 = 0.
ag::Var entropy(const ag::Var& p);

/// mean_i min_m d(z_i, p_m) - tau * H(mean_i softmax(-d(z_i, .))).
ag::Var cluster_loss(const ag::Var& z_s, const ag::Var& prototypes, double tau,
                     DistanceKind kind = DistanceKind::squared);
double cluster_loss(const Matrix& z_s, const SpuriousLibrary& lib, double tau,
                    DistanceKind kind = DistanceKind::squared);

/// mean_i [ min_{k in K_y} d + max(0, margin - min_{k not in K_y} d) ].
ag::Var proto_loss(const ag::Var& z_c, const std::vector<int>& labels, const ag::Var& prototypes,
                   const std::vector<int>& class_of, double margin,
                   DistanceKind kind = DistanceKind::squared);
double proto_loss(const Matrix& z_c, const std::vector<int>& labels, const CausalLibrary& lib,
                  double margin, DistanceKind kind = DistanceKind::squared);

}  // namespace causalproto::proto

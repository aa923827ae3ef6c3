#pragma once

// Shared helpers for unit and acceptance tests: tiny configurations, random
// batches, an independent recomputation of the objective and a central
// finite-difference gradient check.

#include "causalproto/trainer.hpp"

#include <cmath>
#include <random>
#include <string>
#include <vector>

namespace causalproto::testing {

/// D = 4 everywhere, 16x16 images, one conv block, small heads.
inline train::TrainConfig tiny_config() {
  train::TrainConfig c;
  c.encoder.latent_dim = 4;
  c.encoder.image_size = 16;
  c.encoder.channels = {2, 3};
  c.fusion_hidden = 5;
  c.q_hidden = 5;
  c.K_per_class = 2;
  c.M = 3;
  c.num_classes = 3;
  c.seed = 11;
  c.tau = 0.7;
  c.margin = 1.0;
  c.clip_negative_mi = false;
  c.data_init_prototypes = false;
  return c;
}

inline std::vector<datagen::ImageSample> random_samples(int n, int size, int classes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<datagen::ImageSample> out;
  for (int i = 0; i < n; ++i) {
    datagen::ImageSample s;
    s.pixels = Image(size, size);
    for (double& v : s.pixels.data) v = u(rng);
    s.label = i % classes;
    s.sample_id = "r" + std::to_string(i);
    out.push_back(std::move(s));
  }
  return out;
}

inline train::Batch batch_of(const std::vector<datagen::ImageSample>& samples, int size) {
  std::vector<int> idx(samples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  return train::make_batch(samples, idx, size);
}

// --- straight-line recomputation of the objective from the latents ---

inline Vector mlp(const nn::Mlp& net, const Vector& x) {
  Vector h(net.hidden.out_features());
  for (int k = 0; k < h.size(); ++k) {
    double a = net.hidden.bias(0, k);
    for (int i = 0; i < x.size(); ++i) a += x(i) * net.hidden.weight(i, k);
    h(k) = a > 0 ? a : 0.0;
  }
  Vector o(net.output.out_features());
  for (int k = 0; k < o.size(); ++k) {
    double a = net.output.bias(0, k);
    for (int i = 0; i < h.size(); ++i) a += h(i) * net.output.weight(i, k);
    o(k) = a;
  }
  return o;
}

inline double sqd(const Vector& a, const Vector& b) {
  double s = 0;
  for (int i = 0; i < a.size(); ++i) s += (a(i) - b(i)) * (a(i) - b(i));
  return s;
}

struct ManualTerms {
  double ce = 0, cluster = 0, proto = 0, mi = 0;
};

/// Arithmetic pooling over all contexts, squared regulariser distances.
inline ManualTerms manual_terms(const train::Model& m, const train::TrainConfig& cfg, const Matrix& zc,
                                const Matrix& zs, const std::vector<int>& labels) {
  ManualTerms t;
  const int n = static_cast<int>(zc.rows());
  const int d = static_cast<int>(zc.cols());
  const Matrix& ps = cfg.ablation.shared_proto ? m.causal.prototypes : m.spurious.prototypes;
  const int mm = static_cast<int>(ps.rows());
  for (int i = 0; i < n; ++i) {
    Vector p = Vector::Zero(cfg.num_classes);
    for (int k = 0; k < mm; ++k) {
      Vector in(2 * d);
      in << zc.row(i).transpose(), ps.row(k).transpose();
      Vector l = mlp(m.fusion.net(), in);
      double mx = l.maxCoeff(), s = 0;
      for (int c = 0; c < l.size(); ++c) s += std::exp(l(c) - mx);
      for (int c = 0; c < l.size(); ++c) p(c) += std::exp(l(c) - mx) / s / mm;
    }
    t.ce -= std::log(p(labels[i])) / n;
  }
  Vector abar = Vector::Zero(mm);
  for (int i = 0; i < n; ++i) {
    Vector dist(mm);
    for (int k = 0; k < mm; ++k) dist(k) = sqd(zs.row(i).transpose(), ps.row(k).transpose());
    t.cluster += dist.minCoeff() / n;
    const double mn = dist.minCoeff();
    double s = 0;
    for (int k = 0; k < mm; ++k) s += std::exp(-(dist(k) - mn));
    for (int k = 0; k < mm; ++k) abar(k) += std::exp(-(dist(k) - mn)) / s / n;
  }
  double h = 0;
  for (int k = 0; k < mm; ++k) h -= abar(k) > 0 ? abar(k) * std::log(abar(k)) : 0.0;
  t.cluster -= cfg.tau * h;

  const auto& pc = m.causal;
  for (int i = 0; i < n; ++i) {
    double own = 1e300, other = 1e300;
    for (int k = 0; k < pc.size(); ++k) {
      const double dk = sqd(zc.row(i).transpose(), pc.prototypes.row(k).transpose());
      if (pc.class_of[k] == labels[i]) own = std::min(own, dk);
      else other = std::min(other, dk);
    }
    double sep = 0;
    if (other < 1e300) sep = std::max(0.0, cfg.margin - other);
    t.proto += (own + sep) / n;
  }

  Matrix mu(n, d), lv(n, d);
  for (int i = 0; i < n; ++i) {
    const Vector o = mlp(m.q.net(), zs.row(i).transpose());
    for (int k = 0; k < d; ++k) {
      mu(i, k) = o(k);
      lv(i, k) = std::clamp(o(d + k), -8.0, 8.0);
    }
  }
  auto logq = [&](int i, int j) {
    double s = 0;
    for (int k = 0; k < d; ++k) {
      const double r = zc(j, k) - mu(i, k);
      s += -0.5 * std::log(2 * M_PI) - 0.5 * lv(i, k) - 0.5 * r * r / std::exp(lv(i, k));
    }
    return s;
  };
  for (int i = 0; i < n; ++i) {
    double neg = 0;
    for (int j = 0; j < n; ++j) neg += logq(i, j);
    t.mi += (logq(i, i) - neg / n) / n;
  }
  if (cfg.clip_negative_mi) t.mi = std::max(0.0, t.mi);
  return t;
}

// --- finite differences ---

struct GradCheck {
  double rel_error = 0;
  int checked = 0;
};

// Zero-initialised biases put dead-patch pre-activations exactly on the ReLU
// kink, where central differences are meaningless. Move to a generic point.
inline void jitter_biases(train::Model& model, const train::TrainConfig& cfg, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.05, 0.05);
  for (auto& p : model.main_params(cfg)) {
    if (p.name.size() >= 5 && p.name.compare(p.name.size() - 5, 5, ".bias") == 0) {
      for (Eigen::Index k = 0; k < p.value->size(); ++k) p.value->data()[k] += u(rng);
    }
  }
}

enum class Term { ce, cluster, proto, mi, total };

inline const char* term_name(Term t) {
  switch (t) {
    case Term::ce: return "ce";
    case Term::cluster: return "cluster";
    case Term::proto: return "proto";
    case Term::mi: return "mi";
    default: return "total";
  }
}

inline double term_value(const train::LossTerms& t, Term which) {
  switch (which) {
    case Term::ce: return t.ce;
    case Term::cluster: return t.cluster;
    case Term::proto: return t.proto;
    case Term::mi: return t.mi;
    default: return t.total;
  }
}

// Tape gradient of cfg's total loss, one matrix per main parameter.
inline std::vector<Matrix> tape_gradient(train::Model& model, const train::TrainConfig& cfg,
                                         const train::Batch& batch) {
  ag::Tape tape;
  nn::Binding b(tape, true);
  const auto g = train::build_loss(b, batch, model, cfg);
  tape.backward(g.total);
  std::vector<Matrix> out;
  for (auto& p : model.main_params(cfg)) out.push_back(b.grad(*p.value));
  return out;
}

/// Central differences of one loss term against its tape gradient over every
/// main parameter entry. A regulariser's tape gradient is isolated as
/// grad(CE + 1 * term) - grad(CE); Term::total checks cfg's weighted sum as is.
inline GradCheck check_gradients(train::Model& model, const train::TrainConfig& cfg, const train::Batch& batch,
                                 Term which = Term::total, double eps = 1e-5) {
  std::vector<Matrix> ga;
  if (which == Term::total) {
    ga = tape_gradient(model, cfg, batch);
  } else {
    train::TrainConfig off = cfg;
    off.lambda1 = off.lambda2 = off.beta = 0.0;
    train::TrainConfig on = off;
    if (which == Term::cluster) on.lambda1 = 1.0;
    if (which == Term::proto) on.lambda2 = 1.0;
    if (which == Term::mi) on.beta = 1.0;
    ga = tape_gradient(model, on, batch);
    if (which != Term::ce) {
      const auto base = tape_gradient(model, off, batch);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] -= base[i];
    }
  }
  auto params = model.main_params(cfg);
  double num2 = 0, diff2 = 0, ana2 = 0;
  GradCheck out;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    for (Eigen::Index k = 0; k < p.value->size(); ++k) {
      double& x = p.value->data()[k];
      const double x0 = x;
      auto eval = [&] {
        ag::Tape t;
        nn::Binding bb(t, false);
        return term_value(train::build_loss(bb, batch, model, cfg).terms, which);
      };
      x = x0 + eps;
      const double up = eval();
      x = x0 - eps;
      const double dn = eval();
      x = x0;
      const double gn = (up - dn) / (2 * eps);
      const double an = ga[pi].data()[k];
      num2 += gn * gn;
      ana2 += an * an;
      diff2 += (gn - an) * (gn - an);
      ++out.checked;
    }
  }
  out.rel_error = std::sqrt(diff2) / std::max(1e-300, std::max(std::sqrt(num2), std::sqrt(ana2)));
  return out;
}

}  // namespace causalproto::testing

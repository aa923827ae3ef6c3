#include "causalproto/trainer.hpp"

#include "archive.hpp"
#include "causalproto/error.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace causalproto::train {

namespace {

constexpr int kEvalChunk = 256;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::vector<int> epoch_order(std::uint64_t seed, int epoch, int n) {
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 g(splitmix64(seed ^ splitmix64(0x5eed0000ull + static_cast<std::uint64_t>(epoch))));
  std::shuffle(order.begin(), order.end(), g);
  return order;
}

void require_finite(double v, const char* term) {
  if (!std::isfinite(v)) throw NumericError(std::string("non-finite loss term '") + term + "'");
}

template <typename Fn>
void for_chunks(const std::vector<datagen::ImageSample>& samples, int image_size, Fn&& fn) {
  const int n = static_cast<int>(samples.size());
  for (int start = 0; start < n; start += kEvalChunk) {
    const int end = std::min(n, start + kEvalChunk);
    std::vector<const Image*> ptrs;
    for (int i = start; i < end; ++i) ptrs.push_back(&samples[i].pixels);
    fn(start, model::to_input(std::span<const Image* const>(ptrs), image_size));
  }
}

}  // namespace

// --- ablation flags ---

std::string Ablation::variant_name() const {
  if (erm_baseline) return "erm";
  std::vector<std::string> parts;
  if (no_mi) parts.emplace_back("no_mi");
  if (no_cluster) parts.emplace_back("no_cluster");
  if (no_do) parts.emplace_back("no_do");
  if (shared_proto) parts.emplace_back("shared_proto");
  if (parts.empty()) return "full";
  std::string out = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) out += "+" + parts[i];
  return out;
}

Ablation Ablation::parse(const std::string& text) {
  Ablation a;
  std::string token;
  auto flush = [&] {
    const auto b = token.find_first_not_of(" \t");
    const auto e = token.find_last_not_of(" \t");
    const std::string t = b == std::string::npos ? "" : token.substr(b, e - b + 1);
    token.clear();
    if (t.empty() || t == "full" || t == "none") return;
    if (t == "no_mi") a.no_mi = true;
    else if (t == "no_cluster") a.no_cluster = true;
    else if (t == "no_do") a.no_do = true;
    else if (t == "shared_proto") a.shared_proto = true;
    else if (t == "erm" || t == "erm_baseline") a.erm_baseline = true;
    else throw ConfigError("unknown ablation flag '" + t + "'");
  };
  for (char ch : text) {
    if (ch == '+' || ch == ',') flush();
    else token.push_back(ch);
  }
  flush();
  if (a.erm_baseline && (a.no_mi || a.no_cluster || a.no_do || a.shared_proto)) {
    throw ConfigError("erm_baseline cannot be combined with other ablation flags");
  }
  return a;
}

std::vector<Ablation> standard_variants() {
  std::vector<Ablation> v(6);
  v[1].no_mi = true;
  v[2].no_cluster = true;
  v[3].no_do = true;
  v[4].shared_proto = true;
  v[5].erm_baseline = true;
  return v;
}

// --- config ---

void TrainConfig::validate() const {
  if (lambda1 < 0 || lambda2 < 0 || beta < 0) throw ConfigError("loss coefficients must be non-negative");
  if (M < 1) throw ConfigError("M must be >= 1");
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  per_class();
  model::validate(encoder);
  if (fusion_hidden < 1 || q_hidden < 1) throw ConfigError("hidden widths must be >= 1");
  if (!(learning_rate >= 0) || !(weight_decay >= 0)) {
    throw ConfigError("learning_rate and weight_decay must be non-negative");
  }
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (projection_period < 1) throw ConfigError("projection_period must be >= 1");
  if (tau < 0) throw ConfigError("tau must be non-negative");
  if (subsample_contexts < 0) throw ConfigError("subsample_contexts must be >= 0");
  if (!(proto_init_scale > 0)) throw ConfigError("proto_init_scale must be positive");
  if (purity_neighbors < 1) throw ConfigError("purity_neighbors must be >= 1");
  if (eval_q_steps < 0) throw ConfigError("eval_q_steps must be >= 0");
  if (!(q_lr_scale >= 0)) throw ConfigError("q_lr_scale must be non-negative");
  if (q_steps < 1) throw ConfigError("q_steps must be >= 1");
  if (ablation.erm_baseline && (ablation.no_mi || ablation.no_cluster || ablation.no_do ||
                                ablation.shared_proto)) {
    throw ConfigError("erm_baseline cannot be combined with other ablation flags");
  }
}

int TrainConfig::per_class() const { return proto::prototypes_per_class(K_per_class, k_is_total, num_classes); }

// --- model and state ---

Model Model::create(const TrainConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  const int d = cfg.encoder.latent_dim;
  Model m;
  m.encoder = model::DualEncoder(cfg.encoder, rng);
  m.fusion = model::FusionNet(d, cfg.fusion_hidden, cfg.num_classes, rng);
  m.causal = proto::CausalLibrary::random(cfg.num_classes, cfg.per_class(), d, cfg.proto_init_scale, rng);
  m.spurious = proto::SpuriousLibrary::random(cfg.M, d, cfg.proto_init_scale, rng);
  m.q = mi::GaussianCondModel(d, cfg.q_hidden, rng);
  m.erm = model::ErmClassifier(cfg.encoder, cfg.num_classes, rng);
  return m;
}

std::vector<nn::ParamRef> Model::main_params(const TrainConfig& cfg) {
  std::vector<nn::ParamRef> out;
  if (cfg.ablation.erm_baseline) {
    erm.collect("erm", out);
    return out;
  }
  encoder.collect("enc", out);
  fusion.collect("fusion", out);
  out.push_back({"proto.causal", &causal.prototypes});
  if (!cfg.ablation.shared_proto) out.push_back({"proto.spurious", &spurious.prototypes});
  return out;
}

std::vector<nn::ParamRef> Model::q_params() {
  std::vector<nn::ParamRef> out;
  q.collect("q", out);
  return out;
}

std::vector<nn::ParamRef> Model::all_params() {
  std::vector<nn::ParamRef> out;
  encoder.collect("enc", out);
  fusion.collect("fusion", out);
  out.push_back({"proto.causal", &causal.prototypes});
  out.push_back({"proto.spurious", &spurious.prototypes});
  q.collect("q", out);
  erm.collect("erm", out);
  return out;
}

const Matrix& Model::spurious_matrix(const TrainConfig& cfg) const {
  return cfg.ablation.shared_proto ? causal.prototypes : spurious.prototypes;
}

TrainState TrainState::create(const TrainConfig& cfg) {
  TrainState s;
  s.model = Model::create(cfg);
  nn::Adam::Options main;
  main.weight_decay = cfg.weight_decay;
  s.main_opt = nn::Adam(main);
  s.q_opt = nn::Adam(nn::Adam::Options{});
  s.rng.seed(splitmix64(cfg.seed ^ 0xC0A7E47ull));
  return s;
}

Batch make_batch(const std::vector<datagen::ImageSample>& samples, const std::vector<int>& index,
                 int image_size) {
  Batch b;
  std::vector<const Image*> ptrs;
  ptrs.reserve(index.size());
  for (int i : index) {
    CAUSALPROTO_REQUIRE(i >= 0 && i < static_cast<int>(samples.size()), "make_batch: index out of range");
    ptrs.push_back(&samples[i].pixels);
    b.labels.push_back(samples[i].label);
  }
  b.input = model::to_input(std::span<const Image* const>(ptrs), image_size);
  return b;
}

// --- objective ---

LossGraph build_loss(nn::Binding& b, const Batch& batch, const Model& model, const TrainConfig& cfg,
                     const std::vector<int>& contexts, const LatentHook& on_latents) {
  CAUSALPROTO_REQUIRE(!batch.labels.empty(), "total_loss: empty batch");
  CAUSALPROTO_REQUIRE(batch.input.rows() == static_cast<Eigen::Index>(batch.labels.size()),
                      "total_loss: input rows and labels disagree");
  for (int y : batch.labels) {
    CAUSALPROTO_REQUIRE(y >= 0 && y < cfg.num_classes, "total_loss: label out of range");
  }
  ag::Tape& tape = b.tape();
  const ag::Var x = tape.constant(batch.input);
  LossGraph g;

  if (cfg.ablation.erm_baseline) {
    const ag::Var logits = model.erm.logits(b, model.erm.features(b, x));
    const ag::Var ce = ag::scale(ag::mean(ag::pick(ag::log_softmax_rows(logits), batch.labels)), -1.0);
    g.terms.ce = ce.scalar();
    require_finite(g.terms.ce, "ce");
    g.terms.total = g.terms.ce;
    g.total = ce;
    return g;
  }

  const auto z = model.encoder.forward(b, x);
  if (on_latents) on_latents(z.z_c.value(), z.z_s.value());
  const ag::Var pc = b(model.causal.prototypes);
  const ag::Var ps = cfg.ablation.shared_proto ? pc : b(model.spurious.prototypes);

  ag::Var log_probs;
  if (cfg.ablation.no_do) {
    log_probs = proto::causal_log_probs(z.z_c, pc, model.causal.class_of, cfg.num_classes,
                                        cfg.classifier_distance);
  } else {
    ag::Var ctx = cfg.freeze_ps_in_ce ? ag::detach(ps) : ps;
    if (!contexts.empty()) ctx = ag::select_rows(ctx, contexts);
    intervention::Options opt;
    opt.mode = cfg.nwgm_mode;
    log_probs = intervention::intervened_log_probs(b, z.z_c, ctx, model.fusion, opt);
  }
  const ag::Var ce = ag::scale(ag::mean(ag::pick(log_probs, batch.labels)), -1.0);
  const ag::Var cluster = proto::cluster_loss(z.z_s, ps, cfg.tau, cfg.regularizer_distance);
  const ag::Var proto_term = proto::proto_loss(z.z_c, batch.labels, pc, model.causal.class_of,
                                               cfg.margin, cfg.regularizer_distance);
  ag::Var mi_term = mi::club_penalty(tape, z.z_c, cfg.mi_through_spurious ? z.z_s : ag::detach(z.z_s), model.q);
  if (cfg.clip_negative_mi) mi_term = ag::relu(mi_term);

  g.terms.ce = ce.scalar();
  g.terms.cluster = cluster.scalar();
  g.terms.proto = proto_term.scalar();
  g.terms.mi = mi_term.scalar();
  require_finite(g.terms.ce, "ce");
  require_finite(g.terms.cluster, "cluster");
  require_finite(g.terms.proto, "proto");
  require_finite(g.terms.mi, "mi");

  const double l1 = cfg.ablation.no_cluster ? 0.0 : cfg.lambda1;
  const double l2 = cfg.lambda2;
  const double beta = cfg.ablation.no_mi ? 0.0 : cfg.beta;
  ag::Var total = ce;
  if (l1 != 0.0) total = ag::add(total, ag::scale(cluster, l1));
  if (l2 != 0.0) total = ag::add(total, ag::scale(proto_term, l2));
  if (beta != 0.0) total = ag::add(total, ag::scale(mi_term, beta));
  g.total = total;
  g.terms.total = total.scalar();
  require_finite(g.terms.total, "total");
  return g;
}

LossTerms total_loss(const Batch& batch, const TrainState& state, const TrainConfig& cfg) {
  ag::Tape tape;
  nn::Binding b(tape, false);
  return build_loss(b, batch, state.model, cfg).terms;
}

LossTerms train_step(TrainState& state, const Batch& batch, const TrainConfig& cfg, double lr) {
  std::vector<int> contexts;
  if (!cfg.ablation.erm_baseline && !cfg.ablation.no_do) {
    const int m = static_cast<int>(state.model.spurious_matrix(cfg).rows());
    if (cfg.subsample_contexts > 0 && cfg.subsample_contexts < m) {
      std::vector<int> all(m);
      std::iota(all.begin(), all.end(), 0);
      std::shuffle(all.begin(), all.end(), state.rng);
      contexts.assign(all.begin(), all.begin() + cfg.subsample_contexts);
      std::sort(contexts.begin(), contexts.end());
    }
  }
  double q_nll = 0.0;
  LatentHook hook;
  if (!cfg.ablation.no_mi && !cfg.ablation.erm_baseline) {
    hook = [&](const Matrix& zc, const Matrix& zs) {
      for (int k = 0; k < cfg.q_steps; ++k) {
        const double nll = mi::fit_q_step(zc, zs, state.model.q, state.q_opt, lr * cfg.q_lr_scale);
        if (k == 0) q_nll = nll;
      }
    };
  }
  ag::Tape tape;
  nn::Binding b(tape, true);
  const LossGraph g = build_loss(b, batch, state.model, cfg, contexts, hook);
  if (!(g.terms.total <= cfg.divergence_threshold)) {
    throw NumericError("training diverged: loss " + std::to_string(g.terms.total) + " at step " +
                       std::to_string(state.step));
  }
  tape.backward(g.total);
  auto params = state.model.main_params(cfg);
  std::vector<Matrix> grads;
  grads.reserve(params.size());
  for (const auto& p : params) grads.push_back(b.grad(*p.value));
  state.main_opt.step(params, grads, lr);
  ++state.step;
  state.running.ce += g.terms.ce;
  state.running.cluster += g.terms.cluster;
  state.running.proto += g.terms.proto;
  state.running.mi += g.terms.mi;
  state.running.total += g.terms.total;
  state.running_q_nll += q_nll;
  ++state.running_count;
  return g.terms;
}

std::string to_json_line(const EpochRecord& r) {
  nlohmann::ordered_json j;
  j["variant"] = r.variant;
  j["epoch"] = r.epoch;
  j["lr"] = r.lr;
  j["ce"] = r.loss.ce;
  j["cluster"] = r.loss.cluster;
  j["proto"] = r.loss.proto;
  j["mi"] = r.loss.mi;
  j["total"] = r.loss.total;
  j["q_nll"] = r.q_nll;
  j["val_bacc"] = std::isnan(r.val_bacc) ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(r.val_bacc);
  j["projected"] = r.projected;
  return j.dump();
}

// --- loop ---

void project(TrainState& state, const TrainConfig& cfg, const std::vector<datagen::ImageSample>& train_set) {
  CAUSALPROTO_REQUIRE(!cfg.ablation.erm_baseline, "project: the ERM baseline has no causal library");
  const Latents lat = compute_latents(state.model, cfg, train_set);
  state.model.causal = proto::project_prototypes(state.model.causal, lat.z_c, lat.labels, lat.ids);
}

void init_prototypes_from_data(TrainState& state, const TrainConfig& cfg,
                               const std::vector<datagen::ImageSample>& train_set) {
  if (cfg.ablation.erm_baseline) return;
  const int n = static_cast<int>(train_set.size());
  const std::vector<int> order = epoch_order(cfg.seed, 0, n);
  std::vector<datagen::ImageSample> picked;
  const int k = cfg.per_class();
  std::vector<int> taken(cfg.num_classes, 0);
  std::vector<int> causal_rows;
  for (int i : order) {
    if (taken[train_set[i].label] < k) {
      ++taken[train_set[i].label];
      causal_rows.push_back(i);
    }
  }
  const int m = std::min(cfg.M, n);
  std::vector<datagen::ImageSample> subset;
  for (int j = 0; j < m; ++j) subset.push_back(train_set[order[j]]);
  for (int i : causal_rows) subset.push_back(train_set[i]);
  const Latents lat = compute_latents(state.model, cfg, subset);
  Model& model = state.model;
  if (!cfg.ablation.shared_proto) {
    for (int j = 0; j < m; ++j) model.spurious.prototypes.row(j) = lat.z_s.row(j);
  }
  // Prototype slots of each class are filled in order; classes without
  // enough samples keep their random rows.
  std::vector<int> slot(cfg.num_classes, 0);
  for (std::size_t r = 0; r < causal_rows.size(); ++r) {
    const int y = train_set[causal_rows[r]].label;
    int seen = 0;
    for (int p = 0; p < model.causal.size(); ++p) {
      if (model.causal.class_of[p] != y) continue;
      if (seen++ == slot[y]) {
        model.causal.prototypes.row(p) = lat.z_c.row(m + static_cast<Eigen::Index>(r));
        break;
      }
    }
    ++slot[y];
  }
}

void resume(TrainResult& result, const TrainConfig& cfg, const std::vector<datagen::ImageSample>& train_set,
            const std::vector<datagen::ImageSample>& val_set, const TrainOptions& opt) {
  cfg.validate();
  CAUSALPROTO_REQUIRE(!train_set.empty(), "train: empty training set");
  TrainState& state = result.state;
  const int n = static_cast<int>(train_set.size());
  const int steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::int64_t total_steps = static_cast<std::int64_t>(steps_per_epoch) * cfg.epochs;
  const int image_size = cfg.encoder.image_size;
  const bool ran = state.epoch < cfg.epochs;
  if (state.step == 0 && cfg.data_init_prototypes) init_prototypes_from_data(state, cfg, train_set);

  for (int epoch = state.epoch; epoch < cfg.epochs; ++epoch) {
    const std::vector<int> order = epoch_order(cfg.seed, epoch, n);
    state.running = {};
    state.running_q_nll = 0.0;
    state.running_count = 0;
    double lr = cfg.learning_rate;
    for (int s = 0; s < steps_per_epoch; ++s) {
      const int begin = s * cfg.batch_size;
      const int end = std::min(n, begin + cfg.batch_size);
      const std::vector<int> idx(order.begin() + begin, order.begin() + end);
      const Batch batch = make_batch(train_set, idx, image_size);
      lr = nn::cosine_lr(cfg.learning_rate, state.step, total_steps);
      try {
        train_step(state, batch, cfg, lr);
      } catch (const NumericError&) {
        if (!opt.dump_dir.empty()) save_checkpoint(opt.dump_dir / "divergence_dump.ckpt", state, opt.config_json);
        throw;
      }
    }
    state.epoch = epoch + 1;

    EpochRecord rec;
    rec.variant = cfg.ablation.variant_name();
    rec.epoch = state.epoch;
    rec.lr = lr;
    const double c = std::max(1, state.running_count);
    rec.loss = {state.running.ce / c, state.running.cluster / c, state.running.proto / c,
                state.running.mi / c, state.running.total / c};
    rec.q_nll = state.running_q_nll / c;

    if (!cfg.ablation.erm_baseline && state.epoch >= cfg.projection_start() &&
        (state.epoch - cfg.projection_start()) % cfg.projection_period == 0) {
      project(state, cfg, train_set);
      rec.projected = true;
    }
    rec.val_bacc = std::numeric_limits<double>::quiet_NaN();
    if (!val_set.empty()) {
      std::vector<int> labels;
      for (const auto& smp : val_set) labels.push_back(smp.label);
      const auto preds = argmax_rows(predict_probs(state.model, cfg, val_set));
      rec.val_bacc = metrics::classification_metrics(preds, labels, cfg.num_classes).bacc;
      if (cfg.keep_best && rec.val_bacc > state.best_val_bacc) {
        state.best_val_bacc = rec.val_bacc;
        state.best_epoch = state.epoch;
        state.best_model = state.model;
      }
    }
    result.log.push_back(rec);
    if (opt.on_epoch) opt.on_epoch(rec, state);
  }

  if (ran) {
    if (cfg.keep_best && state.best_model) state.model = *state.best_model;
    if (!cfg.ablation.erm_baseline) project(state, cfg, train_set);
  }
}

TrainResult train(const TrainConfig& cfg, const std::vector<datagen::ImageSample>& train_set,
                  const std::vector<datagen::ImageSample>& val_set, const TrainOptions& opt) {
  TrainResult r{TrainState::create(cfg), {}};
  resume(r, cfg, train_set, val_set, opt);
  return r;
}

TrainResult train(const TrainConfig& cfg, const std::filesystem::path& train_manifest,
                  const std::filesystem::path& val_manifest, const TrainOptions& opt) {
  const auto tr = datagen::read_manifest(train_manifest, cfg.encoder.image_size);
  const auto va = datagen::read_manifest(val_manifest, cfg.encoder.image_size);
  return train(cfg, tr, va, opt);
}

// --- evaluation ---

std::vector<int> argmax_rows(const Matrix& probs) {
  std::vector<int> out(probs.rows());
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    Eigen::Index best = 0;
    probs.row(i).maxCoeff(&best);
    out[i] = static_cast<int>(best);
  }
  return out;
}

Matrix predict_probs(const Model& model, const TrainConfig& cfg, const std::vector<datagen::ImageSample>& samples) {
  Matrix out(static_cast<Eigen::Index>(samples.size()), cfg.num_classes);
  intervention::Options opt;
  opt.mode = cfg.nwgm_mode;
  for_chunks(samples, cfg.encoder.image_size, [&](int start, const Matrix& x) {
    Matrix p;
    if (cfg.ablation.erm_baseline) {
      const Matrix logits = model.erm.logits_matrix(x);
      p = (logits.colwise() - logits.rowwise().maxCoeff()).array().exp();
      p = p.array().colwise() / p.rowwise().sum().array();
    } else if (cfg.ablation.no_do) {
      p = proto::causal_class_probs(model.encoder.encode_causal_matrix(x), model.causal, cfg.classifier_distance);
    } else {
      p = intervention::intervene_batch(model.encoder.encode_causal_matrix(x), model.spurious_matrix(cfg),
                                        model.fusion, opt);
    }
    out.middleRows(start, p.rows()) = p;
  });
  return out;
}

Latents compute_latents(const Model& model, const TrainConfig& cfg, const std::vector<datagen::ImageSample>& samples) {
  Latents l;
  const int d = cfg.encoder.latent_dim;
  l.z_c.resize(static_cast<Eigen::Index>(samples.size()), d);
  l.z_s.resize(static_cast<Eigen::Index>(samples.size()), d);
  for (const auto& s : samples) {
    l.labels.push_back(s.label);
    l.ids.push_back(s.sample_id);
  }
  for_chunks(samples, cfg.encoder.image_size, [&](int start, const Matrix& x) {
    if (cfg.ablation.erm_baseline) {
      const Matrix f = model.erm.features_matrix(x);
      l.z_c.middleRows(start, f.rows()) = f;
      l.z_s.middleRows(start, f.rows()) = f;
    } else {
      auto [zc, zs] = model.encoder.encode_matrix(x);
      l.z_c.middleRows(start, zc.rows()) = zc;
      l.z_s.middleRows(start, zs.rows()) = zs;
    }
  });
  return l;
}

metrics::MetricsReport evaluate(const Model& model, const TrainConfig& cfg,
                                const std::vector<datagen::ImageSample>& train_set,
                                const std::vector<datagen::ImageSample>& test_set) {
  CAUSALPROTO_REQUIRE(!test_set.empty(), "evaluate: empty test set");
  metrics::MetricsReport r;
  r.variant = cfg.ablation.variant_name();
  r.seed = static_cast<std::int64_t>(cfg.seed);
  std::vector<int> labels;
  for (const auto& s : test_set) labels.push_back(s.label);
  const auto cls = metrics::classification_metrics(argmax_rows(predict_probs(model, cfg, test_set)), labels,
                                                   cfg.num_classes);
  r.acc = cls.acc;
  r.bacc = cls.bacc;
  r.macro_f1 = cls.macro_f1;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  if (cfg.ablation.erm_baseline) {
    r.nmi_bound = r.purity = r.div = nan;
    return r;
  }
  Latents te = compute_latents(model, cfg, test_set);
  // MI is invariant to per-dimension affine maps; standardising keeps the
  // Gaussian q well conditioned whatever the latent scale.
  const auto standardise = [](Matrix& z) {
    const Eigen::RowVectorXd mu = z.colwise().mean();
    z.rowwise() -= mu;
    Eigen::RowVectorXd sd = (z.cwiseAbs2().colwise().sum() / static_cast<double>(z.rows())).cwiseSqrt();
    for (Eigen::Index j = 0; j < sd.size(); ++j) sd(j) = sd(j) > 1e-8 ? sd(j) : 1.0;
    z.array().rowwise() /= sd.array();
  };
  Matrix zc_std = te.z_c;
  Matrix zs_std = te.z_s;
  standardise(zc_std);
  standardise(zs_std);

  // A fresh q, fitted on one half of the evaluation latents and scored on
  // the other. Fitting stops where the held-out likelihood peaks, so every
  // variant is measured by an equally calibrated estimator.
  std::mt19937_64 rng(splitmix64(cfg.seed ^ 0xE7A1ull));
  mi::GaussianCondModel q(cfg.encoder.latent_dim, cfg.q_hidden, rng);
  nn::Adam qopt(nn::Adam::Options{});
  const Eigen::Index n = te.z_c.rows();
  const Eigen::Index n_fit = n >= 4 ? n / 2 : n;
  const Eigen::Index n_score = n - n_fit > 0 ? n - n_fit : n;
  const Matrix zc_fit = zc_std.topRows(n_fit), zs_fit = zs_std.topRows(n_fit);
  const Matrix zc_score = zc_std.bottomRows(n_score), zs_score = zs_std.bottomRows(n_score);
  const Eigen::Index bs = std::min<Eigen::Index>(n_fit, kEvalChunk);
  mi::GaussianCondModel best_q = q;
  double best_nll = mi::paired_nll(zc_score, zs_score, q);
  for (int step = 0; step < cfg.eval_q_steps; ++step) {
    const Eigen::Index start = (static_cast<Eigen::Index>(step) * bs) % n_fit;
    const Eigen::Index len = std::min(bs, n_fit - start);
    mi::fit_q_step(zc_fit.middleRows(start, len), zs_fit.middleRows(start, len), q, qopt, 1e-3);
    if ((step + 1) % 10 == 0 || step + 1 == cfg.eval_q_steps) {
      const double nll = mi::paired_nll(zc_score, zs_score, q);
      if (nll < best_nll) {
        best_nll = nll;
        best_q = q;
      }
    }
  }
  r.nmi_bound = mi::estimate_bound(zc_score, zs_score, best_q);

  if (!train_set.empty()) {
    const Latents tr = compute_latents(model, cfg, train_set);
    r.purity = metrics::prototype_purity(model.causal, tr.z_c, tr.labels,
                                         std::min<int>(cfg.purity_neighbors, static_cast<int>(tr.z_c.rows())));
  } else {
    r.purity = nan;
  }
  r.div = metrics::spurious_diversity(te.z_s, model.spurious_matrix(cfg));
  return r;
}

proto::CausalLibrary posthoc_prototypes(const Model& model, const TrainConfig& cfg,
                                        const std::vector<datagen::ImageSample>& train_set) {
  const Latents lat = compute_latents(model, cfg, train_set);
  proto::CausalLibrary lib;
  lib.num_classes = cfg.num_classes;
  lib.prototypes = Matrix::Zero(cfg.num_classes, lat.z_c.cols());
  std::vector<int> counts(cfg.num_classes, 0);
  for (Eigen::Index i = 0; i < lat.z_c.rows(); ++i) {
    lib.prototypes.row(lat.labels[i]) += lat.z_c.row(i);
    ++counts[lat.labels[i]];
  }
  for (int c = 0; c < cfg.num_classes; ++c) {
    if (counts[c] > 0) lib.prototypes.row(c) /= counts[c];
    lib.class_of.push_back(c);
  }
  lib.provenance.assign(cfg.num_classes, std::nullopt);
  return proto::project_prototypes(lib, lat.z_c, lat.labels, lat.ids);
}

// --- checkpoints ---

namespace {

void put_model(detail::Archive& a, const std::string& prefix, Model& m) {
  for (const auto& p : m.all_params()) a.put(prefix + p.name, *p.value);
  Matrix cls(1, static_cast<Eigen::Index>(m.causal.class_of.size()));
  for (std::size_t k = 0; k < m.causal.class_of.size(); ++k) cls(0, k) = m.causal.class_of[k];
  a.put(prefix + "lib.class_of", cls);
  std::string prov;
  for (const auto& p : m.causal.provenance) prov += (p ? "+" + *p : std::string("-")) + "\n";
  a.put(prefix + "lib.provenance", prov);
}

void get_model(const detail::Archive& a, const std::string& prefix, Model& m) {
  for (const auto& p : m.all_params()) {
    *p.value = a.matrix(prefix + p.name, p.value->rows(), p.value->cols());
  }
  const Matrix& cls = a.matrix(prefix + "lib.class_of", 1, m.causal.size());
  for (int k = 0; k < m.causal.size(); ++k) m.causal.class_of[k] = static_cast<int>(cls(0, k));
  std::istringstream is(a.string(prefix + "lib.provenance"));
  std::string line;
  m.causal.provenance.clear();
  while (std::getline(is, line)) {
    if (line.empty()) throw IoError("corrupt provenance entry in checkpoint");
    if (line[0] == '+') m.causal.provenance.emplace_back(line.substr(1));
    else m.causal.provenance.emplace_back(std::nullopt);
  }
  if (static_cast<int>(m.causal.provenance.size()) != m.causal.size()) {
    throw IoError("checkpoint provenance count does not match the causal library");
  }
}

void put_adam(detail::Archive& a, const std::string& prefix, const nn::Adam& opt) {
  for (const auto& [name, mom] : opt.moments()) {
    a.put(prefix + "m." + name, mom.m);
    a.put(prefix + "v." + name, mom.v);
  }
}

void get_adam(const detail::Archive& a, const std::string& prefix, std::int64_t steps, nn::Adam& opt) {
  std::map<std::string, nn::Adam::Moments> state;
  const std::string mp = prefix + "m.";
  for (const auto& key : a.matrix_names_with_prefix(mp)) {
    const std::string name = key.substr(mp.size());
    state[name] = {a.matrix(key), a.matrix(prefix + "v." + name)};
  }
  opt.restore(steps, std::move(state));
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const TrainState& state, const std::string& config_json) {
  detail::Archive a;
  TrainState s = state;
  put_model(a, "model.", s.model);
  if (s.best_model) put_model(a, "best.", *s.best_model);
  put_adam(a, "adam.main.", s.main_opt);
  put_adam(a, "adam.q.", s.q_opt);
  Matrix meta(1, 13);
  meta << s.epoch, static_cast<double>(s.step), s.running_count, s.best_val_bacc, s.best_epoch,
      s.running.ce, s.running.cluster, s.running.proto, s.running.mi, s.running.total, s.running_q_nll,
      static_cast<double>(s.main_opt.steps()), static_cast<double>(s.q_opt.steps());
  a.put("meta", meta);
  std::ostringstream rng;
  rng << s.rng;
  a.put("rng", rng.str());
  a.put("config", config_json);
  a.save(path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const TrainConfig& cfg) {
  const detail::Archive a = detail::Archive::load(path);
  LoadedCheckpoint out{TrainState::create(cfg), a.string("config")};
  TrainState& s = out.state;
  get_model(a, "model.", s.model);
  if (a.has_matrix("best.proto.causal")) {
    s.best_model = s.model;
    get_model(a, "best.", *s.best_model);
  }
  const Matrix& meta = a.matrix("meta", 1, 13);
  s.epoch = static_cast<int>(meta(0, 0));
  s.step = static_cast<std::int64_t>(meta(0, 1));
  s.running_count = static_cast<int>(meta(0, 2));
  s.best_val_bacc = meta(0, 3);
  s.best_epoch = static_cast<int>(meta(0, 4));
  s.running = {meta(0, 5), meta(0, 6), meta(0, 7), meta(0, 8), meta(0, 9)};
  s.running_q_nll = meta(0, 10);
  get_adam(a, "adam.main.", static_cast<std::int64_t>(meta(0, 11)), s.main_opt);
  get_adam(a, "adam.q.", static_cast<std::int64_t>(meta(0, 12)), s.q_opt);
  std::istringstream rng(a.string("rng"));
  rng >> s.rng;
  if (!rng) throw IoError("checkpoint has a corrupt RNG state: " + path.string());
  return out;
}

std::string checkpoint_config(const std::filesystem::path& path) {
  return detail::Archive::load(path).string("config");
}

// --- ablation suite ---

explain::Explainer make_explainer(const Model& model, const TrainConfig& cfg,
                                  const std::vector<datagen::ImageSample>& train_set) {
  explain::Explainer ex;
  ex.image_size = cfg.encoder.image_size;
  ex.kind = cfg.classifier_distance;
  ex.heatmap.kind = cfg.classifier_distance;
  for (const auto& s : train_set) ex.sources.emplace(s.sample_id, s.pixels);
  if (cfg.ablation.erm_baseline) {
    ex.library = posthoc_prototypes(model, cfg, train_set);
    ex.encode = [&model](const Matrix& x) { return model.erm.features_matrix(x); };
    ex.predict = [&model](const Vector& z) {
      ag::Tape tape;
      nn::Binding b(tape, false);
      const Matrix logits = model.erm.logits(b, tape.constant(Matrix(z.transpose()))).value();
      Vector p = (logits.row(0).array() - logits.maxCoeff()).exp().transpose();
      p /= p.sum();
      return std::make_pair(p, Matrix());
    };
    return ex;
  }
  ex.library = model.causal;
  ex.encode = [&model](const Matrix& x) { return model.encoder.encode_causal_matrix(x); };
  if (cfg.ablation.no_do) {
    const auto kind = cfg.classifier_distance;
    ex.predict = [&model, kind](const Vector& z) {
      return std::make_pair(proto::causal_class_probs(z, model.causal, kind), Matrix());
    };
  } else {
    proto::SpuriousLibrary contexts;
    contexts.prototypes = model.spurious_matrix(cfg);
    intervention::Options opt;
    opt.mode = cfg.nwgm_mode;
    ex.predict = [&model, contexts, opt](const Vector& z) {
      auto out = intervention::intervene(z, contexts, model.fusion, opt);
      return std::make_pair(out.probs, out.per_context);
    };
  }
  return ex;
}

std::vector<metrics::MetricsReport> run_ablation_suite(const TrainConfig& cfg,
                                                       const std::function<Datasets(std::uint64_t)>& data,
                                                       const std::vector<std::uint64_t>& seeds,
                                                       const SuiteOptions& opt) {
  CAUSALPROTO_REQUIRE(!seeds.empty(), "run_ablation_suite: no seeds");
  std::vector<metrics::MetricsReport> rows;
  for (std::uint64_t seed : seeds) {
    const Datasets d = data(seed);
    for (const Ablation& variant : opt.variants) {
      TrainConfig c = cfg;
      c.seed = seed;
      c.ablation = variant;
      const TrainResult res = train(c, d.train, d.val, opt.train);
      metrics::MetricsReport rep = evaluate(res.state.model, c, d.train, d.test);
      rows.push_back(rep);
      if (opt.on_trained) opt.on_trained(variant, seed, res, d, rep);
    }
  }
  return rows;
}

void write_results_csv(const std::filesystem::path& path, const std::vector<metrics::MetricsReport>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write results table: " + path.string());
  os << metrics::kResultsHeader << '\n';
  for (const auto& r : rows) os << metrics::to_csv_row(r) << '\n';
  if (!os) throw IoError("failed writing results table: " + path.string());
}

std::vector<metrics::MetricsReport> read_results_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open results table: " + path.string());
  std::string line;
  int lineno = 1;
  if (!std::getline(is, line) || line != metrics::kResultsHeader) {
    throw ParseError(path.string(), lineno, "unexpected results header");
  }
  std::vector<metrics::MetricsReport> rows;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      rows.push_back(metrics::from_csv_row(line));
    } catch (const ConfigError& e) {
      throw ParseError(path.string(), lineno, e.what());
    }
  }
  return rows;
}

}  // namespace causalproto::train

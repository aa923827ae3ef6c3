// causalproto: data generation, training, evaluation, ablation and explanations.

#include "causalproto/config.hpp"
#include "causalproto/error.hpp"
#include "causalproto/explain.hpp"
#include "causalproto/metrics.hpp"
#include "causalproto/trainer.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

namespace fs = std::filesystem;
using namespace causalproto;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigArgs {
  std::string config;
  std::vector<std::string> overrides;
};

void add_config_args(CLI::App* cmd, ConfigArgs& args) {
  cmd->add_option("--config", args.config, "JSON config file");
  cmd->add_option("--set", args.overrides, "Override a field, key=value (dotted keys)")->take_all();
}

config::RunConfig resolve(const ConfigArgs& args) {
  config::RunConfig cfg = args.config.empty() ? config::RunConfig{} : config::load(args.config);
  for (const auto& o : args.overrides) config::apply_override(cfg, o);
  return cfg;
}

std::string short_hash(const config::RunConfig& cfg) { return config::config_hash(cfg).substr(0, 10); }

fs::path default_dir(const std::string& out, const std::string& stem) {
  if (!out.empty()) return out;
  return config::output_root() / stem;
}

std::string command_line(int argc, char** argv) {
  std::string s;
  for (int i = 0; i < argc; ++i) s += (i ? " " : "") + std::string(argv[i]);
  return s;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os) throw IoError("failed writing " + path.string());
}

train::Datasets load_or_generate(const config::RunConfig& cfg, std::uint64_t seed, const std::string& data_dir) {
  train::Datasets d;
  const int size = cfg.data.image_size;
  if (!data_dir.empty()) {
    d.train = datagen::read_manifest(fs::path(data_dir) / "train", size);
    d.val = datagen::read_manifest(fs::path(data_dir) / "val", size);
    d.test = datagen::read_manifest(fs::path(data_dir) / "test", size);
    return d;
  }
  const auto scm = config::data_for_seed(cfg, seed);
  d.train = datagen::generate_dataset(scm, datagen::Split::train, cfg.threads);
  d.val = datagen::generate_dataset(scm, datagen::Split::val, cfg.threads);
  d.test = datagen::generate_dataset(scm, datagen::Split::test, cfg.threads);
  return d;
}

// --- gen-data ---

int cmd_gen_data(const ConfigArgs& ca, const std::string& out, int argc, char** argv) {
  const auto cfg = resolve(ca);
  const fs::path dir = default_dir(out, "data-" + short_hash(cfg));
  const auto scm = config::data_for_seed(cfg, cfg.train.seed);
  config::RunManifest m{cfg, config::config_hash(cfg), command_line(argc, argv), {}};
  for (auto split : {datagen::Split::train, datagen::Split::val, datagen::Split::test}) {
    const auto samples = datagen::generate_dataset(scm, split, cfg.threads);
    const std::string name = datagen::to_string(split);
    datagen::write_manifest(samples, dir / name);
    m.artifacts.push_back(name + "/" + datagen::kManifestName);
    std::cout << name << ": " << samples.size() << " samples, rho " << datagen::split_rho(scm, split) << "\n";
  }
  m.write(dir);
  std::cout << "wrote " << dir.string() << "\n";
  return 0;
}

// --- train ---

int cmd_train(const ConfigArgs& ca, const std::string& out, const std::string& data_dir, bool quiet, int argc,
              char** argv) {
  const auto cfg = resolve(ca);
  const std::string variant = cfg.train.ablation.variant_name();
  const fs::path dir = default_dir(out, "train-" + variant + "-" + short_hash(cfg));
  fs::create_directories(dir);
  const train::Datasets d = load_or_generate(cfg, cfg.train.seed, data_dir);

  std::ofstream log(dir / "metrics.jsonl", std::ios::trunc);
  if (!log) throw IoError("cannot write " + (dir / "metrics.jsonl").string());
  train::TrainOptions opt;
  opt.dump_dir = dir;
  opt.config_json = config::to_json(cfg);
  opt.on_epoch = [&](const train::EpochRecord& r, const train::TrainState&) {
    const std::string line = train::to_json_line(r);
    log << line << "\n" << std::flush;
    if (!quiet) std::cerr << line << "\n";
  };
  const train::TrainResult res = train::train(cfg.train, d.train, d.val, opt);
  train::save_checkpoint(dir / "model.ckpt", res.state, opt.config_json);
  const auto report = metrics::to_json(train::evaluate(res.state.model, cfg.train, d.train, d.test));
  write_text(dir / "metrics.json", report + "\n");

  config::RunManifest m{cfg, config::config_hash(cfg), command_line(argc, argv),
                        {"metrics.jsonl", "model.ckpt", "metrics.json"}};
  m.write(dir);
  std::cout << report << "\n";
  return 0;
}

// --- eval ---

void dump_contexts(const fs::path& path, const train::Model& model, const train::TrainConfig& cfg,
                   const std::vector<datagen::ImageSample>& samples) {
  if (cfg.ablation.erm_baseline || cfg.ablation.no_do) {
    throw UsageError("--dump-contexts needs a variant with the intervention head");
  }
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << "sample_id,context";
  for (int c = 0; c < cfg.num_classes; ++c) os << ",p" << c;
  os << "\n" << std::setprecision(17);
  const auto lat = train::compute_latents(model, cfg, samples);
  proto::SpuriousLibrary contexts;
  contexts.prototypes = model.spurious_matrix(cfg);
  intervention::Options opt;
  opt.mode = cfg.nwgm_mode;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto r = intervention::intervene(lat.z_c.row(static_cast<Eigen::Index>(i)).transpose(), contexts,
                                           model.fusion, opt);
    for (Eigen::Index m = 0; m < r.per_context.rows(); ++m) {
      os << samples[i].sample_id << "," << m;
      for (Eigen::Index c = 0; c < r.per_context.cols(); ++c) os << "," << r.per_context(m, c);
      os << "\n";
    }
  }
  if (!os) throw IoError("failed writing " + path.string());
}

int cmd_eval(const std::string& run_dir, const std::string& data_dir, const std::string& contexts_path,
             const std::string& out) {
  const auto m = config::RunManifest::read(run_dir);
  const auto& cfg = m.config;
  const auto ckpt = train::load_checkpoint(fs::path(run_dir) / "model.ckpt", cfg.train);
  const train::Datasets d = load_or_generate(cfg, cfg.train.seed, data_dir);
  const auto report = metrics::to_json(train::evaluate(ckpt.state.model, cfg.train, d.train, d.test));
  write_text(out.empty() ? fs::path(run_dir) / "eval.json" : fs::path(out), report + "\n");
  if (!contexts_path.empty()) dump_contexts(contexts_path, ckpt.state.model, cfg.train, d.test);
  std::cout << report << "\n";
  return 0;
}

// --- ablate ---

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos) {
      throw UsageError("--seeds expects comma-separated non-negative integers, got '" + text + "'");
    }
    seeds.push_back(std::stoull(tok));
  }
  if (seeds.empty()) throw UsageError("--seeds is empty");
  return seeds;
}

int cmd_ablate(const ConfigArgs& ca, const std::string& seeds_text, const std::string& variants_text,
               const std::string& out, bool quiet, int argc, char** argv) {
  auto cfg = resolve(ca);
  if (!seeds_text.empty()) cfg.seeds = parse_seeds(seeds_text);
  train::SuiteOptions opt;
  if (!variants_text.empty()) {
    opt.variants.clear();
    std::stringstream ss(variants_text);
    std::string tok;
    while (std::getline(ss, tok, ',')) opt.variants.push_back(train::Ablation::parse(tok));
  }
  const fs::path dir = default_dir(out, "ablate-" + short_hash(cfg));
  fs::create_directories(dir);
  std::ofstream log(dir / "metrics.jsonl", std::ios::trunc);
  if (!log) throw IoError("cannot write " + (dir / "metrics.jsonl").string());
  opt.train.config_json = config::to_json(cfg);
  opt.train.on_epoch = [&](const train::EpochRecord& r, const train::TrainState&) {
    log << train::to_json_line(r) << "\n" << std::flush;
  };
  opt.on_trained = [&](const train::Ablation&, std::uint64_t, const train::TrainResult&, const train::Datasets&,
                       const metrics::MetricsReport& rep) {
    if (!quiet) std::cerr << metrics::to_json(rep) << "\n";
  };
  const auto rows = train::run_ablation_suite(
      cfg.train, [&](std::uint64_t seed) { return load_or_generate(cfg, seed, ""); }, cfg.seeds, opt);
  train::write_results_csv(dir / "results.csv", rows);

  // Mean and std per variant, in suite order.
  std::ostringstream summary;
  summary << "variant,n,acc_mean,acc_std,bacc_mean,bacc_std,f1_mean,f1_std,nmi_mean,nmi_std,purity_mean,"
             "purity_std,div_mean,div_std\n"
          << std::setprecision(6);
  for (const auto& v : opt.variants) {
    std::map<std::string, std::vector<double>> cols;
    for (const auto& r : rows) {
      if (r.variant != v.variant_name()) continue;
      cols["acc"].push_back(r.acc);
      cols["bacc"].push_back(r.bacc);
      cols["f1"].push_back(r.macro_f1);
      cols["nmi"].push_back(r.nmi_bound);
      cols["purity"].push_back(r.purity);
      cols["div"].push_back(r.div);
    }
    summary << v.variant_name() << "," << cols["acc"].size();
    for (const char* k : {"acc", "bacc", "f1", "nmi", "purity", "div"}) {
      const auto [mean, sd] = metrics::mean_std(cols[k]);
      summary << ",";
      if (std::isfinite(mean)) summary << mean;
      summary << ",";
      if (std::isfinite(sd)) summary << sd;
    }
    summary << "\n";
  }
  write_text(dir / "summary.csv", summary.str());
  config::RunManifest m{cfg, config::config_hash(cfg), command_line(argc, argv),
                        {"metrics.jsonl", "results.csv", "summary.csv"}};
  m.write(dir);
  std::cout << summary.str() << "wrote " << (dir / "results.csv").string() << " (" << rows.size() << " rows)\n";
  return 0;
}

// --- explain ---

int cmd_explain(const std::string& checkpoint, const std::string& data_dir, int num_samples, int topk,
                const std::string& out) {
  fs::path ckpt_path = checkpoint;
  if (fs::is_directory(ckpt_path)) ckpt_path /= "model.ckpt";
  const auto cfg = config::from_json(train::checkpoint_config(ckpt_path));
  const auto ckpt = train::load_checkpoint(ckpt_path, cfg.train);
  const train::Datasets d = load_or_generate(cfg, cfg.train.seed, data_dir);
  if (num_samples < 1) throw UsageError("--samples must be >= 1");
  const auto& model = ckpt.state.model;
  const explain::Explainer ex = train::make_explainer(model, cfg.train, d.train);
  std::vector<explain::ExplanationBundle> bundles;
  const int n = std::min<int>(num_samples, static_cast<int>(d.test.size()));
  for (int i = 0; i < n; ++i) {
    const auto& s = d.test[i];
    bundles.push_back(ex.explain(s.pixels, s.sample_id, topk, s.label));
  }
  const fs::path dir = out.empty() ? ckpt_path.parent_path() / "explain" : fs::path(out);
  explain::render_report(bundles, dir);
  std::cout << "wrote " << (dir / "index.html").string() << " (" << bundles.size() << " samples)\n";
  return 0;
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CausalProto: causal prototype learning with backdoor adjustment"};
  app.require_subcommand(1);

  ConfigArgs gen_args, train_args, ablate_args;
  std::string out, data_dir, run_dir, contexts, seeds, variants, checkpoint;
  bool quiet = false;
  int samples = 8, topk = 3;

  auto* gen = app.add_subcommand("gen-data", "Generate train/val/test manifests");
  add_config_args(gen, gen_args);
  gen->add_option("--out", out, "Output directory");

  auto* tr = app.add_subcommand("train", "Train one variant and evaluate it on the test split");
  add_config_args(tr, train_args);
  tr->add_option("--out", out, "Run directory");
  tr->add_option("--data", data_dir, "Directory with train/val/test manifests (default: generate)");
  tr->add_flag("--quiet", quiet, "No per-epoch output on stderr");

  auto* ev = app.add_subcommand("eval", "Re-evaluate a finished run without retraining");
  ev->add_option("--run", run_dir, "Run directory written by train")->required();
  ev->add_option("--data", data_dir, "Directory with train/val/test manifests (default: regenerate)");
  ev->add_option("--dump-contexts", contexts, "CSV of per-context probabilities on the test split");
  ev->add_option("--out", out, "Metrics JSON path (default: <run>/eval.json)");

  auto* ab = app.add_subcommand("ablate", "Train and evaluate every variant for every seed");
  add_config_args(ab, ablate_args);
  ab->add_option("--seeds", seeds, "Comma-separated seeds (default: config seeds)");
  ab->add_option("--variants", variants, "Comma-separated variants (default: all six)");
  ab->add_option("--out", out, "Output directory");
  ab->add_flag("--quiet", quiet, "No per-variant output on stderr");

  auto* xp = app.add_subcommand("explain", "Render prototype explanations for test samples");
  xp->add_option("--checkpoint", checkpoint, "Checkpoint file or run directory")->required();
  xp->add_option("--samples", samples, "Number of test samples");
  xp->add_option("--topk", topk, "Prototypes per sample");
  xp->add_option("--data", data_dir, "Directory with train/val/test manifests (default: regenerate)");
  xp->add_option("--out", out, "Report directory (default: <run>/explain)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << one_line(e.what()) << "\n";
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_args, out, argc, argv);
    if (tr->parsed()) return cmd_train(train_args, out, data_dir, quiet, argc, argv);
    if (ev->parsed()) return cmd_eval(run_dir, data_dir, contexts, out);
    if (ab->parsed()) return cmd_ablate(ablate_args, seeds, variants, out, quiet, argc, argv);
    if (xp->parsed()) return cmd_explain(checkpoint, data_dir, samples, topk, out);
  } catch (const UsageError& e) {
    std::cerr << "error: usage: " << one_line(e.what()) << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "error: usage: " << one_line(e.what()) << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: runtime: " << one_line(e.what()) << "\n";
    return 1;
  }
  return 2;
}

#include "causalproto/config.hpp"

#include "causalproto/error.hpp"

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace causalproto::config {

using nlohmann::json;

namespace {

json encoder_json(const model::EncoderSpec& e) {
  return {{"latent_dim", e.latent_dim},   {"channels", e.channels},   {"kernel", e.kernel},
          {"stride", e.stride},           {"share_stem", e.share_stem}, {"bounded_latent", e.bounded_latent}};
}

json data_json(const datagen::ScmConfig& d) {
  return {{"num_classes", d.num_classes},
          {"num_artifacts", d.num_artifacts},
          {"image_size", d.image_size},
          {"rho_train", d.rho_train},
          {"rho_test", d.rho_test},
          {"samples_per_split", d.samples_per_split},
          {"noise_std", d.noise_std},
          {"artifact_strength", d.artifact_strength},
          {"seed", d.seed},
          {"overlap", d.overlap}};
}

json to_value(const RunConfig& cfg) {
  const auto& t = cfg.train;
  json j = {
      {"lambda1", t.lambda1},
      {"lambda2", t.lambda2},
      {"beta", t.beta},
      {"K_per_class", t.K_per_class},
      {"k_is_total", t.k_is_total},
      {"M", t.M},
      {"encoder", encoder_json(t.encoder)},
      {"fusion_hidden", t.fusion_hidden},
      {"q_hidden", t.q_hidden},
      {"learning_rate", t.learning_rate},
      {"weight_decay", t.weight_decay},
      {"epochs", t.epochs},
      {"batch_size", t.batch_size},
      {"projection_period", t.projection_period},
      {"projection_warmup", t.projection_warmup},
      {"seed", t.seed},
      {"ablation", t.ablation.variant_name()},
      {"tau", t.tau},
      {"margin", t.margin},
      {"classifier_distance", proto::to_string(t.classifier_distance)},
      {"regularizer_distance", proto::to_string(t.regularizer_distance)},
      {"nwgm_mode", intervention::to_string(t.nwgm_mode)},
      {"freeze_ps_in_ce", t.freeze_ps_in_ce},
      {"subsample_contexts", t.subsample_contexts},
      {"proto_init_scale", t.proto_init_scale},
      {"data_init_prototypes", t.data_init_prototypes},
      {"q_lr_scale", t.q_lr_scale},
      {"q_steps", t.q_steps},
      {"clip_negative_mi", t.clip_negative_mi},
      {"mi_through_spurious", t.mi_through_spurious},
      {"purity_neighbors", t.purity_neighbors},
      {"eval_q_steps", t.eval_q_steps},
      {"divergence_threshold", t.divergence_threshold},
      {"keep_best", t.keep_best},
      {"seeds", cfg.seeds},
      {"threads", cfg.threads},
      {"data", data_json(cfg.data)},
  };
  return j;
}

// Reads fields from an object and complains about leftovers.
class Reader {
 public:
  Reader(const json& obj, std::string where) : obj_(obj), where_(std::move(where)) {
    if (!obj_.is_object()) throw ConfigError(where_ + ": expected a JSON object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = obj_.find(key);
    if (it == obj_.end()) return;
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!it->is_boolean()) throw ConfigError("");
      } else if constexpr (std::is_integral_v<T>) {
        if (!it->is_number_integer()) throw ConfigError("");
        if constexpr (std::is_unsigned_v<T>) {
          if (it->is_number_integer() && !it->is_number_unsigned()) throw ConfigError("");
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!it->is_number()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!it->is_string()) throw ConfigError("");
      }
      out = it->template get<T>();
    } catch (const std::exception&) {
      throw ConfigError(where_ + key + ": wrong type (" + std::string(it->type_name()) + ")");
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown config key '" + where_ + it.key() + "'");
    }
  }

 private:
  const json& obj_;
  std::string where_;
  std::set<std::string> seen_;
};

RunConfig from_value(const json& j) {
  RunConfig cfg;
  auto& t = cfg.train;
  Reader r(j, "");
  r.get("lambda1", t.lambda1);
  r.get("lambda2", t.lambda2);
  r.get("beta", t.beta);
  r.get("K_per_class", t.K_per_class);
  r.get("k_is_total", t.k_is_total);
  r.get("M", t.M);
  if (const json* e = r.child("encoder")) {
    Reader er(*e, "encoder.");
    er.get("latent_dim", t.encoder.latent_dim);
    er.get("channels", t.encoder.channels);
    er.get("kernel", t.encoder.kernel);
    er.get("stride", t.encoder.stride);
    er.get("share_stem", t.encoder.share_stem);
    er.get("bounded_latent", t.encoder.bounded_latent);
    er.finish();
  }
  r.get("fusion_hidden", t.fusion_hidden);
  r.get("q_hidden", t.q_hidden);
  r.get("learning_rate", t.learning_rate);
  r.get("weight_decay", t.weight_decay);
  r.get("epochs", t.epochs);
  r.get("batch_size", t.batch_size);
  r.get("projection_period", t.projection_period);
  r.get("projection_warmup", t.projection_warmup);
  r.get("seed", t.seed);
  std::string text = t.ablation.variant_name();
  r.get("ablation", text);
  t.ablation = train::Ablation::parse(text);
  r.get("tau", t.tau);
  r.get("margin", t.margin);
  text = proto::to_string(t.classifier_distance);
  r.get("classifier_distance", text);
  t.classifier_distance = proto::distance_kind_from_string(text);
  text = proto::to_string(t.regularizer_distance);
  r.get("regularizer_distance", text);
  t.regularizer_distance = proto::distance_kind_from_string(text);
  text = intervention::to_string(t.nwgm_mode);
  r.get("nwgm_mode", text);
  t.nwgm_mode = intervention::pooling_mode_from_string(text);
  r.get("freeze_ps_in_ce", t.freeze_ps_in_ce);
  r.get("subsample_contexts", t.subsample_contexts);
  r.get("proto_init_scale", t.proto_init_scale);
  r.get("data_init_prototypes", t.data_init_prototypes);
  r.get("q_lr_scale", t.q_lr_scale);
  r.get("q_steps", t.q_steps);
  r.get("clip_negative_mi", t.clip_negative_mi);
  r.get("mi_through_spurious", t.mi_through_spurious);
  r.get("purity_neighbors", t.purity_neighbors);
  r.get("eval_q_steps", t.eval_q_steps);
  r.get("divergence_threshold", t.divergence_threshold);
  r.get("keep_best", t.keep_best);
  r.get("seeds", cfg.seeds);
  r.get("threads", cfg.threads);
  if (const json* d = r.child("data")) {
    Reader dr(*d, "data.");
    dr.get("num_classes", cfg.data.num_classes);
    dr.get("num_artifacts", cfg.data.num_artifacts);
    dr.get("image_size", cfg.data.image_size);
    dr.get("rho_train", cfg.data.rho_train);
    dr.get("rho_test", cfg.data.rho_test);
    dr.get("samples_per_split", cfg.data.samples_per_split);
    dr.get("noise_std", cfg.data.noise_std);
    dr.get("artifact_strength", cfg.data.artifact_strength);
    dr.get("seed", cfg.data.seed);
    dr.get("overlap", cfg.data.overlap);
    dr.finish();
  }
  r.finish();

  // Shared quantities live in one place.
  t.num_classes = cfg.data.num_classes;
  t.encoder.image_size = cfg.data.image_size;
  if (cfg.seeds.empty()) throw ConfigError("seeds must not be empty");
  if (cfg.threads < 1) throw ConfigError("threads must be >= 1");
  datagen::validate(cfg.data);
  t.validate();
  return cfg;
}

json parse_json(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(what + ": invalid JSON: " + e.what());
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

std::string to_json(const RunConfig& cfg) { return to_value(cfg).dump(2); }

RunConfig from_json(const std::string& text) { return from_value(parse_json(text, "config")); }

RunConfig load(const std::filesystem::path& path) {
  try {
    return from_json(read_file(path));
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    if (msg.rfind(path.string(), 0) == 0) throw;
    throw ConfigError(path.string() + ": " + msg);
  }
}

void save(const std::filesystem::path& path, const RunConfig& cfg) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << to_json(cfg) << "\n";
  if (!os) throw IoError("failed writing " + path.string());
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  json root = to_value(cfg);
  json* node = &root;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) throw ConfigError("unknown config key '" + key + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (node->is_object()) throw ConfigError("config key '" + key + "' names a section, not a field");
  // Integer-valued doubles ("1") are fine for real fields; strings stay strings.
  if (node->is_number_float() && value.is_number()) value = value.get<double>();
  if (node->is_string() && !value.is_string()) value = raw;
  *node = value;
  cfg = from_value(root);
}

std::string config_hash(const RunConfig& cfg) {
  const std::string body = to_value(cfg).dump();
  const std::string blob = "blob " + std::to_string(body.size()) + '\0' + body;
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(blob.data(), blob.size(), digest, &len, EVP_sha1(), nullptr) != 1) {
    throw std::runtime_error("SHA-1 digest failed");
  }
  std::ostringstream ss;
  for (unsigned int i = 0; i < len; ++i) ss << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return ss.str();
}

datagen::ScmConfig data_for_seed(const RunConfig& cfg, std::uint64_t seed) {
  datagen::ScmConfig d = cfg.data;
  d.seed = cfg.data.seed + seed;
  return d;
}

std::filesystem::path output_root(const std::filesystem::path& fallback) {
  const char* env = std::getenv("CAUSALPROTO_OUT");
  if (env != nullptr && *env != '\0') return env;
  return fallback;
}

std::string RunManifest::to_json() const {
  json j = {{"config", to_value(config)}, {"hash", hash}, {"command", command}, {"artifacts", artifacts}};
  return j.dump(2);
}

RunManifest RunManifest::from_json(const std::string& text) {
  const json j = parse_json(text, "run manifest");
  if (!j.is_object() || !j.contains("config") || !j.contains("hash")) {
    throw ConfigError("run manifest lacks config or hash");
  }
  RunManifest m;
  m.config = from_value(j.at("config"));
  try {
    m.hash = j.at("hash").get<std::string>();
    m.command = j.value("command", std::string());
    m.artifacts = j.value("artifacts", std::vector<std::string>{});
  } catch (const json::exception& e) {
    throw ConfigError(std::string("run manifest: ") + e.what());
  }
  if (m.hash != config_hash(m.config)) {
    throw ConfigError("run manifest hash " + m.hash + " does not match its config (" + config_hash(m.config) + ")");
  }
  return m;
}

RunManifest RunManifest::read(const std::filesystem::path& run_dir) {
  const auto path = run_dir / kRunManifestName;
  if (!std::filesystem::exists(path)) throw IoError("no run manifest at " + path.string());
  return from_json(read_file(path));
}

void RunManifest::write(const std::filesystem::path& run_dir) const {
  std::filesystem::create_directories(run_dir);
  const auto path = run_dir / kRunManifestName;
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << to_json() << "\n";
  if (!os) throw IoError("failed writing " + path.string());
}

}  // namespace causalproto::config

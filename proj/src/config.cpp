#include "varan/config.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <ostream>
#include <sstream>

namespace varan {

namespace {

using Json = nlohmann::json;

struct KeySpec {
  std::string name;
  std::string help;
  std::function<Json(const RunConfig&)> get;
  std::function<void(RunConfig&, const Json&)> set;
};

template <class T>
T as(const Json& v, const std::string& key) {
  try {
    if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) throw ConfigError("");
    } else if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError("");
    } else {
      if (!v.is_number_unsigned()) throw ConfigError("");
    }
    return v.get<T>();
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type: " + v.dump());
  }
}

#define VARAN_KEY(NAME, FIELD, TYPE, HELP)                                                      \
  KeySpec {                                                                                      \
    NAME, HELP, [](const RunConfig& c) { return Json(c.FIELD); },                               \
        [](RunConfig& c, const Json& v) { c.FIELD = as<TYPE>(v, NAME); }                         \
  }

const std::vector<KeySpec>& registry() {
  static const std::vector<KeySpec> keys = {
      VARAN_KEY("task", task, std::string, "subcommand recorded with the run"),
      VARAN_KEY("seed", seed, std::uint64_t, "master seed for data, initialization and batch order"),
      VARAN_KEY("synth.n_layers", synth.n_layers, std::size_t, "encoder layers in the synthetic stack (>= 2)"),
      VARAN_KEY("synth.dim", synth.dim, std::size_t, "hidden size d"),
      VARAN_KEY("synth.seq_len", synth.seq_len, std::size_t, "frames per sample"),
      VARAN_KEY("synth.n_classes", synth.n_classes, std::size_t, "label classes C"),
      VARAN_KEY("synth.n_regimes", synth.n_regimes, std::size_t, "hidden regimes R (<= n_layers)"),
      VARAN_KEY("synth.signal_strength", synth.signal_strength, double, "scale of the class means"),
      VARAN_KEY("synth.noise_sigma", synth.noise_sigma, double, "per-entry Gaussian noise"),
      VARAN_KEY("synth.n_train", synth.n_train, std::size_t, "training samples"),
      VARAN_KEY("synth.n_val", synth.n_val, std::size_t, "validation samples"),
      VARAN_KEY("synth.n_test", synth.n_test, std::size_t, "test samples"),
      KeySpec{"model.kind", "varan | weighted_sum | last_layer",
              [](const RunConfig& c) { return Json(to_string(c.model.kind)); },
              [](RunConfig& c, const Json& v) {
                try {
                  c.model.kind = parse_model_kind(as<std::string>(v, "model.kind"));
                } catch (const ConfigError&) {
                  throw;
                } catch (const std::invalid_argument& e) {
                  throw ConfigError(e.what());
                }
              }},
      VARAN_KEY("model.head_hidden", model.head_hidden, std::size_t,
                "probing-head hidden size; 0 makes each head one linear layer"),
      VARAN_KEY("model.mhsa_heads", model.mhsa_heads, std::size_t, "attention heads of the posterior predictor"),
      VARAN_KEY("model.layer_embedding", model.layer_embedding, bool,
                "add learned layer embeddings to the posterior's layer tokens"),
      VARAN_KEY("model.include_layer0", model.include_layer0, bool,
                "prepend the backbone input projection h_0 (toy backbone only)"),
      VARAN_KEY("model.lora.enabled", model.lora.enabled, bool, "train low-rank adapters on a frozen toy backbone"),
      VARAN_KEY("model.lora.rank", model.lora.rank, std::size_t, "adapter rank r; search grid {8, 16, 32}"),
      VARAN_KEY("model.lora.scale", model.lora.scale, double, "multiplier on the adapter product A*B"),
      VARAN_KEY("optim.lr", optim.lr, double, "Adam learning rate; search grid {1e-5, 3e-5, 1e-4, 1e-3}"),
      VARAN_KEY("optim.weight_decay", optim.weight_decay, double, "decoupled weight decay; search grid {0.05, 0.1}"),
      VARAN_KEY("optim.batch_size", optim.batch_size, std::size_t, "minibatch size; search grid {16, 32, 64}"),
      VARAN_KEY("optim.epochs", optim.epochs, std::size_t, "training epochs (0 keeps the initialization)"),
      VARAN_KEY("optim.beta1", optim.beta1, double, "Adam first-moment decay"),
      VARAN_KEY("optim.beta2", optim.beta2, double, "Adam second-moment decay"),
      VARAN_KEY("optim.eps", optim.eps, double, "Adam denominator epsilon"),
      VARAN_KEY("objective.beta", objective.beta, double, "KL weight; search grid {0.01, 0.05, 0.1}"),
      VARAN_KEY("objective.prior_df", objective.prior_df, double,
                "chi-squared prior degrees of freedom; search grid {1, 3, 5, 15, 35, 50, 100, 400}"),
      VARAN_KEY("paths.dataset", paths.dataset, std::string, "dataset file (read, or written by gen-data)"),
      VARAN_KEY("paths.checkpoint", paths.checkpoint, std::string, "checkpoint file; compare adds _<kind>"),
      VARAN_KEY("paths.metrics", paths.metrics, std::string, "JSON-lines metric stream; compare adds _<kind>"),
      VARAN_KEY("paths.exports", paths.exports, std::string, "per-sample weight analysis CSV"),
      VARAN_KEY("paths.report", paths.report, std::string, "compare report JSON"),
  };
  return keys;
}

#undef VARAN_KEY

const KeySpec& find_key(const std::string& name) {
  for (const auto& k : registry())
    if (k.name == name) return k;
  throw ConfigError("unknown config key '" + name + "'");
}

void flatten(const Json& j, const std::string& prefix, std::map<std::string, Json>& out) {
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) flatten(v, prefix.empty() ? k : prefix + "." + k, out);
  } else {
    out[prefix] = j;
  }
}

Json parse_literal(const std::string& text) {
  try {
    return Json::parse(text);
  } catch (const Json::exception&) {
    return Json(text);
  }
}

}  // namespace

SynthSpec RunConfig::synth_spec() const {
  SynthSpec s = synth;
  s.seed = seed;
  return s;
}

void RunConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  static const char* const tasks[] = {"gen-data", "train", "eval", "compare", "plot-prior", "grad-check"};
  need(std::find(std::begin(tasks), std::end(tasks), task) != std::end(tasks), "unknown task '" + task + "'");
  try {
    synth_spec().validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  need(optim.lr > 0.0, "optim.lr must be > 0");
  need(optim.weight_decay >= 0.0, "optim.weight_decay must be >= 0");
  need(optim.batch_size >= 1, "optim.batch_size must be >= 1");
  need(optim.beta1 >= 0.0 && optim.beta1 < 1.0, "optim.beta1 must lie in [0, 1)");
  need(optim.beta2 >= 0.0 && optim.beta2 < 1.0, "optim.beta2 must lie in [0, 1)");
  need(optim.eps > 0.0, "optim.eps must be > 0");
  need(objective.beta >= 0.0, "objective.beta must be >= 0");
  need(objective.prior_df > 0.0, "objective.prior_df must be > 0");
  need(model.mhsa_heads >= 1 && synth.dim % model.mhsa_heads == 0, "model.mhsa_heads must divide synth.dim");
  need(!model.lora.enabled || (model.lora.rank >= 1 && model.lora.rank <= synth.dim),
       "model.lora.rank must lie in [1, synth.dim]");
  need(!model.include_layer0,
       "model.include_layer0 applies to the toy backbone input projection; stored stacks have no layer 0");
}

nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json out = nlohmann::ordered_json::object();
  for (const auto& k : registry()) {
    nlohmann::ordered_json* node = &out;
    std::stringstream ss(k.name);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) node = &(*node)[parts[i]];
    (*node)[parts.back()] = nlohmann::ordered_json::parse(k.get(c).dump());
  }
  return out;
}

RunConfig apply_json(RunConfig base, const nlohmann::json& doc) {
  if (!doc.is_object()) throw ConfigError("config document must be a JSON object");
  std::map<std::string, Json> flat;
  flatten(doc, "", flat);
  for (const auto& [key, value] : flat) find_key(key).set(base, value);
  return base;
}

RunConfig apply_overrides(RunConfig base, const std::map<std::string, std::string>& overrides) {
  for (const auto& [key, text] : overrides) {
    const KeySpec& k = find_key(key);
    Json v = parse_literal(text);
    // Paths and other strings that happen to parse as numbers stay strings.
    if (k.get(base).is_string() && !v.is_string()) v = Json(text);
    k.set(base, v);
  }
  return base;
}

namespace {

Json read_config_doc(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path);
  try {
    return Json::parse(f);
  } catch (const Json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
}

}  // namespace

RunConfig load_config_file(const std::string& path) { return apply_json(RunConfig{}, read_config_doc(path)); }

RunConfig resolve_config(const std::string& file, const std::map<std::string, std::string>& overrides,
                         std::ostream* notices) {
  std::map<std::string, Json> file_keys;
  RunConfig from_file;
  if (!file.empty()) {
    const Json doc = read_config_doc(file);
    from_file = apply_json(RunConfig{}, doc);
    flatten(doc, "", file_keys);
  }
  RunConfig merged = apply_overrides(from_file, overrides);
  if (notices) {
    for (const auto& [key, text] : overrides) {
      if (!file_keys.count(key)) continue;
      const KeySpec& k = find_key(key);
      if (k.get(from_file) != k.get(merged)) {
        *notices << "notice: " << key << " = " << k.get(merged).dump() << " from flag overrides config file value "
                 << k.get(from_file).dump() << '\n';
      }
    }
  }
  return merged;
}

std::string config_help() {
  std::ostringstream os;
  const RunConfig defaults{};
  for (const auto& k : registry()) {
    os << "  " << k.name;
    for (std::size_t i = k.name.size(); i < 26; ++i) os << ' ';
    os << k.get(defaults).dump() << "  " << k.help << '\n';
  }
  return os.str();
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& k : registry()) out.push_back(k.name);
  return out;
}

}  // namespace varan

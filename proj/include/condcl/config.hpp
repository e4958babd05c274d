#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "condcl/encoder.hpp"
#include "condcl/errors.hpp"
#include "condcl/kernels.hpp"
#include "condcl/losses.hpp"

namespace condcl {

/// One documented configuration key: "section.key", its default (empty
/// means unset) and a one-line description.
struct ConfigKey {
  std::string name;
  std::string default_value;
  std::string doc;
};

inline const std::vector<ConfigKey>& config_registry() {
  static const std::vector<ConfigKey> keys{
      {"kernel.family", "rbf", "rbf | categorical | product"},
      {"kernel.sigma", "", "bandwidth; required for rbf and product"},

      {"loss.kind", "align+cond_unif", "infonce | supcon | yaware | align+global_unif | align+cond_unif"},
      {"loss.tau", "0.1", "temperature"},
      {"loss.lambda", "1", "weight of the uniformity term"},
      {"loss.epsilon", "1e-12", "degeneracy threshold for normalisers"},

      {"train.preset", "desk", "desk | cifar | mri; supplies train.* defaults"},
      {"train.batch_size", "", "batch size"},
      {"train.epochs", "", "training epochs"},
      {"train.learning_rate", "", "initial learning rate"},
      {"train.weight_decay", "", "L2 weight decay"},
      {"train.optimizer", "", "adam | sgd-momentum"},
      {"train.lr_decay_gamma", "", "multiplicative lr decay"},
      {"train.lr_decay_period", "", "epochs between decays; 0 disables"},
      {"train.hidden", "", "comma-separated hidden widths"},
      {"train.embed_dim", "", "embedding dimension d"},
      {"train.augment_noise", "", "Gaussian noise std-dev"},
      {"train.augment_mask", "", "coordinate drop probability"},
      {"train.augment_crop", "", "crop strength (images)"},
      {"train.augment_flip", "", "flip strength (images)"},

      {"data.source", "synthetic", "synthetic | cifar10"},
      {"data.root", "", "CIFAR-10 directory; defaults to $CONDCL_DATA_DIR"},
      {"data.seed", "100", "seed of the synthetic dataset draw"},
      {"data.n_train", "2000", "training samples"},
      {"data.n_test", "1000", "test samples"},
      {"data.nuisance_dim", "16", "synthetic nuisance coordinates"},
      {"data.kappa", "4", "synthetic noise concentration"},
      {"data.meta_jitter", "1", "std-dev of the synthetic continuous proxy"},
      {"data.side", "8", "CIFAR grayscale side after downsampling"},

      {"experiment.seed", "0", "base seed"},
      {"experiment.seeds", "", "comma-separated seeds; defaults to experiment.seed"},
      {"experiment.threads", "1", "worker threads"},
      {"experiment.threshold", "1e-6", "gradcheck relative-error threshold for losses"},
      {"experiment.encoder_threshold", "1e-5", "gradcheck threshold through the encoder"},
      {"experiment.step", "1e-5", "finite-difference step"},
      {"experiment.sizes", "2x2,2x8,2x64,3x2,3x8,3x64,8x2,8x8,8x64,32x2,32x8,32x64", "NxD pairs"},
      {"experiment.include_references", "true", "gradcheck the infonce/supcon references too"},
      {"experiment.batches", "135", "decompose: number of random batches"},
      {"experiment.batch_n", "1,2,8,64,256", "decompose: batch sizes cycled through"},
      {"experiment.batch_d", "2,16,64", "decompose: feature widths cycled through"},
      {"experiment.batch_tau", "0.05,0.1,1", "decompose: temperatures cycled through"},
      {"experiment.max_gap", "1e-12", "decompose: allowed value gap"},
      {"experiment.max_grad_gap", "1e-10", "decompose: allowed entry-wise gradient gap"},
      {"experiment.batch_sizes", "64,256,1024,4096", "converge: ascending batch sizes"},
      {"experiment.reps", "32", "converge: repetitions per batch size"},
      {"experiment.limit_samples", "1000000", "converge: Monte Carlo samples for the limit"},
      {"experiment.model_kappa", "20", "converge: noise concentration of the synthetic model"},
      {"experiment.model_dim", "3", "converge: sphere dimension + 1"},
      {"experiment.encoder", "identity", "converge: identity | random-mlp"},
      {"experiment.slope_min", "-0.7", "converge: lower end of the accepted log-log slope"},
      {"experiment.slope_max", "-0.3", "converge: upper end of the accepted log-log slope"},
      {"experiment.checkpoint", "", "probe: checkpoint to evaluate; trains one when empty"},
      {"experiment.export_features", "false", "probe: also write features.csv"},
      {"experiment.probe_epochs", "500", "linear probe epochs"},
      {"experiment.probe_lr", "0.1", "linear probe learning rate"},
      {"experiment.kinds", "infonce,supcon,yaware,align+global_unif,align+cond_unif", "compare: loss kinds"},
      {"experiment.lambdas", "0,0.5,1,2", "compare: lambda sweep"},
      {"experiment.sweep_kinds", "align+cond_unif", "compare: kinds that get the lambda sweep"},
      {"experiment.eval_every", "0", "compare: probe every k epochs for the accuracy curve; 0 = end only"},
  };
  return keys;
}

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

inline bool is_known_key(const std::string& name) {
  for (const auto& k : config_registry())
    if (k.name == name) return true;
  return false;
}

inline std::map<std::string, std::string> preset_train_values(const std::string& preset) {
  const TrainConfig t = TrainConfig::preset(preset);
  std::map<std::string, std::string> kv;
  const auto text = t.canonical_text();
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    const std::string key = "train." + line.substr(0, eq);
    if (is_known_key(key)) kv[key] = line.substr(eq + 1);
  }
  return kv;
}

}  // namespace detail

/// Fully resolved run configuration: registry defaults, then the preset's
/// train.* values, then the file, then command-line overrides.
class RunConfig {
 public:
  RunConfig() { resolve({}, {}); }

  /// Parses INI text. Unknown sections/keys and malformed lines raise
  /// ConfigError.
  static std::map<std::string, std::string> parse_ini(const std::string& text, const std::string& origin = "config") {
    std::istringstream is(text);
    boost::property_tree::ptree pt;
    try {
      boost::property_tree::ini_parser::read_ini(is, pt);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw ConfigError(origin + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
    }
    std::map<std::string, std::string> kv;
    for (const auto& [section, body] : pt) {
      if (body.empty()) throw ConfigError(origin + ": key '" + section + "' outside a section");
      for (const auto& [key, value] : body) {
        const std::string name = section + "." + key;
        if (!detail::is_known_key(name)) throw ConfigError(origin + ": unknown key '" + name + "'");
        kv[name] = detail::trim(value.data());
      }
    }
    return kv;
  }

  static RunConfig from_file(const std::string& path, const std::map<std::string, std::string>& overrides = {}) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config file '" + path + "'");
    std::stringstream buf;
    buf << is.rdbuf();
    RunConfig rc;
    rc.resolve(parse_ini(buf.str(), path), overrides);
    return rc;
  }

  static RunConfig from_text(const std::string& text, const std::map<std::string, std::string>& overrides = {}) {
    RunConfig rc;
    rc.resolve(parse_ini(text), overrides);
    return rc;
  }

  static RunConfig from_overrides(const std::map<std::string, std::string>& overrides) {
    RunConfig rc;
    rc.resolve({}, overrides);
    return rc;
  }

  /// "section.key=value" as given to --set.
  static std::pair<std::string, std::string> parse_assignment(const std::string& s) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + s + "' is not section.key=value");
    std::string key = detail::trim(s.substr(0, eq));
    if (!detail::is_known_key(key)) throw ConfigError("unknown key '" + key + "'");
    return {key, detail::trim(s.substr(eq + 1))};
  }

  const std::string& get(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown key '" + key + "'");
    return it->second;
  }

  bool has(const std::string& key) const { return !get(key).empty(); }

  double get_double(const std::string& key) const { return parse_double(key, get(key)); }

  std::uint64_t get_u64(const std::string& key) const {
    const std::string& v = get(key);
    try {
      std::size_t used = 0;
      if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
      const auto u = std::stoull(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return u;
    } catch (const std::exception&) {
      throw ConfigError(key + ": '" + v + "' is not a non-negative integer");
    }
  }

  std::size_t get_size(const std::string& key) const { return static_cast<std::size_t>(get_u64(key)); }

  bool get_bool(const std::string& key) const {
    const std::string& v = get(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(key + ": '" + v + "' is not a boolean");
  }

  std::vector<std::string> get_list(const std::string& key) const { return detail::split(get(key), ','); }

  std::vector<double> get_double_list(const std::string& key) const {
    std::vector<double> out;
    for (const auto& s : get_list(key)) out.push_back(parse_double(key, s));
    return out;
  }

  std::vector<std::size_t> get_size_list(const std::string& key) const {
    std::vector<std::size_t> out;
    for (const auto& s : get_list(key)) {
      if (s.find_first_not_of("0123456789") != std::string::npos) throw ConfigError(key + ": bad entry '" + s + "'");
      out.push_back(static_cast<std::size_t>(std::stoull(s)));
    }
    return out;
  }

  /// "NxD" pairs.
  std::vector<std::pair<std::size_t, std::size_t>> get_shape_list(const std::string& key) const {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (const auto& s : get_list(key)) {
      const auto x = s.find('x');
      if (x == std::string::npos) throw ConfigError(key + ": '" + s + "' is not NxD");
      try {
        out.emplace_back(std::stoull(s.substr(0, x)), std::stoull(s.substr(x + 1)));
      } catch (const std::exception&) {
        throw ConfigError(key + ": '" + s + "' is not NxD");
      }
    }
    return out;
  }

  /// experiment.seeds, or {experiment.seed} when unset.
  std::vector<std::uint64_t> seeds() const {
    std::vector<std::uint64_t> out;
    for (std::size_t v : get_size_list("experiment.seeds")) out.push_back(v);
    if (out.empty()) out.push_back(get_u64("experiment.seed"));
    return out;
  }

  KernelConfig kernel() const {
    const KernelFamily fam = parse_kernel_family(get("kernel.family"));
    std::optional<double> sigma;
    if (has("kernel.sigma")) sigma = get_double("kernel.sigma");
    return KernelConfig::make(fam, sigma);
  }

  LossConfig loss() const {
    LossConfig c;
    c.tau = get_double("loss.tau");
    c.lambda = get_double("loss.lambda");
    c.epsilon = get_double("loss.epsilon");
    c.validate();
    return c;
  }

  LossKind loss_kind() const { return parse_loss_kind(get("loss.kind")); }

  /// TrainConfig for one seed; kernel and loss sections fill the loss fields.
  TrainConfig train(std::uint64_t seed) const {
    std::string text;
    for (const auto& [k, v] : values_)
      if (k.rfind("train.", 0) == 0 && k != "train.preset") text += k.substr(6) + "=" + v + "\n";
    TrainConfig t;
    try {
      t = TrainConfig::from_canonical_text(text);
    } catch (const std::exception& e) {
      throw ConfigError(std::string("train section: ") + e.what());
    }
    t.loss_kind = loss_kind();
    t.tau = get_double("loss.tau");
    t.lambda = get_double("loss.lambda");
    t.kernel = parse_kernel_family(get("kernel.family"));
    t.sigma = has("kernel.sigma") ? std::optional<double>(get_double("kernel.sigma")) : std::nullopt;
    t.seed = seed;
    try {
      t.validate();
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
    return t;
  }

  /// Canonical INI: sections and keys sorted, every key present.
  std::string to_ini() const {
    std::map<std::string, std::map<std::string, std::string>> sections;
    for (const auto& [k, v] : values_) {
      const auto dot = k.find('.');
      sections[k.substr(0, dot)][k.substr(dot + 1)] = v;
    }
    std::string out;
    for (const auto& [s, kv] : sections) {
      if (!out.empty()) out += "\n";
      out += "[" + s + "]\n";
      for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
    }
    return out;
  }

  const std::map<std::string, std::string>& values() const noexcept { return values_; }

 private:
  static double parse_double(const std::string& key, const std::string& s) {
    try {
      std::size_t used = 0;
      const double d = std::stod(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return d;
    } catch (const std::exception&) {
      throw ConfigError(key + ": '" + s + "' is not a number");
    }
  }

  void resolve(const std::map<std::string, std::string>& file, const std::map<std::string, std::string>& flags) {
    values_.clear();
    for (const auto& k : config_registry()) values_[k.name] = k.default_value;
    auto layer = [&](const std::map<std::string, std::string>& kv) {
      for (const auto& [k, v] : kv) {
        if (!detail::is_known_key(k)) throw ConfigError("unknown key '" + k + "'");
        values_[k] = v;
      }
    };
    std::string preset = values_["train.preset"];
    if (auto it = file.find("train.preset"); it != file.end()) preset = it->second;
    if (auto it = flags.find("train.preset"); it != flags.end()) preset = it->second;
    try {
      layer(detail::preset_train_values(preset));
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("train.preset: ") + e.what());
    }
    layer(file);
    layer(flags);
    if (values_["data.root"].empty())
      if (const char* env = std::getenv("CONDCL_DATA_DIR")) values_["data.root"] = env;
  }

  std::map<std::string, std::string> values_;
};

}  // namespace condcl

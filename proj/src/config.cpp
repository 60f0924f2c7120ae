#include "crl/config.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "crl/rng.hpp"

namespace crl {

namespace {

namespace pt = boost::property_tree;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

template <typename T>
T parse_integer(const std::string& text) {
  T v{};
  const auto s = trim(text);
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || s.empty()) {
    throw std::invalid_argument("expected an integer, got '" + text + "'");
  }
  return v;
}

double parse_double(const std::string& text) {
  const auto s = trim(text);
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (s.empty() || used != s.size()) {
    throw std::invalid_argument("expected a number, got '" + text + "'");
  }
  return v;
}

bool parse_bool(const std::string& text) {
  const auto s = trim(text);
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw std::invalid_argument("expected true or false, got '" + text + "'");
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T, typename F>
std::string join(const std::vector<T>& v, F fmt) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i > 0) out += ",";
    out += fmt(v[i]);
  }
  return out;
}

struct Field {
  const char* section;
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define CRL_INT_FIELD(sec, name, member)                                              \
  Field {                                                                             \
    sec, name, [](const RunConfig& c) { return std::to_string(c.member); },          \
        [](RunConfig& c, const std::string& v) {                                      \
          c.member = parse_integer<decltype(c.member)>(v);                             \
        }                                                                             \
  }
#define CRL_DOUBLE_FIELD(sec, name, member)                                           \
  Field {                                                                             \
    sec, name, [](const RunConfig& c) { return fmt_double(c.member); },               \
        [](RunConfig& c, const std::string& v) { c.member = parse_double(v); }        \
  }
#define CRL_BOOL_FIELD(sec, name, member)                                             \
  Field {                                                                             \
    sec, name, [](const RunConfig& c) { return std::string(c.member ? "true" : "false"); }, \
        [](RunConfig& c, const std::string& v) { c.member = parse_bool(v); }          \
  }
#define CRL_STRING_FIELD(sec, name, member)                                           \
  Field {                                                                             \
    sec, name, [](const RunConfig& c) { return c.member; },                           \
        [](RunConfig& c, const std::string& v) { c.member = trim(v); }                \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      CRL_INT_FIELD("run", "seed", seed),
      CRL_STRING_FIELD("run", "output_dir", output_dir),

      CRL_STRING_FIELD("task", "dir", task_dir),
      CRL_STRING_FIELD("task", "feature_labels", feature_labels),
      CRL_INT_FIELD("task", "vocab", planted.vocab),
      CRL_INT_FIELD("task", "d", planted.d),
      CRL_INT_FIELD("task", "layers", planted.layers),
      CRL_INT_FIELD("task", "mlp_hidden", planted.mlp_hidden),
      CRL_INT_FIELD("task", "d_dict", planted.d_dict),
      CRL_INT_FIELD("task", "n_answers", planted.n_answers),
      CRL_INT_FIELD("task", "n_distractors", planted.n_distractors),
      CRL_INT_FIELD("task", "keys_per_class", planted.keys_per_class),
      CRL_INT_FIELD("task", "prompt_len", planted.prompt_len),
      CRL_INT_FIELD("task", "horizon", planted.horizon),
      CRL_INT_FIELD("task", "n_train", planted.n_train),
      CRL_INT_FIELD("task", "n_eval", planted.n_eval),
      CRL_DOUBLE_FIELD("task", "easy_fraction", planted.easy_fraction),
      CRL_DOUBLE_FIELD("task", "blocked_fraction", planted.blocked_fraction),
      CRL_INT_FIELD("task", "features_per_answer", planted.features_per_answer),
      CRL_INT_FIELD("task", "common_features", planted.common_features),
      CRL_INT_FIELD("task", "hook_layer", planted.hook_layer),
      CRL_DOUBLE_FIELD("task", "steer_strength", planted.steer_strength),
      Field{"task", "sae_activation",
            [](const RunConfig& c) {
              return std::string(c.planted.activation == SaeActivation::kRelu ? "relu"
                                                                              : "jumprelu");
            },
            [](RunConfig& c, const std::string& v) {
              const auto s = trim(v);
              if (s == "relu") {
                c.planted.activation = SaeActivation::kRelu;
              } else if (s == "jumprelu") {
                c.planted.activation = SaeActivation::kJumpRelu;
              } else {
                throw std::invalid_argument("expected relu or jumprelu, got '" + v + "'");
              }
            }},
      CRL_INT_FIELD("task", "max_retries", planted.max_retries),
      CRL_DOUBLE_FIELD("task", "min_coverage", planted.min_coverage),

      Field{"agent", "mode", [](const RunConfig& c) { return std::string(agent_mode_name(c.mode)); },
            [](RunConfig& c, const std::string& v) { c.mode = parse_agent_mode(trim(v)); }},

      Field{"steering", "layers",
            [](const RunConfig& c) {
              return join(c.steering.layers, [](int l) { return std::to_string(l); });
            },
            [](RunConfig& c, const std::string& v) {
              c.steering.layers.clear();
              for (const auto& item : split_list(v)) c.steering.layers.push_back(parse_integer<int>(item));
            }},
      CRL_BOOL_FIELD("steering", "calibrated", steering.calibrated),
      CRL_DOUBLE_FIELD("steering", "coefficient", steering.coefficient),
      Field{"steering", "calibration_mode",
            [](const RunConfig& c) {
              return std::string(calibration_mode_name(c.steering.calibration_mode));
            },
            [](RunConfig& c, const std::string& v) {
              c.steering.calibration_mode = parse_calibration_mode(trim(v));
            }},
      CRL_INT_FIELD("steering", "recalibrate_every", steering.recalibrate_every),
      CRL_INT_FIELD("steering", "k", steering.k),
      CRL_BOOL_FIELD("steering", "afm", steering.afm),
      CRL_INT_FIELD("steering", "afm_seed_size", steering.afm_seed_size),
      CRL_BOOL_FIELD("steering", "steer_prompt", steering.steer_prompt),

      CRL_DOUBLE_FIELD("ppo", "clip_epsilon", ppo.clip_epsilon),
      CRL_DOUBLE_FIELD("ppo", "policy_lr", ppo.policy_lr),
      CRL_DOUBLE_FIELD("ppo", "critic_lr", ppo.critic_lr),
      CRL_INT_FIELD("ppo", "epochs", ppo.epochs),
      CRL_INT_FIELD("ppo", "batch_size", ppo.batch_size),
      CRL_INT_FIELD("ppo", "max_steps", ppo.max_steps),
      CRL_INT_FIELD("ppo", "eval_interval", ppo.eval_interval),
      CRL_INT_FIELD("ppo", "eval_samples", ppo.eval_samples),
      CRL_INT_FIELD("ppo", "min_samples", ppo.min_samples),
      CRL_INT_FIELD("ppo", "hidden", ppo.hidden),
      CRL_BOOL_FIELD("ppo", "standardize_advantage", ppo.standardize_advantage),
      CRL_DOUBLE_FIELD("ppo", "entropy_coef", ppo.entropy_coef),

      Field{"sweep", "layers",
            [](const RunConfig& c) {
              return join(c.sweep_layers, [](int l) { return std::to_string(l); });
            },
            [](RunConfig& c, const std::string& v) {
              c.sweep_layers.clear();
              for (const auto& item : split_list(v)) c.sweep_layers.push_back(parse_integer<int>(item));
            }},
      Field{"sweep", "coefficients",
            [](const RunConfig& c) { return join(c.sweep_coefficients, fmt_double); },
            [](RunConfig& c, const std::string& v) {
              c.sweep_coefficients.clear();
              for (const auto& item : split_list(v)) c.sweep_coefficients.push_back(parse_double(item));
            }},
      CRL_INT_FIELD("sweep", "max_steps", sweep_steps),
  };
  return table;
}

#undef CRL_INT_FIELD
#undef CRL_DOUBLE_FIELD
#undef CRL_BOOL_FIELD
#undef CRL_STRING_FIELD

const Field* find_field(const std::string& section, const std::string& key) {
  for (const auto& f : fields()) {
    if (section == f.section && key == f.key) return &f;
  }
  return nullptr;
}

// Line of every "section.key" in the raw text, for error messages.
std::map<std::string, int> key_lines(const std::string& text) {
  std::map<std::string, int> out;
  std::istringstream is(text);
  std::string line;
  std::string section;
  int n = 0;
  while (std::getline(is, line)) {
    ++n;
    const auto t = trim(line);
    if (t.empty() || t[0] == ';' || t[0] == '#') continue;
    if (t.front() == '[' && t.back() == ']') {
      section = trim(t.substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq != std::string::npos) out.emplace(section + "." + trim(t.substr(0, eq)), n);
  }
  return out;
}

void set_field(RunConfig& cfg, const std::string& section, const std::string& key,
               const std::string& value, const std::string& where,
               std::vector<std::string>& errors) {
  const Field* f = find_field(section, key);
  if (f == nullptr) {
    errors.push_back(where + "unknown key '" + section + "." + key + "'");
    return;
  }
  try {
    f->set(cfg, value);
  } catch (const std::exception& e) {
    errors.push_back(where + section + "." + key + ": " + e.what());
  }
}

void apply_overrides(RunConfig& cfg, const std::vector<ConfigOverride>& overrides,
                     std::vector<std::string>& errors) {
  for (const auto& [path, value] : overrides) {
    const auto dot = path.find('.');
    if (dot == std::string::npos) {
      errors.push_back("override '" + path + "': expected section.key");
      continue;
    }
    set_field(cfg, path.substr(0, dot), path.substr(dot + 1), value, "override: ", errors);
  }
}

void sync_seeds(RunConfig& cfg) {
  cfg.planted.seed = cfg.seed;
  cfg.ppo.seed = cfg.seed;
}

[[noreturn]] void fail_with(const std::string& origin, const std::vector<std::string>& errors) {
  std::string msg = origin.empty() ? "invalid configuration" : origin + ": invalid configuration";
  for (const auto& e : errors) msg += "\n  " + e;
  fail(ErrorKind::kConfig, msg);
}

}  // namespace

ConfigOverride parse_override(const std::string& text) {
  const auto eq = text.find('=');
  require(eq != std::string::npos && eq > 0, ErrorKind::kConfig,
          "override '" + text + "' is not of the form section.key=value");
  return {trim(text.substr(0, eq)), trim(text.substr(eq + 1))};
}

RunConfig parse_config(const std::string& text, const std::vector<ConfigOverride>& overrides,
                       const std::string& origin) {
  pt::ptree tree;
  try {
    std::istringstream is(text);
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    fail(ErrorKind::kConfig, origin + ":" + std::to_string(e.line()) + ": " + e.message());
  }

  RunConfig cfg;
  std::vector<std::string> errors;
  const auto lines = key_lines(text);
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) {
      const auto it = lines.find("." + section);
      const std::string where =
          it == lines.end() ? "" : "line " + std::to_string(it->second) + ": ";
      errors.push_back(where + "key '" + section + "' outside any section");
      continue;
    }
    for (const auto& [key, value] : body) {
      const auto it = lines.find(section + "." + key);
      const std::string where =
          it == lines.end() ? "" : "line " + std::to_string(it->second) + ": ";
      set_field(cfg, section, key, value.data(), where, errors);
    }
  }
  apply_overrides(cfg, overrides, errors);
  if (!errors.empty()) fail_with(origin, errors);
  sync_seeds(cfg);
  try {
    validate(cfg);
  } catch (const Error& e) {
    fail(ErrorKind::kConfig, origin + ": " + e.what());
  }
  return cfg;
}

RunConfig load_config(const std::string& path, const std::vector<ConfigOverride>& overrides) {
  std::ifstream is(path);
  if (!is) fail(ErrorKind::kConfig, "cannot read config file " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), overrides, path);
}

RunConfig default_config(const std::vector<ConfigOverride>& overrides) {
  return parse_config("", overrides, "<defaults>");
}

std::string serialize_config(const RunConfig& config) {
  std::ostringstream os;
  std::string section;
  for (const auto& f : fields()) {
    if (section != f.section) {
      if (!section.empty()) os << "\n";
      section = f.section;
      os << "[" << section << "]\n";
    }
    os << f.key << " = " << f.get(config) << "\n";
  }
  return os.str();
}

std::uint64_t config_hash(const RunConfig& config) { return fnv1a64(serialize_config(config)); }

void validate(const RunConfig& c) {
  std::vector<std::string> errors;
  auto check = [&](const std::function<void()>& fn) {
    try {
      fn();
    } catch (const Error& e) {
      errors.push_back(e.what());
    }
  };
  if (c.mode == AgentMode::kCrlLayer && c.steering.layers.size() < 2) {
    errors.push_back("agent.mode = crl-layer needs at least 2 steered layers");
  }
  if (c.steering.layers.empty()) errors.push_back("steering.layers is empty");
  for (std::size_t i = 1; i < c.steering.layers.size(); ++i) {
    if (c.steering.layers[i] <= c.steering.layers[i - 1]) {
      errors.push_back("steering.layers must be strictly ascending");
      break;
    }
  }
  for (int l : c.steering.layers) {
    if (l < 1) errors.push_back("steering.layers entries must be >= 1");
    if (c.task_dir.empty() && l > c.planted.layers) {
      errors.push_back("steered layer " + std::to_string(l) + " exceeds task.layers");
    }
  }
  if (c.steering.k < 1) errors.push_back("steering.k must be >= 1");
  if (c.steering.afm_seed_size < 1) errors.push_back("steering.afm_seed_size must be >= 1");
  if (c.steering.recalibrate_every < 0) errors.push_back("steering.recalibrate_every must be >= 0");
  if (!c.steering.calibrated && !std::isfinite(c.steering.coefficient)) {
    errors.push_back("steering.coefficient must be finite");
  }
  if (c.sweep_layers.empty()) errors.push_back("sweep.layers is empty");
  if (c.sweep_coefficients.empty()) errors.push_back("sweep.coefficients is empty");
  if (c.sweep_steps < 0) errors.push_back("sweep.max_steps must be >= 0");
  check([&] { validate(c.ppo); });
  if (c.task_dir.empty()) {
    check([&] { validate(c.planted); });
  } else if (!std::filesystem::is_directory(c.task_dir)) {
    errors.push_back("task.dir '" + c.task_dir + "' is not a directory");
  }
  if (!c.feature_labels.empty() && !std::filesystem::is_regular_file(c.feature_labels)) {
    errors.push_back("task.feature_labels '" + c.feature_labels + "' does not exist");
  }
  if (!errors.empty()) fail_with("", errors);
}

}  // namespace crl

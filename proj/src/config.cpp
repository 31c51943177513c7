#include "disfacerep/config.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>
#include <yaml-cpp/yaml.h>

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "disfacerep/error.hpp"

namespace disfacerep {
namespace {

double parse_double(const std::string& key, const std::string& s) {
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw ValidationError(key, "expected a number, got '" + s + "'");
  }
  return v;
}

long long parse_int(const std::string& key, const std::string& s) {
  long long v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw ValidationError(key, "expected an integer, got '" + s + "'");
  }
  return v;
}

std::uint64_t parse_u64(const std::string& key, const std::string& s) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw ValidationError(key, "expected a non-negative integer, got '" + s + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ValidationError(key, "expected a boolean, got '" + s + "'");
}

std::vector<double> parse_list(const std::string& key, std::string s) {
  if (!s.empty() && s.front() == '[') s = s.substr(1);
  if (!s.empty() && s.back() == ']') s.pop_back();
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    auto b = item.find_first_not_of(" \t");
    auto e = item.find_last_not_of(" \t");
    if (b == std::string::npos) continue;
    out.push_back(parse_double(key, item.substr(b, e - b + 1)));
  }
  return out;
}

std::string fmt_double(double v) { return fmt::format("{}", v); }

template <typename Member>
ConfigKey double_key(std::string path, Member member) {
  return {path, [member](const PipelineConfig& c) { return fmt_double(member(const_cast<PipelineConfig&>(c))); },
          [member, path](PipelineConfig& c, const std::string& s) { member(c) = parse_double(path, s); }};
}

template <typename Member>
ConfigKey int_key(std::string path, Member member) {
  return {path, [member](const PipelineConfig& c) { return std::to_string(member(const_cast<PipelineConfig&>(c))); },
          [member, path](PipelineConfig& c, const std::string& s) {
            member(c) = static_cast<int>(parse_int(path, s));
          }};
}

template <typename Member>
ConfigKey bool_key(std::string path, Member member) {
  return {path, [member](const PipelineConfig& c) { return member(const_cast<PipelineConfig&>(c)) ? "true" : "false"; },
          [member, path](PipelineConfig& c, const std::string& s) { member(c) = parse_bool(path, s); }};
}

template <typename Member>
ConfigKey string_key(std::string path, Member member) {
  return {path, [member](const PipelineConfig& c) { return member(const_cast<PipelineConfig&>(c)); },
          [member](PipelineConfig& c, const std::string& s) { member(c) = s; }};
}

#define DFR_FIELD(expr) [](PipelineConfig& c) -> auto& { return c.expr; }

std::vector<ConfigKey> build_keys() {
  std::vector<ConfigKey> keys = {
      double_key("alpha0", DFR_FIELD(alpha0)),
      double_key("alpha1", DFR_FIELD(alpha1)),
      double_key("beta0", DFR_FIELD(beta0)),
      double_key("beta1", DFR_FIELD(beta1)),
      double_key("beta2", DFR_FIELD(beta2)),
      double_key("lambda_reg", DFR_FIELD(lambda_reg)),
      double_key("theta", DFR_FIELD(theta)),
      double_key("mask_prob", DFR_FIELD(mask_prob)),
  };
  keys.push_back({"conf_thresholds",
                  [](const PipelineConfig& c) {
                    return fmt::format("[{}]", fmt::join(c.conf_thresholds, ", "));
                  },
                  [](PipelineConfig& c, const std::string& s) {
                    c.conf_thresholds = parse_list("conf_thresholds", s);
                  },
                  true});
  keys.push_back({"seed", [](const PipelineConfig& c) { return std::to_string(c.seed); },
                  [](PipelineConfig& c, const std::string& s) { c.seed = parse_u64("seed", s); }});
  keys.push_back(int_key("input_size", DFR_FIELD(input_size)));
  keys.push_back(int_key("embed_dim", DFR_FIELD(embed_dim)));
  keys.push_back(int_key("patch_count", DFR_FIELD(patch_count)));
  keys.push_back(double_key("dominance_threshold", DFR_FIELD(dominance_threshold)));
  keys.push_back(string_key("precision", DFR_FIELD(precision)));
  keys.push_back(int_key("workers", DFR_FIELD(workers)));

  keys.push_back(int_key("model.vl_dim", DFR_FIELD(model.vl_dim)));
  keys.push_back(int_key("model.projector_depth", DFR_FIELD(model.projector_depth)));
  keys.push_back(int_key("model.layers", DFR_FIELD(model.layers)));
  keys.push_back(int_key("model.mlp_ratio", DFR_FIELD(model.mlp_ratio)));
  keys.push_back(bool_key("model.pos_embed", DFR_FIELD(model.pos_embed)));
  keys.push_back(double_key("model.init_std", DFR_FIELD(model.init_std)));
  keys.push_back(string_key("model.fcam_fusion", DFR_FIELD(model.fcam_fusion)));

  keys.push_back(int_key("train.epochs", DFR_FIELD(train.epochs)));
  keys.push_back(int_key("train.batch_size", DFR_FIELD(train.batch_size)));
  keys.push_back(double_key("train.lr", DFR_FIELD(train.lr)));
  keys.push_back(double_key("train.weight_decay", DFR_FIELD(train.weight_decay)));
  keys.push_back(string_key("train.schedule", DFR_FIELD(train.schedule)));
  keys.push_back(double_key("train.grad_clip", DFR_FIELD(train.grad_clip)));
  keys.push_back(double_key("train.cls_weight", DFR_FIELD(train.cls_weight)));
  keys.push_back(double_key("train.patch_cls_weight", DFR_FIELD(train.patch_cls_weight)));
  keys.push_back(string_key("train.negatives", DFR_FIELD(train.negatives)));
  keys.push_back(int_key("train.log_every", DFR_FIELD(train.log_every)));

  keys.push_back(string_key("detector.kind", DFR_FIELD(detector.kind)));
  keys.push_back(string_key("detector.endpoint", DFR_FIELD(detector.endpoint)));
  keys.push_back(string_key("detector.auth_token", DFR_FIELD(detector.auth_token)));
  keys.push_back(int_key("detector.retries", DFR_FIELD(detector.retries)));
  keys.push_back(int_key("detector.timeout_ms", DFR_FIELD(detector.timeout_ms)));
  keys.push_back(double_key("detector.box_noise", DFR_FIELD(detector.box_noise)));
  keys.push_back(double_key("detector.decoy_prob", DFR_FIELD(detector.decoy_prob)));
  keys.push_back(double_key("detector.confidence_noise", DFR_FIELD(detector.confidence_noise)));

  keys.push_back(string_key("vl.kind", DFR_FIELD(vl.kind)));
  keys.push_back(string_key("vl.endpoint", DFR_FIELD(vl.endpoint)));
  keys.push_back(string_key("vl.auth_token", DFR_FIELD(vl.auth_token)));
  keys.push_back(int_key("vl.timeout_ms", DFR_FIELD(vl.timeout_ms)));
  keys.push_back(int_key("vl.pool_grid", DFR_FIELD(vl.pool_grid)));

  keys.push_back(int_key("parser.epochs", DFR_FIELD(parser.epochs)));
  keys.push_back(int_key("parser.batch_size", DFR_FIELD(parser.batch_size)));
  keys.push_back(double_key("parser.lr", DFR_FIELD(parser.lr)));
  keys.push_back(int_key("parser.width", DFR_FIELD(parser.width)));
  return keys;
}

#undef DFR_FIELD

const ConfigKey& find_key(const std::string& path) {
  for (const auto& k : config_keys()) {
    if (k.path == path) return k;
  }
  throw ValidationError(path, "unknown config key");
}

void load_node(const YAML::Node& node, const std::string& prefix, PipelineConfig& config) {
  if (!node.IsMap()) {
    throw ConfigError("expected a mapping" + (prefix.empty() ? "" : " under '" + prefix + "'"),
                      node.Mark().line + 1);
  }
  for (const auto& kv : node) {
    const std::string key = kv.first.as<std::string>();
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    const int line = kv.first.Mark().line + 1;
    const YAML::Node& value = kv.second;
    if (value.IsMap()) {
      load_node(value, path, config);
      continue;
    }
    const ConfigKey* spec = nullptr;
    for (const auto& k : config_keys()) {
      if (k.path == path) spec = &k;
    }
    if (!spec) throw ConfigError("unknown key '" + path + "'", line);
    try {
      if (spec->is_list) {
        if (!value.IsSequence()) throw ConfigError("'" + path + "' must be a list", line);
        std::string joined;
        for (const auto& item : value) joined += item.as<std::string>() + ",";
        spec->set(config, joined);
      } else {
        if (!value.IsScalar()) throw ConfigError("'" + path + "' must be a scalar", line);
        spec->set(config, value.as<std::string>());
      }
    } catch (const ValidationError& e) {
      throw ConfigError(e.what(), line);
    }
  }
}

}  // namespace

int PipelineConfig::patch_grid() const {
  const int g = static_cast<int>(std::lround(std::sqrt(static_cast<double>(patch_count))));
  return g;
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = build_keys();
  return keys;
}

void validate(const PipelineConfig& c) {
  const std::pair<const char*, double> weights[] = {
      {"alpha0", c.alpha0}, {"alpha1", c.alpha1}, {"beta0", c.beta0},
      {"beta1", c.beta1},   {"beta2", c.beta2},   {"lambda_reg", c.lambda_reg}};
  for (const auto& [name, w] : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ValidationError(name, "must be a finite weight >= 0");
  }
  if (!(c.theta > 0.0 && c.theta < 1.0)) throw ValidationError("theta", "must lie in (0, 1)");
  if (!(c.mask_prob >= 0.0 && c.mask_prob <= 1.0)) {
    throw ValidationError("mask_prob", "must lie in [0, 1]");
  }
  if (c.conf_thresholds.empty()) throw ValidationError("conf_thresholds", "must not be empty");
  for (std::size_t i = 0; i < c.conf_thresholds.size(); ++i) {
    const double t = c.conf_thresholds[i];
    if (!(t > 0.0 && t < 1.0)) throw ValidationError("conf_thresholds", "entries must lie in (0, 1)");
    if (i > 0 && !(t < c.conf_thresholds[i - 1])) {
      throw ValidationError("conf_thresholds", "must be strictly decreasing");
    }
  }
  if (c.input_size <= 0) throw ValidationError("input_size", "must be positive");
  if (c.embed_dim <= 0) throw ValidationError("embed_dim", "must be positive");
  const int g = c.patch_grid();
  if (c.patch_count <= 0 || g * g != c.patch_count) {
    throw ValidationError("patch_count", "must be a positive perfect square");
  }
  if (c.input_size % g != 0) {
    throw ValidationError("patch_count", "patch grid must divide input_size");
  }
  if (!(c.dominance_threshold > 0.0 && c.dominance_threshold <= 1.0)) {
    throw ValidationError("dominance_threshold", "must lie in (0, 1]");
  }
  if (c.precision != "float32" && c.precision != "float64") {
    throw ValidationError("precision", "must be float32 or float64");
  }
  if (c.workers < 1) throw ValidationError("workers", "must be >= 1");
  if (c.model.vl_dim <= 0) throw ValidationError("model.vl_dim", "must be positive");
  if (c.model.projector_depth < 1) throw ValidationError("model.projector_depth", "must be >= 1");
  if (c.model.layers < 1) throw ValidationError("model.layers", "must be >= 1");
  if (c.model.mlp_ratio < 1) throw ValidationError("model.mlp_ratio", "must be >= 1");
  if (!(c.model.init_std > 0.0)) throw ValidationError("model.init_std", "must be positive");
  const auto& f = c.model.fcam_fusion;
  if (f != "attention_x_p" && f != "attention" && f != "p") {
    throw ValidationError("model.fcam_fusion", "must be attention_x_p, attention or p");
  }
  if (c.train.epochs < 0) throw ValidationError("train.epochs", "must be >= 0");
  if (c.train.batch_size < 1) throw ValidationError("train.batch_size", "must be >= 1");
  if (!(c.train.lr > 0.0)) throw ValidationError("train.lr", "must be positive");
  if (!(c.train.weight_decay >= 0.0)) throw ValidationError("train.weight_decay", "must be >= 0");
  if (!(c.train.grad_clip >= 0.0)) throw ValidationError("train.grad_clip", "must be >= 0");
  if (c.train.schedule != "constant" && c.train.schedule != "cosine") {
    throw ValidationError("train.schedule", "must be constant or cosine");
  }
  if (!(c.train.cls_weight >= 0.0)) throw ValidationError("train.cls_weight", "must be >= 0");
  if (!(c.train.patch_cls_weight >= 0.0)) throw ValidationError("train.patch_cls_weight", "must be >= 0");
  if (c.train.negatives != "all" && c.train.negatives != "present") {
    throw ValidationError("train.negatives", "must be all or present");
  }
  if (c.train.log_every < 1) throw ValidationError("train.log_every", "must be >= 1");
  if (c.detector.kind != "stub" && c.detector.kind != "http") {
    throw ValidationError("detector.kind", "must be stub or http");
  }
  if (c.detector.retries < 0) throw ValidationError("detector.retries", "must be >= 0");
  if (!(c.detector.decoy_prob >= 0.0 && c.detector.decoy_prob <= 1.0)) {
    throw ValidationError("detector.decoy_prob", "must lie in [0, 1]");
  }
  if (c.vl.kind != "prototype" && c.vl.kind != "http") {
    throw ValidationError("vl.kind", "must be prototype or http");
  }
  if (c.vl.pool_grid < 0) throw ValidationError("vl.pool_grid", "must be >= 0");
  if (c.parser.epochs < 0) throw ValidationError("parser.epochs", "must be >= 0");
  if (c.parser.batch_size < 1) throw ValidationError("parser.batch_size", "must be >= 1");
  if (!(c.parser.lr > 0.0)) throw ValidationError("parser.lr", "must be positive");
  if (c.parser.width < 1) throw ValidationError("parser.width", "must be >= 1");
}

PipelineConfig parse_config(const std::string& yaml_text, PipelineConfig base) {
  YAML::Node root;
  try {
    root = YAML::Load(yaml_text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError(e.msg, e.mark.line + 1);
  }
  if (!root.IsNull()) load_node(root, "", base);
  validate(base);
  return base;
}

void apply_env_overrides(PipelineConfig& config) {
  for (const auto& k : config_keys()) {
    std::string var = "DISFACEREP_";
    for (char ch : k.path) {
      var += ch == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    }
    if (const char* v = std::getenv(var.c_str())) k.set(config, v);
  }
}

void apply_override(PipelineConfig& config, const std::string& key, const std::string& value) {
  find_key(key).set(config, value);
}

PipelineConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'", 0);
  std::stringstream ss;
  ss << in.rdbuf();
  PipelineConfig base;
  apply_env_overrides(base);
  return parse_config(ss.str(), base);
}

std::string serialize_config(const PipelineConfig& config) {
  // Group keys by their first path component, preserving registry order.
  std::string out;
  std::string current_group;
  for (const auto& k : config_keys()) {
    const auto dot = k.path.find('.');
    if (dot == std::string::npos) {
      out += k.path + ": ";
    } else {
      const std::string group = k.path.substr(0, dot);
      if (group != current_group) {
        out += group + ":\n";
        current_group = group;
      }
      out += "  " + k.path.substr(dot + 1) + ": ";
    }
    std::string v = k.get(config);
    const bool quote = v.empty() || v.find_first_of(":#{}[],&*!|>'\"%@`") != std::string::npos;
    if (quote && !k.is_list) v = "\"" + v + "\"";
    out += v + "\n";
  }
  return out;
}

}  // namespace disfacerep

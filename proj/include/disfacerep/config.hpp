#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace disfacerep {

struct ModelSettings {
  int vl_dim = 32;           // width e shared by v_cls and the VL embeddings
  int projector_depth = 1;   // linear layers in the class-token projector
  int layers = 2;            // transformer blocks in the reference backbone
  int mlp_ratio = 2;
  bool pos_embed = true;
  double init_std = 0.02;
  std::string fcam_fusion = "attention_x_p";  // attention_x_p | attention | p

  bool operator==(const ModelSettings&) const = default;
};

struct TrainSettings {
  int epochs = 10;
  int batch_size = 16;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  std::string schedule = "cosine";  // constant | cosine (decay to 0 over all steps)
  double grad_clip = 1.0;           // global gradient norm cap per step; 0 disables
  // Multi-label classification loss on the class tokens; always part of the
  // training objective, independent of the six alignment terms.
  double cls_weight = 1.0;
  // Same loss on the patch head's logits averaged over patches.
  double patch_cls_weight = 1.0;
  // "all": L = K-1 other components; "present": only components present in y.
  std::string negatives = "all";
  int log_every = 1;

  bool operator==(const TrainSettings&) const = default;
};

struct DetectorSettings {
  std::string kind = "stub";  // stub | http
  std::string endpoint;
  std::string auth_token;
  int retries = 2;
  int timeout_ms = 5000;
  double box_noise = 1.0;        // stub: uniform jitter of box edges in pixels
  double decoy_prob = 0.5;       // stub: chance a lateral query also returns the mirror box
  double confidence_noise = 0.1; // stub: uniform jitter on confidences

  bool operator==(const DetectorSettings&) const = default;
};

struct VLSettings {
  std::string kind = "prototype";  // prototype | http
  std::string endpoint;
  std::string auth_token;
  int timeout_ms = 5000;
  int pool_grid = 0;  // prototype encoder pooling grid; 0 = patch grid

  bool operator==(const VLSettings&) const = default;
};

struct ParserSettings {
  int epochs = 20;
  int batch_size = 8;
  double lr = 3e-3;
  int width = 16;

  bool operator==(const ParserSettings&) const = default;
};

struct PipelineConfig {
  double alpha0 = 1.2;
  double alpha1 = 0.2;
  double beta0 = 2.1;
  double beta1 = 0.1;
  double beta2 = 0.017;
  double lambda_reg = 0.05;
  double theta = 0.5;
  double mask_prob = 0.5;
  std::vector<double> conf_thresholds = {0.35, 0.25, 0.15};
  std::uint64_t seed = 0;
  int input_size = 448;
  int embed_dim = 384;
  int patch_count = 784;
  double dominance_threshold = 0.9;
  std::string precision = "float32";  // float32 | float64
  int workers = 1;

  ModelSettings model;
  TrainSettings train;
  DetectorSettings detector;
  VLSettings vl;
  ParserSettings parser;

  bool operator==(const PipelineConfig&) const = default;

  // Patches per side; patch_count must be a perfect square.
  int patch_grid() const;
  int patch_size() const { return input_size / patch_grid(); }
};

// One configurable key. path is dotted for nested groups ("train.lr").
struct ConfigKey {
  std::string path;
  std::function<std::string(const PipelineConfig&)> get;
  std::function<void(PipelineConfig&, const std::string&)> set;
  bool is_list = false;
};

const std::vector<ConfigKey>& config_keys();

// Throws ValidationError naming the first offending field.
void validate(const PipelineConfig& config);

// Parses YAML text. Absent keys keep their current value in base.
PipelineConfig parse_config(const std::string& yaml_text, PipelineConfig base = {});
// Defaults, then DISFACEREP_* environment overrides, then the file. Throws
// ConfigError (with line) or ValidationError.
PipelineConfig load_config(const std::string& path);
// Applies DISFACEREP_<KEY> variables, dots becoming underscores
// (DISFACEREP_TRAIN_LR).
void apply_env_overrides(PipelineConfig& config);
// Applies "key=value" overrides, e.g. from the command line.
void apply_override(PipelineConfig& config, const std::string& key, const std::string& value);

std::string serialize_config(const PipelineConfig& config);

}  // namespace disfacerep

#pragma once

#include <map>
#include <string>
#include <vector>

#include "disfacerep/autograd.hpp"
#include "disfacerep/config.hpp"
#include "disfacerep/image.hpp"
#include "disfacerep/rng.hpp"

namespace disfacerep::nn {

using ad::Graph;
using ad::Matrix;
using ad::Var;

// Named trainable tensors. Iteration order (std::map) is the serialization
// order of checkpoints.
template <typename T>
class ParamStore {
 public:
  void add(const std::string& name, Matrix<T> value);
  Matrix<T>& at(const std::string& name);
  const Matrix<T>& at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) > 0; }
  const std::map<std::string, Matrix<T>>& all() const { return params_; }
  std::map<std::string, Matrix<T>>& all() { return params_; }
  std::size_t num_scalars() const;

 private:
  std::map<std::string, Matrix<T>> params_;
};

// Parameters placed on a graph for one forward pass.
template <typename T>
class BoundParams {
 public:
  BoundParams(Graph<T>& graph, const ParamStore<T>& store, bool trainable);
  Var<T> operator[](const std::string& name) const;
  // Gradients after graph.backward(); parameters that received none are zero.
  std::map<std::string, Matrix<T>> gradients() const;

 private:
  std::map<std::string, Var<T>> vars_;
};

struct BackboneSpec {
  int image_size = 448;
  int channels = 3;
  int patch = 16;
  int embed_dim = 384;
  int num_classes = 0;
  int layers = 2;
  int mlp_ratio = 2;
  bool pos_embed = true;

  int grid() const { return image_size / patch; }
  int num_patches() const { return grid() * grid(); }
  bool operator==(const BackboneSpec&) const = default;
};

struct ClassifierSpec {
  BackboneSpec backbone;
  int vl_dim = 32;
  int projector_depth = 1;

  static ClassifierSpec from_config(const PipelineConfig& config, int num_classes);
  bool operator==(const ClassifierSpec&) const = default;
};

// Converts an image to an (H*W) x C matrix in the graph's precision.
template <typename T>
Matrix<T> image_matrix(const Image& image);

template <typename T>
struct BackboneOutput {
  Var<T> f_cls;  // K x d
  Var<T> f_pat;  // N x d
  // Class-token -> patch attention (K x N) of every block, forward values only.
  std::vector<Matrix<T>> class_to_patch;
};

// Adds the backbone parameters (prefix "backbone.") to store.
template <typename T>
void init_backbone(ParamStore<T>& store, const BackboneSpec& spec, Rng& rng, double init_std);

// Multi-class-token ViT: K learned class tokens are prepended to the patch
// embeddings and the sequence passes through pre-norm transformer blocks
// (single-head attention, GELU MLP) and a final layer norm.
template <typename T>
BackboneOutput<T> forward_backbone(Graph<T>& graph, const BoundParams<T>& params,
                                   const BackboneSpec& spec, Var<T> image);

// v_cls = F_cls * W for the single-layer projector; deeper projectors insert a
// GELU between square layers.
template <typename T>
Var<T> project_class(Var<T> f_cls, const std::vector<Var<T>>& layers);

// P = sigmoid(F_pat W + b)^T: a 1x1 convolution over the patch grid producing
// one channel per class, returned as K x N.
template <typename T>
Var<T> patch_attention(Var<T> f_pat, Var<T> weight, Var<T> bias);

// Value-level helpers used by tests and tools.
Matrix<double> project_class(const Matrix<double>& f_cls, const Matrix<double>& projection);
Matrix<double> patch_attention(const Matrix<double>& f_pat, const Matrix<double>& weight,
                               const Matrix<double>& bias);

template <typename T>
struct ClassifierForward {
  BackboneOutput<T> backbone;
  Var<T> v_cls;   // K x e
  Var<T> p;       // K x N
  Var<T> logits;  // K x 1, multi-label classification scores
  Var<T> patch_logits;  // K x 1, patch-head logits averaged over patches
};

// Backbone + projector + patch head + per-class linear classifier.
template <typename T>
class Classifier {
 public:
  Classifier(ClassifierSpec spec, std::uint64_t seed, double init_std = 0.02);
  Classifier(ClassifierSpec spec, ParamStore<T> params);

  ClassifierForward<T> forward(Graph<T>& graph, const BoundParams<T>& params, Var<T> image) const;

  const ClassifierSpec& spec() const { return spec_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

 private:
  ClassifierSpec spec_;
  ParamStore<T> params_;
};

}  // namespace disfacerep::nn

#include "disfacerep/encoders.hpp"

#include <cmath>

#include "disfacerep/error.hpp"

namespace disfacerep::nn {
namespace {

template <typename T>
Matrix<T> random_matrix(int rows, int cols, double std, Rng& rng) {
  Matrix<T> m(rows, cols);
  for (T& v : m.data) v = static_cast<T>(rng.normal() * std);
  return m;
}

std::string block_name(int l, const std::string& leaf) {
  return "backbone.block" + std::to_string(l) + "." + leaf;
}

}  // namespace

template <typename T>
void ParamStore<T>::add(const std::string& name, Matrix<T> value) {
  if (params_.count(name)) throw Error("duplicate parameter '" + name + "'");
  params_.emplace(name, std::move(value));
}

template <typename T>
Matrix<T>& ParamStore<T>::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw Error("unknown parameter '" + name + "'");
  return it->second;
}

template <typename T>
const Matrix<T>& ParamStore<T>::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw Error("unknown parameter '" + name + "'");
  return it->second;
}

template <typename T>
std::size_t ParamStore<T>::num_scalars() const {
  std::size_t n = 0;
  for (const auto& [_, m] : params_) n += m.size();
  return n;
}

template <typename T>
BoundParams<T>::BoundParams(Graph<T>& graph, const ParamStore<T>& store, bool trainable) {
  for (const auto& [name, value] : store.all()) {
    vars_.emplace(name, trainable ? graph.variable(value) : graph.constant(value));
  }
}

template <typename T>
Var<T> BoundParams<T>::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw Error("parameter '" + name + "' is not bound");
  return it->second;
}

template <typename T>
std::map<std::string, Matrix<T>> BoundParams<T>::gradients() const {
  std::map<std::string, Matrix<T>> out;
  for (const auto& [name, var] : vars_) {
    const Matrix<T>& g = var.grad();
    out.emplace(name, g.empty() ? Matrix<T>(var.rows(), var.cols()) : g);
  }
  return out;
}

ClassifierSpec ClassifierSpec::from_config(const PipelineConfig& config, int num_classes) {
  ClassifierSpec s;
  s.backbone.image_size = config.input_size;
  s.backbone.patch = config.patch_size();
  s.backbone.embed_dim = config.embed_dim;
  s.backbone.num_classes = num_classes;
  s.backbone.layers = config.model.layers;
  s.backbone.mlp_ratio = config.model.mlp_ratio;
  s.backbone.pos_embed = config.model.pos_embed;
  s.vl_dim = config.model.vl_dim;
  s.projector_depth = config.model.projector_depth;
  return s;
}

template <typename T>
Matrix<T> image_matrix(const Image& image) {
  Matrix<T> m(image.height * image.width, image.channels);
  for (std::size_t i = 0; i < image.data.size(); ++i) m.data[i] = static_cast<T>(image.data[i]);
  return m;
}

template <typename T>
void init_backbone(ParamStore<T>& store, const BackboneSpec& spec, Rng& rng, double init_std) {
  const int d = spec.embed_dim;
  const int in = spec.patch * spec.patch * spec.channels;
  const int hidden = d * spec.mlp_ratio;
  store.add("backbone.patch_embed.w", random_matrix<T>(in, d, init_std, rng));
  store.add("backbone.patch_embed.b", Matrix<T>(1, d));
  store.add("backbone.cls_tokens", random_matrix<T>(spec.num_classes, d, init_std, rng));
  if (spec.pos_embed) {
    store.add("backbone.pos_embed", random_matrix<T>(spec.num_patches(), d, init_std, rng));
  }
  for (int l = 0; l < spec.layers; ++l) {
    store.add(block_name(l, "ln1.g"), Matrix<T>(1, d, T(1)));
    store.add(block_name(l, "ln1.b"), Matrix<T>(1, d));
    for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) {
      store.add(block_name(l, w), random_matrix<T>(d, d, init_std, rng));
    }
    for (const char* b : {"attn.bq", "attn.bk", "attn.bv", "attn.bo"}) {
      store.add(block_name(l, b), Matrix<T>(1, d));
    }
    store.add(block_name(l, "ln2.g"), Matrix<T>(1, d, T(1)));
    store.add(block_name(l, "ln2.b"), Matrix<T>(1, d));
    store.add(block_name(l, "mlp.w1"), random_matrix<T>(d, hidden, init_std, rng));
    store.add(block_name(l, "mlp.b1"), Matrix<T>(1, hidden));
    store.add(block_name(l, "mlp.w2"), random_matrix<T>(hidden, d, init_std, rng));
    store.add(block_name(l, "mlp.b2"), Matrix<T>(1, d));
  }
  store.add("backbone.final_ln.g", Matrix<T>(1, d, T(1)));
  store.add("backbone.final_ln.b", Matrix<T>(1, d));
}

template <typename T>
BackboneOutput<T> forward_backbone(Graph<T>& /*graph*/, const BoundParams<T>& p, const BackboneSpec& spec,
                                   Var<T> image) {
  const int hw = spec.image_size * spec.image_size;
  if (image.rows() != hw || image.cols() != spec.channels) {
    throw ShapeError("backbone expects a " + std::to_string(spec.image_size) + "x" +
                     std::to_string(spec.image_size) + "x" + std::to_string(spec.channels) + " image");
  }
  const int k = spec.num_classes;
  const int n = spec.num_patches();
  const int d = spec.embed_dim;
  const int in = spec.patch * spec.patch * spec.channels;

  Var<T> patches = ad::gather(image, n, in,
                              ad::patchify_index(spec.image_size, spec.image_size, spec.channels, spec.patch));
  Var<T> emb = ad::add_row(ad::matmul(patches, p["backbone.patch_embed.w"]), p["backbone.patch_embed.b"]);
  if (spec.pos_embed) emb = ad::add(emb, p["backbone.pos_embed"]);
  const Var<T> parts[] = {p["backbone.cls_tokens"], emb};
  Var<T> h = ad::concat_rows<T>(parts);

  BackboneOutput<T> out;
  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(d));
  for (int l = 0; l < spec.layers; ++l) {
    auto w = [&](const char* leaf) { return p[block_name(l, leaf)]; };
    Var<T> a = ad::layer_norm_rows(h, w("ln1.g"), w("ln1.b"));
    Var<T> q = ad::add_row(ad::matmul(a, w("attn.wq")), w("attn.bq"));
    Var<T> kk = ad::add_row(ad::matmul(a, w("attn.wk")), w("attn.bk"));
    Var<T> v = ad::add_row(ad::matmul(a, w("attn.wv")), w("attn.bv"));
    Var<T> att = ad::softmax_rows(ad::scale(ad::matmul_nt(q, kk), inv_sqrt_d));
    const Matrix<T>& av = att.value();
    Matrix<T> c2p(k, n);
    for (int r = 0; r < k; ++r) {
      for (int c = 0; c < n; ++c) c2p(r, c) = av(r, k + c);
    }
    out.class_to_patch.push_back(std::move(c2p));
    Var<T> o = ad::add_row(ad::matmul(ad::matmul(att, v), w("attn.wo")), w("attn.bo"));
    h = ad::add(h, o);
    Var<T> m = ad::layer_norm_rows(h, w("ln2.g"), w("ln2.b"));
    m = ad::gelu(ad::add_row(ad::matmul(m, w("mlp.w1")), w("mlp.b1")));
    m = ad::add_row(ad::matmul(m, w("mlp.w2")), w("mlp.b2"));
    h = ad::add(h, m);
  }
  h = ad::layer_norm_rows(h, p["backbone.final_ln.g"], p["backbone.final_ln.b"]);
  out.f_cls = ad::slice_rows(h, 0, k);
  out.f_pat = ad::slice_rows(h, k, n);
  return out;
}

template <typename T>
Var<T> project_class(Var<T> f_cls, const std::vector<Var<T>>& layers) {
  if (layers.empty()) throw ShapeError("projector has no layers");
  Var<T> v = f_cls;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (v.cols() != layers[i].rows()) throw ShapeError("projector dimension mismatch");
    if (i > 0) v = ad::gelu(v);
    v = ad::matmul(v, layers[i]);
  }
  return v;
}

template <typename T>
Var<T> patch_attention(Var<T> f_pat, Var<T> weight, Var<T> bias) {
  if (f_pat.cols() != weight.rows() || bias.rows() != 1 || bias.cols() != weight.cols()) {
    throw ShapeError("patch head dimension mismatch");
  }
  Var<T> logits = ad::add_row(ad::matmul(f_pat, weight), bias);  // N x K
  return ad::transpose(ad::sigmoid(logits));
}

Matrix<double> project_class(const Matrix<double>& f_cls, const Matrix<double>& projection) {
  Graph<double> g;
  return project_class(g.constant(f_cls), {g.constant(projection)}).value();
}

Matrix<double> patch_attention(const Matrix<double>& f_pat, const Matrix<double>& weight,
                               const Matrix<double>& bias) {
  Graph<double> g;
  return patch_attention(g.constant(f_pat), g.constant(weight), g.constant(bias)).value();
}

template <typename T>
Classifier<T>::Classifier(ClassifierSpec spec, std::uint64_t seed, double init_std) : spec_(spec) {
  const auto& b = spec_.backbone;
  if (b.num_classes <= 0) throw ValidationError("num_classes", "must be positive");
  if (b.patch <= 0 || b.image_size % b.patch != 0) {
    throw ValidationError("patch_count", "patch size must divide the image size");
  }
  Rng rng = Rng(seed).substream("classifier-init");
  init_backbone(params_, b, rng, init_std);
  int in = b.embed_dim;
  for (int i = 0; i < spec_.projector_depth; ++i) {
    params_.add("projector." + std::to_string(i), random_matrix<T>(in, spec_.vl_dim, init_std, rng));
    in = spec_.vl_dim;
  }
  params_.add("patch_head.w", random_matrix<T>(b.embed_dim, b.num_classes, init_std, rng));
  params_.add("patch_head.b", Matrix<T>(1, b.num_classes));
  params_.add("classifier.w", random_matrix<T>(b.num_classes, b.embed_dim, init_std, rng));
  params_.add("classifier.b", Matrix<T>(b.num_classes, 1));
}

template <typename T>
Classifier<T>::Classifier(ClassifierSpec spec, ParamStore<T> params)
    : spec_(spec), params_(std::move(params)) {}

template <typename T>
ClassifierForward<T> Classifier<T>::forward(Graph<T>& graph, const BoundParams<T>& p, Var<T> image) const {
  ClassifierForward<T> out;
  out.backbone = forward_backbone(graph, p, spec_.backbone, image);
  std::vector<Var<T>> layers;
  for (int i = 0; i < spec_.projector_depth; ++i) layers.push_back(p["projector." + std::to_string(i)]);
  out.v_cls = project_class(out.backbone.f_cls, layers);
  Var<T> patch_logits = ad::add_row(ad::matmul(out.backbone.f_pat, p["patch_head.w"]), p["patch_head.b"]);
  out.p = ad::transpose(ad::sigmoid(patch_logits));
  out.patch_logits = ad::transpose(ad::mean_rows(patch_logits));
  Var<T> ones = graph.constant(Matrix<T>(spec_.backbone.embed_dim, 1, T(1)));
  out.logits = ad::add(ad::matmul(ad::mul(out.backbone.f_cls, p["classifier.w"]), ones), p["classifier.b"]);
  return out;
}

#define DFR_INSTANTIATE(T)                                                                          \
  template class ParamStore<T>;                                                                     \
  template class BoundParams<T>;                                                                    \
  template class Classifier<T>;                                                                     \
  template Matrix<T> image_matrix<T>(const Image&);                                                 \
  template void init_backbone<T>(ParamStore<T>&, const BackboneSpec&, Rng&, double);                \
  template BackboneOutput<T> forward_backbone<T>(Graph<T>&, const BoundParams<T>&, const BackboneSpec&, \
                                                 Var<T>);                                           \
  template Var<T> project_class<T>(Var<T>, const std::vector<Var<T>>&);                             \
  template Var<T> patch_attention<T>(Var<T>, Var<T>, Var<T>);

DFR_INSTANTIATE(float)
DFR_INSTANTIATE(double)

#undef DFR_INSTANTIATE

}  // namespace disfacerep::nn

#include "disfacerep/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "disfacerep/error.hpp"
#include "disfacerep/optim.hpp"
#include "disfacerep/parallel.hpp"
#include "disfacerep/rng.hpp"

namespace disfacerep {
namespace {

nlohmann::json spec_json(const nn::ClassifierSpec& s) {
  const auto& b = s.backbone;
  return {{"image_size", b.image_size}, {"channels", b.channels},       {"patch", b.patch},
          {"embed_dim", b.embed_dim},   {"num_classes", b.num_classes}, {"layers", b.layers},
          {"mlp_ratio", b.mlp_ratio},   {"pos_embed", b.pos_embed},     {"vl_dim", s.vl_dim},
          {"projector_depth", s.projector_depth}};
}

nn::ClassifierSpec spec_from_json(const nlohmann::json& j) {
  nn::ClassifierSpec s;
  s.backbone.image_size = j.at("image_size");
  s.backbone.channels = j.at("channels");
  s.backbone.patch = j.at("patch");
  s.backbone.embed_dim = j.at("embed_dim");
  s.backbone.num_classes = j.at("num_classes");
  s.backbone.layers = j.at("layers");
  s.backbone.mlp_ratio = j.at("mlp_ratio");
  s.backbone.pos_embed = j.at("pos_embed");
  s.vl_dim = j.at("vl_dim");
  s.projector_depth = j.at("projector_depth");
  return s;
}

Matrix<double> values_of(const ad::Var<float>& v) { return ad::cast<double>(v.value()); }
Matrix<double> values_of(const ad::Var<double>& v) { return v.value(); }

void accumulate(std::vector<double>& into, const std::vector<double>& add) {
  if (into.size() < add.size()) into.resize(add.size(), 0.0);
  for (std::size_t i = 0; i < add.size(); ++i) into[i] += add[i];
}

LossBreakdown mean_breakdown(const std::vector<LossBreakdown>& parts) {
  LossBreakdown m;
  for (const LossBreakdown& p : parts) {
    m.pos_cls += p.pos_cls;
    m.pos_ffc += p.pos_ffc;
    m.neg_cls += p.neg_cls;
    m.neg_ffc += p.neg_ffc;
    m.neg_bfc += p.neg_bfc;
    m.reg += p.reg;
    m.total += p.total;
    m.cls_bce += p.cls_bce;
    m.patch_bce += p.patch_bce;
    m.objective += p.objective;
    accumulate(m.pos_cls_k, p.pos_cls_k);
    accumulate(m.pos_ffc_k, p.pos_ffc_k);
    accumulate(m.neg_cls_k, p.neg_cls_k);
    accumulate(m.neg_ffc_k, p.neg_ffc_k);
    accumulate(m.neg_bfc_k, p.neg_bfc_k);
    accumulate(m.reg_k, p.reg_k);
    m.neg_prompt_count = std::max(m.neg_prompt_count, p.neg_prompt_count);
  }
  const double n = static_cast<double>(parts.size());
  for (double* v : {&m.pos_cls, &m.pos_ffc, &m.neg_cls, &m.neg_ffc, &m.neg_bfc, &m.reg, &m.total, &m.cls_bce,
                    &m.patch_bce, &m.objective}) {
    *v /= n;
  }
  for (auto* vec : {&m.pos_cls_k, &m.pos_ffc_k, &m.neg_cls_k, &m.neg_ffc_k, &m.neg_bfc_k, &m.reg_k}) {
    for (double& v : *vec) v /= n;
  }
  return m;
}

std::vector<int> epoch_order(int n, std::uint64_t seed, int epoch) {
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  Rng rng = Rng(seed).substream("batches").substream(static_cast<std::uint64_t>(epoch));
  for (int i = n - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_int(i + 1)]);
  return order;
}

template <typename T>
nn::Classifier<float> to_float(const nn::Classifier<T>& model) {
  if constexpr (std::is_same_v<T, float>) {
    return model;
  } else {
    nn::ParamStore<float> p;
    for (const auto& [name, m] : model.params().all()) p.add(name, ad::cast<float>(m));
    return nn::Classifier<float>(model.spec(), std::move(p));
  }
}

template <typename T>
TrainOutcome train_impl(const std::vector<LabeledFace>& faces, const ComponentSchema& schema,
                        const PipelineConfig& config, const VLEncoderPair& vl, const TrainIO& io) {
  const int k_count = schema.size();
  const nn::ClassifierSpec spec = nn::ClassifierSpec::from_config(config, k_count);
  nn::Classifier<T> model(spec, config.seed, config.model.init_std);
  AdamW<T> adam;
  adam.lr = config.train.lr;
  adam.weight_decay = config.train.weight_decay;
  adam.init_like(model.params());
  long step = 0;
  int start_epoch = 0;
  if (!io.resume_from.empty()) {
    Checkpoint ckpt = load_checkpoint(io.resume_from);
    if (spec_from_json(ckpt.meta.at("spec")) != spec) throw ValidationError("resume", "checkpoint model differs");
    for (auto& [name, p] : model.params().all()) {
      auto load = [&](const std::string& key, Matrix<T>& into) {
        auto it = ckpt.tensors.find(key);
        if (it == ckpt.tensors.end()) throw DataError("checkpoint lacks tensor " + key);
        into = ad::cast<T>(it->second);
      };
      load("param/" + name, p);
      load("adam_m/" + name, adam.m.at(name));
      load("adam_v/" + name, adam.v.at(name));
    }
    step = ckpt.meta.at("step").get<long>();
    start_epoch = ckpt.meta.at("epoch").get<int>();
  }

  const Matrix<double> v_txt = encode_prompts(schema, *vl.text);
  std::ofstream log;
  if (!io.log_path.empty()) {
    log.open(io.log_path, io.resume_from.empty() ? std::ios::trunc : std::ios::app);
    if (!log) throw DataError("cannot open loss log '" + io.log_path + "'");
  }
  TrainOutcome out{to_float(model), {}};
  const int n = static_cast<int>(faces.size());
  const int batch = std::max(1, config.train.batch_size);
  const long total_steps = static_cast<long>(config.train.epochs) * ((n + batch - 1) / batch);
  for (int epoch = start_epoch; epoch < config.train.epochs; ++epoch) {
    const std::vector<int> order = epoch_order(n, config.seed, epoch);
    for (int begin = 0; begin < n; begin += batch) {
      const int bs = std::min(batch, n - begin);
      std::vector<SampleLoss<T>> results(bs);
      parallel_for(bs, config.workers, [&](int i) {
        results[i] = sample_loss(model, model.params(), faces[order[begin + i]], v_txt, *vl.image, config, true);
      });
      std::map<std::string, Matrix<double>> grads;
      std::vector<LossBreakdown> parts;
      for (const SampleLoss<T>& r : results) {
        for (const auto& [name, g] : r.gradients) {
          auto [it, fresh] = grads.try_emplace(name, g.rows, g.cols);
          for (std::size_t i = 0; i < g.size(); ++i) it->second.data[i] += g.data[i];
        }
        parts.push_back(r.breakdown);
      }
      double norm2 = 0;
      for (auto& [_, g] : grads) {
        for (double& x : g.data) {
          x /= bs;
          norm2 += x * x;
        }
      }
      if (config.train.grad_clip > 0 && std::sqrt(norm2) > config.train.grad_clip) {
        const double f = config.train.grad_clip / std::sqrt(norm2);
        for (auto& [_, g] : grads) {
          for (double& x : g.data) x *= f;
        }
      }
      if (config.train.schedule == "cosine") {
        adam.lr = 0.5 * config.train.lr * (1.0 + std::cos(M_PI * static_cast<double>(step) / total_steps));
      }
      ++step;
      adam.step(model.params(), grads, step);
      StepRecord rec{step, epoch, mean_breakdown(parts)};
      if (log && (step % std::max(1, config.train.log_every) == 0)) log << step_record_json(rec) << '\n';
      if (io.on_step) io.on_step(rec);
      out.steps.push_back(std::move(rec));
    }
    if (!io.checkpoint_path.empty()) {
      Checkpoint ckpt;
      ckpt.dtype = std::is_same_v<T, float> ? "float32" : "float64";
      ckpt.meta = {{"kind", "training"}, {"step", step}, {"epoch", epoch + 1}, {"spec", spec_json(spec)},
                   {"components", schema.names()}};
      put_tensors(ckpt, "param/", model.params().all());
      put_tensors(ckpt, "adam_m/", adam.m.all());
      put_tensors(ckpt, "adam_v/", adam.v.all());
      save_checkpoint(io.checkpoint_path, ckpt);
    }
  }
  out.model = to_float(model);
  return out;
}

}  // namespace

std::string step_record_json(const StepRecord& r) {
  const LossBreakdown& l = r.loss;
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["epoch"] = r.epoch;
  j["pos_cls"] = l.pos_cls;
  j["pos_ffc"] = l.pos_ffc;
  j["neg_cls"] = l.neg_cls;
  j["neg_ffc"] = l.neg_ffc;
  j["neg_bfc"] = l.neg_bfc;
  j["reg"] = l.reg;
  j["total"] = l.total;
  j["per_class"] = {{"pos_cls", l.pos_cls_k}, {"pos_ffc", l.pos_ffc_k}, {"neg_cls", l.neg_cls_k},
                    {"neg_ffc", l.neg_ffc_k}, {"neg_bfc", l.neg_bfc_k}, {"reg", l.reg_k}};
  j["neg_prompt_count"] = l.neg_prompt_count;
  j["cls_bce"] = l.cls_bce;
  j["patch_bce"] = l.patch_bce;
  j["objective"] = l.objective;
  return j.dump();
}

template <typename T>
SampleLoss<T> sample_loss(const nn::Classifier<T>& model, const nn::ParamStore<T>& params, const LabeledFace& face,
                          const Matrix<double>& v_txt, const ImageEncoder& image_encoder, const PipelineConfig& config,
                          bool want_grad) {
  const LossWeights w = LossWeights::from_config(config);
  const NegativeSet negatives = parse_negative_set(config.train.negatives);
  const int h = face.pixels.height, wd = face.pixels.width;
  ad::Graph<T> graph;
  nn::BoundParams<T> bound(graph, params, want_grad);
  ad::Var<T> image = graph.constant(nn::image_matrix<T>(face.pixels));
  auto fwd = model.forward(graph, bound, image);
  ComponentVectors<T> comp;
  if (image_encoder.differentiable()) {
    comp = encode_components(graph, image, h, wd, fwd.p, image_encoder);
  } else if (w.alpha1 > 0 || w.beta1 > 0 || w.beta2 > 0) {
    throw ValidationError("vl.kind", "pos_ffc, neg_ffc and neg_bfc need a differentiable image encoder");
  }
  ad::Var<T> txt = graph.constant(ad::cast<T>(v_txt));
  LossTerms<T> terms = tcd_loss(graph, fwd.v_cls, comp.v_ffc, comp.v_bfc, txt, fwd.p, face.label, w, negatives);
  Matrix<T> targets(static_cast<int>(face.label.size()), 1);
  for (std::size_t k = 0; k < face.label.size(); ++k) targets.data[k] = face.label[k] ? T(1) : T(0);
  ad::Var<T> bce = ad::scale(ad::bce_with_logits_sum(fwd.logits, targets), T(1) / static_cast<T>(targets.rows));
  ad::Var<T> patch_bce =
      ad::scale(ad::bce_with_logits_sum(fwd.patch_logits, targets), T(1) / static_cast<T>(targets.rows));
  ad::Var<T> objective = ad::add(terms.total, ad::scale(bce, static_cast<T>(config.train.cls_weight)));
  objective = ad::add(objective, ad::scale(patch_bce, static_cast<T>(config.train.patch_cls_weight)));

  SampleLoss<T> out;
  RepresentationBundle b;
  b.v_cls = values_of(fwd.v_cls);
  b.p = values_of(fwd.p);
  b.v_txt = v_txt;
  b.v_ffc = comp.v_ffc.valid() ? values_of(comp.v_ffc) : Matrix<double>(b.v_txt.rows, b.v_txt.cols);
  b.v_bfc = comp.v_bfc.valid() ? values_of(comp.v_bfc) : Matrix<double>(b.v_txt.rows, b.v_txt.cols);
  out.breakdown = total_loss(b, face.label, w, negatives);
  if (!comp.v_ffc.valid()) {
    out.breakdown.pos_ffc = out.breakdown.neg_ffc = out.breakdown.neg_bfc = 0;
    for (auto* v : {&out.breakdown.pos_ffc_k, &out.breakdown.neg_ffc_k, &out.breakdown.neg_bfc_k}) {
      std::fill(v->begin(), v->end(), 0.0);
    }
    out.breakdown.total = w.alpha0 * out.breakdown.pos_cls + w.beta0 * out.breakdown.neg_cls +
                          w.lambda_reg * out.breakdown.reg;
  }
  out.breakdown.cls_bce = static_cast<double>(bce.item());
  out.breakdown.patch_bce = static_cast<double>(patch_bce.item());
  out.breakdown.objective = out.breakdown.total + config.train.cls_weight * out.breakdown.cls_bce +
                            config.train.patch_cls_weight * out.breakdown.patch_bce;
  if (want_grad) {
    graph.backward(objective);
    for (auto& [name, g] : bound.gradients()) out.gradients.emplace(name, g);
  }
  return out;
}

template SampleLoss<float> sample_loss<float>(const nn::Classifier<float>&, const nn::ParamStore<float>&,
                                              const LabeledFace&, const Matrix<double>&, const ImageEncoder&,
                                              const PipelineConfig&, bool);
template SampleLoss<double> sample_loss<double>(const nn::Classifier<double>&, const nn::ParamStore<double>&,
                                                const LabeledFace&, const Matrix<double>&, const ImageEncoder&,
                                                const PipelineConfig&, bool);

TrainOutcome train_classifier(const std::vector<LabeledFace>& faces, const ComponentSchema& schema,
                              const PipelineConfig& config, const VLEncoderPair& vl, const TrainIO& io) {
  if (faces.empty()) throw DataError("training set is empty");
  validate(config);
  for (const LabeledFace& f : faces) {
    if (f.pixels.height != config.input_size || f.pixels.width != config.input_size) {
      throw ShapeError("sample " + f.id + " is not " + std::to_string(config.input_size) + " pixels square");
    }
    if (static_cast<int>(f.label.size()) != schema.size()) throw ShapeError("sample " + f.id + ": label length");
  }
  if (config.precision == "float64") return train_impl<double>(faces, schema, config, vl, io);
  return train_impl<float>(faces, schema, config, vl, io);
}

Checkpoint model_checkpoint(const nn::Classifier<float>& model, const ComponentSchema& schema,
                            const PipelineConfig& config) {
  Checkpoint ckpt;
  ckpt.meta = {{"kind", "classifier"},
               {"spec", spec_json(model.spec())},
               {"components", schema.names()},
               {"schema", schema.label()},
               {"seed", config.seed}};
  put_tensors(ckpt, "", model.params().all());
  return ckpt;
}

void save_model(const std::string& path, const nn::Classifier<float>& model, const ComponentSchema& schema,
                const PipelineConfig& config) {
  save_checkpoint(path, model_checkpoint(model, schema, config));
}

nn::Classifier<float> load_model(const std::string& path, std::vector<std::string>* component_names) {
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.meta.value("kind", "") != "classifier") throw DataError("'" + path + "' is not a classifier model");
  nn::ParamStore<float> params;
  for (auto& [name, m] : take_tensors<float>(ckpt, "")) params.add(name, std::move(m));
  if (component_names) *component_names = ckpt.meta.at("components").get<std::vector<std::string>>();
  return nn::Classifier<float>(spec_from_json(ckpt.meta.at("spec")), std::move(params));
}

}  // namespace disfacerep

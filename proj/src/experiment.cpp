#include "disfacerep/experiment.hpp"

#include <chrono>
#include <map>

#include "disfacerep/ccd.hpp"
#include "disfacerep/cooccur.hpp"
#include "disfacerep/fcam.hpp"
#include "disfacerep/parallel.hpp"
#include "disfacerep/trainer.hpp"
#include "disfacerep/vl.hpp"

namespace disfacerep {
namespace {

PipelineConfig with_weights(PipelineConfig c, const PipelineConfig& full, bool pos_ffc, bool neg_cls, bool neg_ffc,
                            bool neg_bfc, bool reg) {
  c.alpha0 = full.alpha0;
  c.alpha1 = pos_ffc ? full.alpha1 : 0.0;
  c.beta0 = neg_cls ? full.beta0 : 0.0;
  c.beta1 = neg_ffc ? full.beta1 : 0.0;
  c.beta2 = neg_bfc ? full.beta2 : 0.0;
  c.lambda_reg = reg ? full.lambda_reg : 0.0;
  return c;
}

std::string variant_key(const Variant& v) { return (v.ccd ? "ccd\n" : "plain\n") + serialize_config(v.config); }

}  // namespace

std::vector<Variant> component_ablation(const PipelineConfig& base) {
  return {{"Base", false, with_weights(base, base, false, false, false, false, false)},
          {"Base+CCD", true, with_weights(base, base, false, false, false, false, false)},
          {"Base+CCD+TCD", true, base}};
}

std::vector<Variant> loss_ablation(const PipelineConfig& base) {
  return {{"pos_cls", true, with_weights(base, base, false, false, false, false, false)},
          {"+pos_ffc", true, with_weights(base, base, true, false, false, false, false)},
          {"+neg_cls", true, with_weights(base, base, true, true, false, false, false)},
          {"+neg_ffc", true, with_weights(base, base, true, true, true, false, false)},
          {"+neg_bfc", true, with_weights(base, base, true, true, true, true, false)},
          {"+reg", true, base}};
}

F1Report run_variant(const Variant& variant, const std::vector<Sample>& corpus, const SyntheticFaceSpec& face_spec) {
  const PipelineConfig& cfg = variant.config;
  const ComponentSchema& schema = face_spec.schema;
  std::vector<LabeledFace> faces;
  for (const Sample& s : corpus) faces.push_back(s.face);
  std::vector<LabeledFace> train = faces;
  if (variant.ccd) {
    std::vector<Label> labels;
    for (const LabeledFace& f : faces) labels.push_back(f.label);
    const CooccurrenceReport report = compute_cooccurrence(labels);
    const std::vector<int> candidates = select_dominant(report, schema, cfg.dominance_threshold);
    auto client = make_detection_client(cfg, schema, corpus);
    train = build_debiased_set(faces, candidates, schema, cfg, *client, Rng(cfg.seed).substream("ccd")).faces;
  }
  const VLEncoderPair vl = make_vl_pair(cfg, schema, face_spec);
  const TrainOutcome trained = train_classifier(train, schema, cfg, vl);
  const FcamFusion fusion = parse_fusion(cfg.model.fcam_fusion);
  std::vector<SegMask> preds(corpus.size()), gts;
  parallel_for(static_cast<int>(corpus.size()), cfg.workers, [&](int i) {
    preds[i] = pseudo_mask(extract_fcam(corpus[i].face.pixels, corpus[i].face.label, trained.model, fusion), cfg.theta);
  });
  for (const Sample& s : corpus) gts.push_back(s.mask);
  return f1_report(preds, gts, schema);
}

AblationResult run_ablation(const std::vector<Variant>& variants, const SyntheticFaceSpec& face_spec, int n_images,
                            const std::vector<std::uint64_t>& seeds, const ProgressFn& progress) {
  const auto start = std::chrono::steady_clock::now();
  AblationResult out;
  out.seeds = seeds;
  out.f1.assign(variants.size(), {});
  out.mean.assign(variants.size(), 0.0);
  out.reports.resize(variants.size());
  for (const Variant& v : variants) out.names.push_back(v.name);
  for (std::uint64_t seed : seeds) {
    const std::vector<Sample> corpus = generate_synthetic(face_spec, n_images, Rng(seed).substream("corpus"));
    std::map<std::string, F1Report> cache;
    for (std::size_t i = 0; i < variants.size(); ++i) {
      Variant v = variants[i];
      v.config.seed = seed;
      const auto t0 = std::chrono::steady_clock::now();
      const std::string key = variant_key(v);
      auto it = cache.find(key);
      if (it == cache.end()) it = cache.emplace(key, run_variant(v, corpus, face_spec)).first;
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      out.f1[i].push_back(it->second.mean_f1);
      out.reports[i] = it->second;
      if (progress) progress(v.name, seed, it->second.mean_f1, secs);
    }
  }
  for (std::size_t i = 0; i < variants.size(); ++i) {
    double s = 0;
    for (double f : out.f1[i]) s += f;
    out.mean[i] = s / static_cast<double>(seeds.size());
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

}  // namespace disfacerep

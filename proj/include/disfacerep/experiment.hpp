#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "disfacerep/config.hpp"
#include "disfacerep/eval.hpp"
#include "disfacerep/synthetic.hpp"

namespace disfacerep {

// One configuration of the end-to-end synthetic experiment.
struct Variant {
  std::string name;
  bool ccd = false;
  PipelineConfig config;
};

// Base (pos_cls only, no masking), Base+CCD, Base+CCD+TCD (all six terms).
std::vector<Variant> component_ablation(const PipelineConfig& base);
// Loss terms added one at a time on top of CCD: pos_cls, +pos_ffc, +neg_cls,
// +neg_ffc, +neg_bfc, +reg.
std::vector<Variant> loss_ablation(const PipelineConfig& base);

struct AblationResult {
  std::vector<std::string> names;
  std::vector<std::uint64_t> seeds;
  std::vector<std::vector<double>> f1;  // [variant][seed], mean F1 in [0, 1]
  std::vector<double> mean;             // seed average per variant
  std::vector<F1Report> reports;        // last seed's report per variant
  double seconds = 0;
};

using ProgressFn = std::function<void(const std::string& variant, std::uint64_t seed, double f1, double seconds)>;

// For every seed: generate n faces, optionally build the debiased set, train
// the classifier, write pseudo masks from FCAMs with the ground-truth labels,
// and score them against the ground truth. Runs sharing identical settings
// are computed once.
AblationResult run_ablation(const std::vector<Variant>& variants, const SyntheticFaceSpec& face_spec, int n_images,
                            const std::vector<std::uint64_t>& seeds, const ProgressFn& progress = {});

// Single run of the pipeline on a given corpus; returns the pseudo-mask report.
F1Report run_variant(const Variant& variant, const std::vector<Sample>& corpus, const SyntheticFaceSpec& face_spec);

}  // namespace disfacerep

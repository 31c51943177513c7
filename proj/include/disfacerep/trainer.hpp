#pragma once

#include <functional>
#include <string>
#include <vector>

#include "disfacerep/checkpoint.hpp"
#include "disfacerep/config.hpp"
#include "disfacerep/encoders.hpp"
#include "disfacerep/image.hpp"
#include "disfacerep/schema.hpp"
#include "disfacerep/tcd_loss.hpp"
#include "disfacerep/vl.hpp"

namespace disfacerep {

struct StepRecord {
  long step = 0;  // 1-based
  int epoch = 0;  // 0-based
  LossBreakdown loss;  // batch mean
};

// One JSON object per line with the LossBreakdown fields.
std::string step_record_json(const StepRecord& record);

struct TrainIO {
  std::string log_path;         // JSONL step log; appended to when resuming
  std::string checkpoint_path;  // rewritten at the end of every epoch
  std::string resume_from;      // checkpoint to continue from
  std::function<void(const StepRecord&)> on_step;
};

struct TrainOutcome {
  nn::Classifier<float> model;
  std::vector<StepRecord> steps;
};

// Per-sample loss and representation values in the given precision.
template <typename T>
struct SampleLoss {
  LossBreakdown breakdown;
  std::map<std::string, Matrix<T>> gradients;
};

// Evaluates the training objective on one face: the weighted alignment terms
// plus the mean multi-label logistic loss on the class-token logits (times
// cls_weight) and on the patch-averaged patch-head logits (times
// patch_cls_weight). Gradients are filled when want_grad is set.
template <typename T>
SampleLoss<T> sample_loss(const nn::Classifier<T>& model, const nn::ParamStore<T>& params, const LabeledFace& face,
                          const Matrix<double>& v_txt, const ImageEncoder& image_encoder, const PipelineConfig& config,
                          bool want_grad);

// Trains the classifier with AdamW on `faces` (already debiased when CCD is
// used). Batch order for epoch e comes from a substream of the seed, so a
// resumed run replays exactly the steps of an uninterrupted one.
TrainOutcome train_classifier(const std::vector<LabeledFace>& faces, const ComponentSchema& schema,
                              const PipelineConfig& config, const VLEncoderPair& vl, const TrainIO& io = {});

Checkpoint model_checkpoint(const nn::Classifier<float>& model, const ComponentSchema& schema,
                            const PipelineConfig& config);
void save_model(const std::string& path, const nn::Classifier<float>& model, const ComponentSchema& schema,
                const PipelineConfig& config);
nn::Classifier<float> load_model(const std::string& path, std::vector<std::string>* component_names = nullptr);

}  // namespace disfacerep

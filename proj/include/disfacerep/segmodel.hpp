#pragma once

#include <string>
#include <vector>

#include "disfacerep/autograd.hpp"
#include "disfacerep/checkpoint.hpp"
#include "disfacerep/config.hpp"
#include "disfacerep/encoders.hpp"
#include "disfacerep/image.hpp"

namespace disfacerep {

struct SegModelSpec {
  int image_size = 64;
  int channels = 3;
  int width = 16;
  int num_classes = 0;  // components + background
  bool operator==(const SegModelSpec&) const = default;
};

// Small fully convolutional parser: three 3x3 conv + ReLU stages at full,
// half and quarter resolution (2x2 mean pooling between them), each with a
// 1x1 class head; the coarse heads are upsampled by nearest neighbour and
// summed into per-pixel logits.
class SegModel {
 public:
  SegModel(SegModelSpec spec, std::uint64_t seed);
  SegModel(SegModelSpec spec, nn::ParamStore<float> params);

  // (H*W) x num_classes logits.
  ad::Var<float> forward(ad::Graph<float>& graph, const nn::BoundParams<float>& params, ad::Var<float> image) const;
  SegMask predict(const Image& image) const;

  const SegModelSpec& spec() const { return spec_; }
  nn::ParamStore<float>& params() { return params_; }
  const nn::ParamStore<float>& params() const { return params_; }

 private:
  SegModelSpec spec_;
  nn::ParamStore<float> params_;
};

struct ParserSample {
  Image image;
  SegMask target;
};

struct ParserOutcome {
  SegModel model;
  std::vector<double> losses;  // mean cross-entropy per step
};

// Pixel-wise cross-entropy training with AdamW; batch order is seeded.
ParserOutcome train_parser(const std::vector<ParserSample>& samples, int num_classes, const PipelineConfig& config);

void save_parser(const std::string& path, const SegModel& model);
SegModel load_parser(const std::string& path);

}  // namespace disfacerep

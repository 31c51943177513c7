#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "disfacerep/schema.hpp"

namespace disfacerep {

// Row-major H x W x C float image with values in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> data;

  Image() = default;
  Image(int h, int w, int c, float fill = 0.0f)
      : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * width + x) * channels + c;
  }
  float& at(int y, int x, int c) { return data[index(y, x, c)]; }
  float at(int y, int x, int c) const { return data[index(y, x, c)]; }
  bool operator==(const Image&) const = default;
};

// Multi-hot image-level label; entry k is 1 when component k is present.
using Label = std::vector<std::uint8_t>;

// Dense label map. Values lie in [0, K], K being the background.
struct SegMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> labels;

  SegMask() = default;
  SegMask(int h, int w, std::uint8_t fill)
      : height(h), width(w), labels(static_cast<std::size_t>(h) * w, fill) {}

  std::uint8_t& at(int y, int x) { return labels[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }
  bool operator==(const SegMask&) const = default;
};

struct LabeledFace {
  std::string id;
  Image pixels;
  Label label;
};

// A face with its dense ground truth.
struct Sample {
  LabeledFace face;
  SegMask mask;
};

// Pixel count per class, background included as the last entry.
std::vector<std::size_t> class_histogram(const SegMask& mask, int num_components);

// y_k = 1 iff component k covers at least one pixel.
Label label_from_mask(const SegMask& mask, int num_components);

// Throws ValidationError when a value exceeds the background index.
void validate_mask(const SegMask& mask, const ComponentSchema& schema);

int count_present(const Label& label);

}  // namespace disfacerep

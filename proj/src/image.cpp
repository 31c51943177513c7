#include "disfacerep/image.hpp"

#include "disfacerep/error.hpp"

namespace disfacerep {

std::vector<std::size_t> class_histogram(const SegMask& mask, int num_components) {
  std::vector<std::size_t> counts(num_components + 1, 0);
  for (auto v : mask.labels) {
    if (v <= num_components) ++counts[v];
  }
  return counts;
}

Label label_from_mask(const SegMask& mask, int num_components) {
  Label y(num_components, 0);
  for (auto v : mask.labels) {
    if (v < num_components) y[v] = 1;
  }
  return y;
}

void validate_mask(const SegMask& mask, const ComponentSchema& schema) {
  if (mask.labels.size() != static_cast<std::size_t>(mask.height) * mask.width) {
    throw ShapeError("mask storage does not match its declared size");
  }
  for (auto v : mask.labels) {
    if (v > schema.background_id()) {
      throw ValidationError("mask", "label value " + std::to_string(v) + " exceeds background id " +
                                        std::to_string(schema.background_id()));
    }
  }
}

int count_present(const Label& label) {
  int n = 0;
  for (auto v : label) n += v ? 1 : 0;
  return n;
}

}  // namespace disfacerep

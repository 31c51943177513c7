#pragma once

#include <string>
#include <vector>

#include "disfacerep/config.hpp"
#include "disfacerep/detection_client.hpp"
#include "disfacerep/image.hpp"
#include "disfacerep/rng.hpp"
#include "disfacerep/schema.hpp"

namespace disfacerep {

struct Detection {
  int component = -1;  // schema index
  Box box;
  double confidence = 0;
  bool operator==(const Detection&) const = default;
};

struct MaskPlan {
  std::vector<Detection> accepted;    // at most one per component
  std::vector<int> masked_components;  // ascending
};

// Queries the client for the given components and maps returned phrases back
// to schema indices. Unknown phrases are dropped with a warning; boxes are
// clipped to the image.
std::vector<Detection> detect(const LabeledFace& face, const std::vector<int>& components,
                              const DetectionClient& client, const ComponentSchema& schema);

// Multi-threshold geometric filter. Per component, thresholds are walked from
// high to low; at each, candidates with confidence >= threshold are tried in
// descending confidence and the first satisfying the laterality condition
// wins: right components need box center < W/2, left ones > W/2, central ones
// always pass. Output is ordered by component index.
std::vector<Detection> filter_boxes(const std::vector<Detection>& dets, int image_width,
                                    const std::vector<double>& conf_thresholds, const ComponentSchema& schema);

bool box_covers(const Box& box, int row, int col);
// Pixel count of the union of the plan's boxes on an h x w image.
std::size_t plan_area(const MaskPlan& plan, int height, int width);
// Pairs of accepted boxes (component indices) whose pixel sets intersect.
std::vector<std::pair<int, int>> overlapping_boxes(const MaskPlan& plan, int height, int width);

// Zeros every channel of every pixel covered by an accepted box and clears the
// label of each masked component.
LabeledFace apply_mask(const LabeledFace& face, const MaskPlan& plan);

struct CcdRecord {
  std::string id;
  MaskPlan plan;
  std::vector<int> selected;
  std::string error;  // non-empty when the client failed for this image
};

struct DebiasedSet {
  std::vector<LabeledFace> faces;
  std::vector<CcdRecord> records;
  int client_errors = 0;
};

// Per image (substream keyed by the sample id), each candidate component that
// is present is selected with probability mask_prob; selected components are
// detected, filtered and masked. Client failures keep the image unmasked and
// are recorded.
DebiasedSet build_debiased_set(const std::vector<LabeledFace>& faces, const std::vector<int>& candidates,
                               const ComponentSchema& schema, const PipelineConfig& config,
                               const DetectionClient& client, const Rng& rng);

}  // namespace disfacerep

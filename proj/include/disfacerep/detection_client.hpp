#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "disfacerep/config.hpp"
#include "disfacerep/image.hpp"
#include "disfacerep/schema.hpp"

namespace disfacerep {

// Box [h1, w1, h2, w2] in pixels; rows h1..h2, columns w1..w2. A pixel (i, j)
// is covered when its center lies inside: h1 <= i + 0.5 < h2.
struct Box {
  double h1 = 0, w1 = 0, h2 = 0, w2 = 0;
  bool operator==(const Box&) const = default;
};

// One candidate as returned by a detector, before name normalization.
struct RawDetection {
  std::string phrase;
  Box box;
  double confidence = 0;
};

// Open-set detector queried with component phrases. Implementations must be
// safe to call concurrently.
class DetectionClient {
 public:
  virtual ~DetectionClient() = default;
  virtual std::vector<RawDetection> query(const LabeledFace& face, const std::vector<std::string>& phrases) const = 0;
};

// Boxes from ground-truth bounding boxes. Each edge is jittered by an integer
// in [-box_noise, box_noise], confidences are 0.5 plus uniform noise, and a
// query for a lateral component may also return its mirror counterpart's box
// (a decoy the geometric filter must reject).
class StubDetectionClient : public DetectionClient {
 public:
  StubDetectionClient(ComponentSchema schema, DetectorSettings settings, std::uint64_t seed);
  void add_mask(const std::string& id, SegMask mask);
  std::vector<RawDetection> query(const LabeledFace& face, const std::vector<std::string>& phrases) const override;

 private:
  ComponentSchema schema_;
  DetectorSettings settings_;
  std::uint64_t seed_;
  std::map<std::string, SegMask> masks_;
};

// POST {endpoint}/detect {"phrases": [...], "image": base64 PNG}
//   -> {"detections": [{"phrase": s, "box": [h1, w1, h2, w2], "confidence": c}]}
// Transport failures and 5xx responses are retried `retries` times.
class HttpDetectionClient : public DetectionClient {
 public:
  explicit HttpDetectionClient(DetectorSettings settings);
  std::vector<RawDetection> query(const LabeledFace& face, const std::vector<std::string>& phrases) const override;

 private:
  DetectorSettings settings_;
};

// Ground-truth bounding box of class k, or nothing when absent.
bool mask_bbox(const SegMask& mask, int k, Box& out);

std::unique_ptr<DetectionClient> make_detection_client(const PipelineConfig& config, const ComponentSchema& schema,
                                                       const std::vector<Sample>& samples);

}  // namespace disfacerep

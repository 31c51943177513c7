#include "disfacerep/ccd.hpp"

#include <algorithm>
#include <cmath>

#include <spdlog/spdlog.h>

#include "disfacerep/error.hpp"
#include "disfacerep/parallel.hpp"

namespace disfacerep {

std::vector<Detection> detect(const LabeledFace& face, const std::vector<int>& components,
                              const DetectionClient& client, const ComponentSchema& schema) {
  if (components.empty()) throw ValidationError("components", "must not be empty");
  std::vector<std::string> phrases;
  for (int k : components) phrases.push_back(schema.phrase(k));
  std::vector<Detection> out;
  const double h = face.pixels.height, w = face.pixels.width;
  for (const RawDetection& raw : client.query(face, phrases)) {
    auto k = schema.resolve_phrase(raw.phrase);
    if (!k) {
      spdlog::warn("{}: dropping detection with unknown phrase '{}'", face.id, raw.phrase);
      continue;
    }
    Box b = raw.box;
    b.h1 = std::clamp(b.h1, 0.0, h);
    b.h2 = std::clamp(b.h2, b.h1, h);
    b.w1 = std::clamp(b.w1, 0.0, w);
    b.w2 = std::clamp(b.w2, b.w1, w);
    out.push_back({*k, b, raw.confidence});
  }
  return out;
}

std::vector<Detection> filter_boxes(const std::vector<Detection>& dets, int image_width,
                                    const std::vector<double>& conf_thresholds, const ComponentSchema& schema) {
  if (image_width <= 0) throw ValidationError("image_width", "must be positive");
  const double half = image_width / 2.0;
  std::vector<Detection> out;
  for (int k = 0; k < schema.size(); ++k) {
    std::vector<Detection> mine;
    for (const Detection& d : dets) {
      if (d.component == k) mine.push_back(d);
    }
    if (mine.empty()) continue;
    std::stable_sort(mine.begin(), mine.end(),
                     [](const Detection& a, const Detection& b) { return a.confidence > b.confidence; });
    auto geometry_ok = [&](const Detection& d) {
      const double center = (d.box.w1 + d.box.w2) / 2.0;
      switch (schema.laterality(k)) {
        case Laterality::kRight: return center < half;
        case Laterality::kLeft: return center > half;
        case Laterality::kCentral: return true;
      }
      return false;
    };
    bool done = false;
    for (double t : conf_thresholds) {
      for (const Detection& d : mine) {
        if (d.confidence < t) break;
        if (geometry_ok(d)) {
          out.push_back(d);
          done = true;
          break;
        }
      }
      if (done) break;
    }
  }
  return out;
}

bool box_covers(const Box& box, int row, int col) {
  const double r = row + 0.5, c = col + 0.5;
  return box.h1 <= r && r < box.h2 && box.w1 <= c && c < box.w2;
}

namespace {

// Row/column index range [lo, hi) covered by a box edge pair.
std::pair<int, int> covered_range(double a, double b, int limit) {
  int lo = static_cast<int>(std::ceil(a - 0.5));
  int hi = static_cast<int>(std::ceil(b - 0.5));
  return {std::clamp(lo, 0, limit), std::clamp(hi, 0, limit)};
}

std::vector<std::uint8_t> coverage(const Box& b, int height, int width) {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(height) * width, 0);
  auto [r0, r1] = covered_range(b.h1, b.h2, height);
  auto [c0, c1] = covered_range(b.w1, b.w2, width);
  for (int r = r0; r < r1; ++r) {
    for (int c = c0; c < c1; ++c) m[static_cast<std::size_t>(r) * width + c] = 1;
  }
  return m;
}

}  // namespace

std::size_t plan_area(const MaskPlan& plan, int height, int width) {
  std::vector<std::uint8_t> u(static_cast<std::size_t>(height) * width, 0);
  for (const Detection& d : plan.accepted) {
    auto m = coverage(d.box, height, width);
    for (std::size_t i = 0; i < u.size(); ++i) u[i] |= m[i];
  }
  return static_cast<std::size_t>(std::count(u.begin(), u.end(), 1));
}

std::vector<std::pair<int, int>> overlapping_boxes(const MaskPlan& plan, int height, int width) {
  std::vector<std::pair<int, int>> out;
  for (std::size_t i = 0; i < plan.accepted.size(); ++i) {
    auto a = coverage(plan.accepted[i].box, height, width);
    for (std::size_t j = i + 1; j < plan.accepted.size(); ++j) {
      auto b = coverage(plan.accepted[j].box, height, width);
      for (std::size_t p = 0; p < a.size(); ++p) {
        if (a[p] && b[p]) {
          out.emplace_back(plan.accepted[i].component, plan.accepted[j].component);
          break;
        }
      }
    }
  }
  return out;
}

LabeledFace apply_mask(const LabeledFace& face, const MaskPlan& plan) {
  LabeledFace out = face;
  Image& img = out.pixels;
  for (const Detection& d : plan.accepted) {
    auto [r0, r1] = covered_range(d.box.h1, d.box.h2, img.height);
    auto [c0, c1] = covered_range(d.box.w1, d.box.w2, img.width);
    for (int r = r0; r < r1; ++r) {
      for (int c = c0; c < c1; ++c) {
        for (int ch = 0; ch < img.channels; ++ch) img.at(r, c, ch) = 0.0f;
      }
    }
  }
  for (int k : plan.masked_components) {
    if (k >= 0 && k < static_cast<int>(out.label.size())) out.label[k] = 0;
  }
  return out;
}

DebiasedSet build_debiased_set(const std::vector<LabeledFace>& faces, const std::vector<int>& candidates,
                               const ComponentSchema& schema, const PipelineConfig& config,
                               const DetectionClient& client, const Rng& rng) {
  for (int k : candidates) {
    if (!schema.maskable(k)) throw ValidationError("candidates", schema.name(k) + " is not maskable");
  }
  DebiasedSet out;
  out.faces.resize(faces.size());
  out.records.resize(faces.size());
  parallel_for(static_cast<int>(faces.size()), config.workers, [&](int i) {
    const LabeledFace& face = faces[i];
    CcdRecord& rec = out.records[i];
    rec.id = face.id;
    Rng local = rng.substream(face.id);
    for (int k : candidates) {
      const bool pick = local.bernoulli(config.mask_prob);
      if (pick && face.label[k]) rec.selected.push_back(k);
    }
    if (rec.selected.empty()) {
      out.faces[i] = face;
      return;
    }
    try {
      std::vector<Detection> dets = detect(face, rec.selected, client, schema);
      std::vector<Detection> kept;
      for (const Detection& d : filter_boxes(dets, face.pixels.width, config.conf_thresholds, schema)) {
        if (std::find(rec.selected.begin(), rec.selected.end(), d.component) != rec.selected.end()) {
          kept.push_back(d);
          rec.plan.masked_components.push_back(d.component);
        }
      }
      rec.plan.accepted = std::move(kept);
      out.faces[i] = apply_mask(face, rec.plan);
    } catch (const ClientError& e) {
      rec.error = e.what();
      rec.plan = {};
      out.faces[i] = face;
    }
  });
  for (const CcdRecord& r : out.records) out.client_errors += r.error.empty() ? 0 : 1;
  return out;
}

}  // namespace disfacerep

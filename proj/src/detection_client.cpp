#include "disfacerep/detection_client.hpp"

#include <algorithm>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "disfacerep/error.hpp"
#include "disfacerep/image_io.hpp"
#include "disfacerep/rng.hpp"

namespace disfacerep {

bool mask_bbox(const SegMask& mask, int k, Box& out) {
  int h1 = mask.height, w1 = mask.width, h2 = -1, w2 = -1;
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (mask.at(y, x) != k) continue;
      h1 = std::min(h1, y);
      w1 = std::min(w1, x);
      h2 = std::max(h2, y);
      w2 = std::max(w2, x);
    }
  }
  if (h2 < 0) return false;
  out = {double(h1), double(w1), double(h2 + 1), double(w2 + 1)};
  return true;
}

StubDetectionClient::StubDetectionClient(ComponentSchema schema, DetectorSettings settings, std::uint64_t seed)
    : schema_(std::move(schema)), settings_(std::move(settings)), seed_(seed) {}

void StubDetectionClient::add_mask(const std::string& id, SegMask mask) { masks_[id] = std::move(mask); }

std::vector<RawDetection> StubDetectionClient::query(const LabeledFace& face,
                                                     const std::vector<std::string>& phrases) const {
  auto it = masks_.find(face.id);
  if (it == masks_.end()) throw ClientError("stub detector has no ground truth for '" + face.id + "'", false);
  const SegMask& mask = it->second;
  const int noise = static_cast<int>(settings_.box_noise);
  std::vector<RawDetection> out;
  for (const std::string& phrase : phrases) {
    auto k = schema_.resolve_phrase(phrase);
    if (!k) continue;
    Rng rng = Rng(seed_).substream(face.id).substream(phrase);
    auto jitter = [&](const Box& b) {
      auto d = [&] { return noise > 0 ? static_cast<double>(rng.uniform_int(2 * noise + 1)) - noise : 0.0; };
      Box j{b.h1 + d(), b.w1 + d(), b.h2 + d(), b.w2 + d()};
      j.h1 = std::clamp(j.h1, 0.0, double(mask.height));
      j.h2 = std::clamp(j.h2, j.h1, double(mask.height));
      j.w1 = std::clamp(j.w1, 0.0, double(mask.width));
      j.w2 = std::clamp(j.w2, j.w1, double(mask.width));
      return j;
    };
    const double cn = settings_.confidence_noise;
    Box box;
    if (mask_bbox(mask, *k, box)) {
      const double conf = std::clamp(0.5 + rng.uniform(-cn, cn), 0.0, 1.0);
      out.push_back({phrase, jitter(box), conf});
    }
    if (schema_.laterality(*k) != Laterality::kCentral && rng.bernoulli(settings_.decoy_prob)) {
      const std::string& name = schema_.name(*k);
      const std::string mirror = (name[0] == 'l' ? "r_" : "l_") + name.substr(2);
      auto m = schema_.index_of(mirror);
      if (m && mask_bbox(mask, *m, box)) out.push_back({phrase, jitter(box), rng.uniform(0.3, 0.7)});
    }
  }
  return out;
}

HttpDetectionClient::HttpDetectionClient(DetectorSettings settings) : settings_(std::move(settings)) {
  if (settings_.endpoint.empty()) throw ValidationError("detector.endpoint", "required when detector.kind is http");
}

std::vector<RawDetection> HttpDetectionClient::query(const LabeledFace& face,
                                                     const std::vector<std::string>& phrases) const {
  nlohmann::json req = {{"phrases", phrases}, {"image", base64_encode(encode_png(face.pixels))}};
  const std::string body = req.dump();
  httplib::Headers headers;
  if (!settings_.auth_token.empty()) headers.emplace("Authorization", "Bearer " + settings_.auth_token);
  std::string last_error;
  for (int attempt = 0; attempt <= settings_.retries; ++attempt) {
    httplib::Client cli(settings_.endpoint);
    cli.set_connection_timeout(0, settings_.timeout_ms * 1000);
    cli.set_read_timeout(0, settings_.timeout_ms * 1000);
    auto res = cli.Post("/detect", headers, body, "application/json");
    if (!res) {
      last_error = httplib::to_string(res.error());
      continue;
    }
    if (res->status >= 500) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200) throw ClientError("detector returned HTTP " + std::to_string(res->status), false);
    std::vector<RawDetection> out;
    try {
      const nlohmann::json parsed = nlohmann::json::parse(res->body);
      for (const auto& d : parsed.at("detections")) {
        const auto& b = d.at("box");
        out.push_back({d.at("phrase").get<std::string>(),
                       {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()},
                       d.at("confidence").get<double>()});
      }
    } catch (const nlohmann::json::exception& e) {
      throw ClientError(std::string("detector response invalid: ") + e.what(), false);
    }
    return out;
  }
  throw ClientError("detector unreachable after " + std::to_string(settings_.retries + 1) +
                        " attempts: " + last_error,
                    true);
}

std::unique_ptr<DetectionClient> make_detection_client(const PipelineConfig& config, const ComponentSchema& schema,
                                                       const std::vector<Sample>& samples) {
  if (config.detector.kind == "http") return std::make_unique<HttpDetectionClient>(config.detector);
  if (config.detector.kind != "stub") {
    throw ValidationError("detector.kind", "expected 'stub' or 'http', got '" + config.detector.kind + "'");
  }
  auto stub = std::make_unique<StubDetectionClient>(schema, config.detector, Rng(config.seed).substream("detector").seed());
  for (const Sample& s : samples) stub->add_mask(s.face.id, s.mask);
  return stub;
}

}  // namespace disfacerep

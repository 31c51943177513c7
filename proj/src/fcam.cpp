#include "disfacerep/fcam.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "disfacerep/error.hpp"
#include "disfacerep/image_io.hpp"
#include "disfacerep/parallel.hpp"
#include "disfacerep/vl.hpp"

namespace disfacerep {

FcamFusion parse_fusion(const std::string& name) {
  if (name == "attention_x_p") return FcamFusion::attention_x_p;
  if (name == "attention") return FcamFusion::attention;
  if (name == "p") return FcamFusion::p;
  throw ValidationError("model.fcam_fusion", "expected attention_x_p, attention or p, got '" + name + "'");
}

FCAMStack fuse_fcam(const Matrix<double>& attention, const Matrix<double>& p, const Label& present, int height,
                    int width, FcamFusion fusion) {
  if (attention.rows != p.rows || attention.cols != p.cols) throw ShapeError("fcam: attention and P differ in shape");
  if (present.size() != static_cast<std::size_t>(p.rows)) throw ShapeError("fcam: label length");
  const int k_count = p.rows, n = p.cols;
  const int grid = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n))));
  if (grid * grid != n) throw ShapeError("fcam: patch count is not a square");
  FCAMStack s;
  s.height = height;
  s.width = width;
  s.present = present;
  s.maps = Matrix<double>(k_count, height * width);
  std::vector<double> fused(n);
  for (int k = 0; k < k_count; ++k) {
    if (!present[k]) continue;
    for (int i = 0; i < n; ++i) {
      switch (fusion) {
        case FcamFusion::attention_x_p: fused[i] = attention(k, i) * p(k, i); break;
        case FcamFusion::attention: fused[i] = attention(k, i); break;
        case FcamFusion::p: fused[i] = p(k, i); break;
      }
    }
    const auto [lo, hi] = std::minmax_element(fused.begin(), fused.end());
    const double mn = *lo, range = *hi - *lo;
    if (!(range > 0)) continue;
    for (double& v : fused) v = (v - mn) / range;
    const std::vector<double> up = upsample_nearest(fused, grid, height, width);
    std::copy(up.begin(), up.end(), s.maps.row(k).begin());
  }
  return s;
}

FCAMStack extract_fcam(const Image& image, const Label& present, const nn::Classifier<float>& model,
                       FcamFusion fusion) {
  const auto& spec = model.spec().backbone;
  ad::Graph<float> graph;
  nn::BoundParams<float> params(graph, model.params(), false);
  auto fwd = model.forward(graph, params, graph.constant(nn::image_matrix<float>(image)));
  const auto& layers = fwd.backbone.class_to_patch;
  if (layers.empty()) throw Error("fcam: model has no attention layers");
  const std::size_t first = layers.size() >= 2 ? layers.size() - 2 : 0;
  Matrix<double> att(spec.num_classes, spec.num_patches());
  for (std::size_t l = first; l < layers.size(); ++l) {
    for (std::size_t i = 0; i < att.size(); ++i) att.data[i] += layers[l].data[i];
  }
  for (double& v : att.data) v /= static_cast<double>(layers.size() - first);
  return fuse_fcam(att, ad::cast<double>(fwd.p.value()), present, image.height, image.width, fusion);
}

SegMask pseudo_mask(const FCAMStack& stack, double theta) {
  if (!(theta > 0.0 && theta < 1.0)) throw ValidationError("theta", "must lie in (0, 1)");
  const int k_count = stack.maps.rows;
  SegMask m(stack.height, stack.width, static_cast<std::uint8_t>(k_count));
  for (int i = 0; i < stack.height * stack.width; ++i) {
    int best = -1;
    double best_v = 0;
    for (int k = 0; k < k_count; ++k) {
      if (!stack.present[k]) continue;
      const double v = stack.maps(k, i);
      if (v >= theta && (best < 0 || v > best_v)) {
        best = k;
        best_v = v;
      }
    }
    if (best >= 0) m.labels[i] = static_cast<std::uint8_t>(best);
  }
  return m;
}

PseudoManifest write_pseudo_labels(const std::vector<LabeledFace>& faces, const nn::Classifier<float>& model,
                                   double theta, const std::string& out_dir, FcamFusion fusion, int workers) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(out_dir) / "masks");
  std::vector<std::string> errors(faces.size());
  parallel_for(static_cast<int>(faces.size()), workers, [&](int i) {
    const LabeledFace& f = faces[i];
    try {
      SegMask m = pseudo_mask(extract_fcam(f.pixels, f.label, model, fusion), theta);
      write_mask((fs::path(out_dir) / "masks" / (f.id + ".png")).string(), m);
    } catch (const Error& e) {
      errors[i] = e.what();
    }
  });
  PseudoManifest manifest;
  for (std::size_t i = 0; i < faces.size(); ++i) {
    if (errors[i].empty()) {
      manifest.entries.emplace_back(faces[i].id, "masks/" + faces[i].id + ".png");
    } else {
      manifest.errors.emplace_back(faces[i].id, errors[i]);
    }
  }
  std::sort(manifest.entries.begin(), manifest.entries.end());
  std::ostringstream ss;
  for (const auto& [id, rel] : manifest.entries) ss << id << '\t' << rel << '\n';
  write_file((fs::path(out_dir) / "manifest.txt").string(), ss.str());
  return manifest;
}

PseudoManifest read_pseudo_manifest(const std::string& dir) {
  std::istringstream in(read_file((std::filesystem::path(dir) / "manifest.txt").string()));
  PseudoManifest m;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw DataError("malformed pseudo-label manifest line: " + line);
    m.entries.emplace_back(line.substr(0, tab), line.substr(tab + 1));
  }
  if (m.entries.empty()) throw DataError("pseudo-label manifest in '" + dir + "' is empty");
  return m;
}

}  // namespace disfacerep

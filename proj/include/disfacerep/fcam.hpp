#pragma once

#include <string>
#include <utility>
#include <vector>

#include "disfacerep/autograd.hpp"
#include "disfacerep/encoders.hpp"
#include "disfacerep/image.hpp"

namespace disfacerep {

using ad::Matrix;

enum class FcamFusion { attention_x_p, attention, p };
FcamFusion parse_fusion(const std::string& name);

// Per-class activation maps at image resolution, K x (H*W) row-major.
struct FCAMStack {
  int height = 0;
  int width = 0;
  Matrix<double> maps;
  Label present;
};

// Min-max normalizes each present class's fused patch map (constant maps
// become zero), zeroes absent classes, and upsamples by nearest neighbour.
// attention and p are K x N on a square patch grid.
FCAMStack fuse_fcam(const Matrix<double>& attention, const Matrix<double>& p, const Label& present, int height,
                    int width, FcamFusion fusion = FcamFusion::attention_x_p);

// Class-to-patch attention averaged over the last two blocks, fused with P.
FCAMStack extract_fcam(const Image& image, const Label& present, const nn::Classifier<float>& model,
                       FcamFusion fusion = FcamFusion::attention_x_p);

// Per pixel: argmax over present classes whose activation is >= theta, lowest
// index on ties; background (K) when no class qualifies.
SegMask pseudo_mask(const FCAMStack& stack, double theta);

struct PseudoManifest {
  std::vector<std::pair<std::string, std::string>> entries;  // (id, relative path), sorted by id
  std::vector<std::pair<std::string, std::string>> errors;   // (id, message)
};

// Writes one indexed PNG per face (value = class index, K = background) plus
// manifest.txt under out_dir.
PseudoManifest write_pseudo_labels(const std::vector<LabeledFace>& faces, const nn::Classifier<float>& model,
                                   double theta, const std::string& out_dir, FcamFusion fusion, int workers = 1);

// Reads manifest.txt written above.
PseudoManifest read_pseudo_manifest(const std::string& dir);

}  // namespace disfacerep

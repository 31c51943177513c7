#pragma once

#include <array>
#include <string>
#include <vector>

#include "disfacerep/image.hpp"
#include "disfacerep/rng.hpp"
#include "disfacerep/schema.hpp"

namespace disfacerep {

using Color = std::array<float, 3>;

// Axis-aligned ellipse prior for one component. Positions and radii are
// fractions of the canvas side; jitters are uniform half-widths.
struct ShapePrior {
  double prob = 1.0;
  double cx = 0.5, cy = 0.5;
  double rx = 0.1, ry = 0.1;
  double pos_jitter = 0.0;
  double size_jitter = 0.0;
  Color color = {0.5f, 0.5f, 0.5f};
};

// Joint presence probability of two components.
struct Coupling {
  std::string a, b;
  double joint = 0.0;
};

struct SyntheticFaceSpec {
  int canvas = 64;
  ComponentSchema schema = ComponentSchema::synthetic();
  std::vector<ShapePrior> shapes;  // one per schema component, same order
  std::vector<Coupling> couplings;
  Color background = {0.15f, 0.2f, 0.3f};
  double face_jitter = 0.03;   // shared shift of every component
  double color_jitter = 0.06;  // per-component additive color offset
  double pixel_noise = 0.02;

  // Nine-part faces: skin and nose dominant, lateral pairs mirrored about the
  // vertical midline with the subject's right side on the image's left.
  static SyntheticFaceSpec default_faces(int canvas = 64);
  // YAML file overriding fields of default_faces (see README).
  static SyntheticFaceSpec from_yaml_file(const std::string& path);

  // Throws ValidationError for probabilities outside [0,1], asymmetric
  // lateral priors, or an unsatisfiable coupling.
  void validate() const;
};

// Draws one face. The same generator state always yields the same sample.
Sample generate_face(const SyntheticFaceSpec& spec, Rng& rng, const std::string& id);

// n samples with ids "syn_00000"...; sample i uses rng.substream(i).
std::vector<Sample> generate_synthetic(const SyntheticFaceSpec& spec, int n, const Rng& rng);

// Every component at its prior mean with no jitter or noise.
Sample render_mean_face(const SyntheticFaceSpec& spec);

}  // namespace disfacerep

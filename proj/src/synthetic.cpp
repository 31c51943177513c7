#include "disfacerep/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include <yaml-cpp/yaml.h>

#include "disfacerep/error.hpp"

namespace disfacerep {
namespace {

struct Ellipse {
  double cx, cy, rx, ry;  // pixels
  Color color;
};

float quantize(double v) {
  v = std::clamp(v, 0.0, 1.0);
  return static_cast<float>(std::lround(v * 255.0)) / 255.0f;
}

void paint(Image& img, SegMask& mask, const Ellipse& e, std::uint8_t value) {
  const int y0 = std::max(0, static_cast<int>(std::floor(e.cy - e.ry)));
  const int y1 = std::min(img.height - 1, static_cast<int>(std::ceil(e.cy + e.ry)));
  const int x0 = std::max(0, static_cast<int>(std::floor(e.cx - e.rx)));
  const int x1 = std::min(img.width - 1, static_cast<int>(std::ceil(e.cx + e.rx)));
  for (int y = y0; y <= y1; ++y) {
    const double dy = (y + 0.5 - e.cy) / e.ry;
    for (int x = x0; x <= x1; ++x) {
      const double dx = (x + 0.5 - e.cx) / e.rx;
      if (dx * dx + dy * dy > 1.0) continue;
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = e.color[c];
      mask.at(y, x) = value;
    }
  }
}

// Draws presence for every component, honoring pairwise couplings.
Label draw_presence(const SyntheticFaceSpec& spec, Rng& rng) {
  const int k_count = spec.schema.size();
  Label y(k_count, 0);
  std::vector<int> partner(k_count, -1);
  std::vector<double> joint(k_count, 0.0);
  for (const Coupling& c : spec.couplings) {
    int a = *spec.schema.index_of(c.a), b = *spec.schema.index_of(c.b);
    partner[a] = b;
    partner[b] = a;
    joint[a] = joint[b] = c.joint;
  }
  std::vector<bool> done(k_count, false);
  for (int k = 0; k < k_count; ++k) {
    if (done[k]) continue;
    const double u = rng.uniform();
    if (partner[k] < 0) {
      y[k] = u < spec.shapes[k].prob;
    } else {
      const int l = partner[k];
      const double pk = spec.shapes[k].prob, pl = spec.shapes[l].prob, j = joint[k];
      if (u < j) {
        y[k] = y[l] = 1;
      } else if (u < pk) {
        y[k] = 1;
      } else if (u < pk + pl - j) {
        y[l] = 1;
      }
      done[l] = true;
    }
    done[k] = true;
  }
  return y;
}

Sample render(const SyntheticFaceSpec& spec, const Label& present, Rng* rng, const std::string& id) {
  const int n = spec.canvas;
  const int k_count = spec.schema.size();
  Sample s;
  s.face.id = id;
  s.face.pixels = Image(n, n, 3);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      for (int c = 0; c < 3; ++c) s.face.pixels.at(y, x, c) = spec.background[c];
    }
  }
  s.mask = SegMask(n, n, static_cast<std::uint8_t>(k_count));
  double shift_x = 0, shift_y = 0;
  if (rng) {
    shift_x = rng->uniform(-spec.face_jitter, spec.face_jitter);
    shift_y = rng->uniform(-spec.face_jitter, spec.face_jitter);
  }
  for (int k = 0; k < k_count; ++k) {
    const ShapePrior& p = spec.shapes[k];
    // Draws happen for absent components too so one component's presence does
    // not shift the geometry of the others.
    double jx = 0, jy = 0, sx = 1, sy = 1;
    Color color = p.color;
    if (rng) {
      jx = rng->uniform(-p.pos_jitter, p.pos_jitter);
      jy = rng->uniform(-p.pos_jitter, p.pos_jitter);
      sx = 1.0 + rng->uniform(-p.size_jitter, p.size_jitter);
      sy = 1.0 + rng->uniform(-p.size_jitter, p.size_jitter);
      const double dc = rng->uniform(-spec.color_jitter, spec.color_jitter);
      for (float& c : color) c = static_cast<float>(std::clamp(c + dc, 0.0, 1.0));
    }
    if (!present[k]) continue;
    Ellipse e{(p.cx + shift_x + jx) * n, (p.cy + shift_y + jy) * n, p.rx * sx * n, p.ry * sy * n, color};
    paint(s.face.pixels, s.mask, e, static_cast<std::uint8_t>(k));
  }
  for (float& v : s.face.pixels.data) {
    double noisy = v;
    if (rng && spec.pixel_noise > 0) noisy += rng->uniform(-spec.pixel_noise, spec.pixel_noise);
    v = quantize(noisy);
  }
  s.face.label = label_from_mask(s.mask, k_count);
  return s;
}

ShapePrior prior(double prob, double cx, double cy, double rx, double ry, Color color) {
  ShapePrior p;
  p.prob = prob;
  p.cx = cx;
  p.cy = cy;
  p.rx = rx;
  p.ry = ry;
  p.pos_jitter = 0.02;
  p.size_jitter = 0.15;
  p.color = color;
  return p;
}

Color read_color(const YAML::Node& node) {
  if (!node.IsSequence() || node.size() != 3) throw ConfigError("color must be a list of 3 numbers", node.Mark().line + 1);
  return {node[0].as<float>(), node[1].as<float>(), node[2].as<float>()};
}

}  // namespace

SyntheticFaceSpec SyntheticFaceSpec::default_faces(int canvas) {
  SyntheticFaceSpec s;
  s.canvas = canvas;
  const Color eye = {0.2f, 0.25f, 0.4f};
  const Color brow = {0.35f, 0.22f, 0.12f};
  const Color ear = {0.78f, 0.55f, 0.45f};
  std::map<std::string, ShapePrior> shapes = {
      {"skin", prior(1.0, 0.5, 0.52, 0.30, 0.38, {0.88f, 0.70f, 0.58f})},
      {"nose", prior(0.995, 0.5, 0.56, 0.05, 0.10, {0.70f, 0.48f, 0.40f})},
      {"l_eye", prior(0.97, 0.63, 0.42, 0.075, 0.04, eye)},
      {"r_eye", prior(0.97, 0.37, 0.42, 0.075, 0.04, eye)},
      {"l_brow", prior(0.95, 0.63, 0.32, 0.09, 0.025, brow)},
      {"r_brow", prior(0.95, 0.37, 0.32, 0.09, 0.025, brow)},
      {"l_ear", prior(0.92, 0.83, 0.50, 0.05, 0.10, ear)},
      {"r_ear", prior(0.92, 0.17, 0.50, 0.05, 0.10, ear)},
      {"mouth", prior(0.97, 0.5, 0.76, 0.12, 0.04, {0.75f, 0.22f, 0.28f})},
  };
  shapes["skin"].pos_jitter = 0.01;
  shapes["skin"].size_jitter = 0.05;
  for (const std::string& name : s.schema.names()) s.shapes.push_back(shapes.at(name));
  s.couplings = {{"l_eye", "r_eye", 0.95}, {"l_brow", "r_brow", 0.92}, {"l_ear", "r_ear", 0.88}};
  s.validate();
  return s;
}

SyntheticFaceSpec SyntheticFaceSpec::from_yaml_file(const std::string& path) {
  YAML::Node root;
  try {
    root = YAML::LoadFile(path);
  } catch (const YAML::ParserException& e) {
    throw ConfigError(e.msg, e.mark.line + 1);
  } catch (const YAML::Exception& e) {
    throw DataError("cannot read synthetic spec '" + path + "': " + e.what());
  }
  SyntheticFaceSpec s = default_faces(root["canvas"] ? root["canvas"].as<int>() : 64);
  try {
    if (root["background"]) s.background = read_color(root["background"]);
    if (root["face_jitter"]) s.face_jitter = root["face_jitter"].as<double>();
    if (root["color_jitter"]) s.color_jitter = root["color_jitter"].as<double>();
    if (root["pixel_noise"]) s.pixel_noise = root["pixel_noise"].as<double>();
    if (const YAML::Node comps = root["components"]) {
      for (auto it = comps.begin(); it != comps.end(); ++it) {
        const std::string name = it->first.as<std::string>();
        auto k = s.schema.index_of(name);
        if (!k) throw ValidationError("components." + name, "not a synthetic component");
        ShapePrior& p = s.shapes[*k];
        const YAML::Node n = it->second;
        if (n["prob"]) p.prob = n["prob"].as<double>();
        if (n["cx"]) p.cx = n["cx"].as<double>();
        if (n["cy"]) p.cy = n["cy"].as<double>();
        if (n["rx"]) p.rx = n["rx"].as<double>();
        if (n["ry"]) p.ry = n["ry"].as<double>();
        if (n["pos_jitter"]) p.pos_jitter = n["pos_jitter"].as<double>();
        if (n["size_jitter"]) p.size_jitter = n["size_jitter"].as<double>();
        if (n["color"]) p.color = read_color(n["color"]);
      }
    }
    if (const YAML::Node cs = root["couplings"]) {
      s.couplings.clear();
      for (const YAML::Node& c : cs) {
        s.couplings.push_back({c["a"].as<std::string>(), c["b"].as<std::string>(), c["joint"].as<double>()});
      }
    }
  } catch (const YAML::Exception& e) {
    throw ConfigError(e.msg, e.mark.line + 1);
  }
  s.validate();
  return s;
}

void SyntheticFaceSpec::validate() const {
  if (canvas < 8) throw ValidationError("canvas", "must be at least 8");
  if (static_cast<int>(shapes.size()) != schema.size()) {
    throw ValidationError("components", "one shape prior per schema component is required");
  }
  for (int k = 0; k < schema.size(); ++k) {
    const ShapePrior& p = shapes[k];
    const std::string field = "components." + schema.name(k);
    if (!(p.prob >= 0.0 && p.prob <= 1.0)) throw ValidationError(field + ".prob", "must lie in [0, 1]");
    if (!(p.rx > 0 && p.ry > 0)) throw ValidationError(field, "radii must be positive");
  }
  // Lateral pairs must be mirror images about the vertical midline.
  for (int k = 0; k < schema.size(); ++k) {
    if (schema.laterality(k) != Laterality::kLeft) continue;
    const int r = *schema.index_of("r_" + schema.name(k).substr(2));
    const ShapePrior& a = shapes[k];
    const ShapePrior& b = shapes[r];
    if (std::abs(a.cx + b.cx - 1.0) > 1e-9 || a.cy != b.cy || a.rx != b.rx || a.ry != b.ry ||
        a.pos_jitter != b.pos_jitter || a.size_jitter != b.size_jitter) {
      throw ValidationError("components." + schema.name(k), "lateral priors must mirror their counterpart");
    }
  }
  std::vector<bool> coupled(schema.size(), false);
  for (const Coupling& c : couplings) {
    const std::string field = "couplings." + c.a + "+" + c.b;
    auto a = schema.index_of(c.a), b = schema.index_of(c.b);
    if (!a || !b || *a == *b) throw ValidationError(field, "must name two distinct components");
    if (coupled[*a] || coupled[*b]) throw ValidationError(field, "a component may appear in one coupling only");
    coupled[*a] = coupled[*b] = true;
    const double pa = shapes[*a].prob, pb = shapes[*b].prob;
    if (c.joint < 0.0 || c.joint > std::min(pa, pb) + 1e-12 || pa + pb - c.joint > 1.0 + 1e-12) {
      throw ValidationError(field, "joint probability is unsatisfiable for the given marginals");
    }
  }
}

Sample generate_face(const SyntheticFaceSpec& spec, Rng& rng, const std::string& id) {
  Label present = draw_presence(spec, rng);
  return render(spec, present, &rng, id);
}

std::vector<Sample> generate_synthetic(const SyntheticFaceSpec& spec, int n, const Rng& rng) {
  if (n < 1) throw ValidationError("n", "must be at least 1");
  spec.validate();
  std::vector<Sample> out;
  out.reserve(n);
  char id[32];
  for (int i = 0; i < n; ++i) {
    Rng sample_rng = rng.substream(static_cast<std::uint64_t>(i));
    std::snprintf(id, sizeof id, "syn_%05d", i);
    out.push_back(generate_face(spec, sample_rng, id));
  }
  return out;
}

Sample render_mean_face(const SyntheticFaceSpec& spec) {
  return render(spec, Label(spec.schema.size(), 1), nullptr, "mean_face");
}

}  // namespace disfacerep

#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "disfacerep/autograd.hpp"
#include "disfacerep/config.hpp"
#include "disfacerep/image.hpp"
#include "disfacerep/schema.hpp"

namespace disfacerep {

struct SyntheticFaceSpec;

using ad::Graph;
using ad::Matrix;
using ad::Var;

// Frozen image encoder: image -> e-vector.
class ImageEncoder {
 public:
  virtual ~ImageEncoder() = default;
  virtual int width() const = 0;
  virtual bool differentiable() const = 0;
  virtual std::vector<double> encode(const Image& image) const = 0;
  // Graph form for an (H*W) x C image Var; returns 1 x e. Only available when
  // differentiable(); the encoder's own parameters enter as constants.
  virtual Var<float> encode(Graph<float>& graph, Var<float> image, int height, int width) const;
  virtual Var<double> encode(Graph<double>& graph, Var<double> image, int height, int width) const;
};

class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual int width() const = 0;
  virtual std::vector<double> encode(const std::string& prompt) const = 0;
};

// Block-mean-pools the image on a grid x grid lattice, flattens (cell-major,
// channel innermost) and applies a fixed linear map: e x (grid*grid*C).
class PooledLinearImageEncoder : public ImageEncoder {
 public:
  PooledLinearImageEncoder(int grid, int channels, Matrix<double> projection);

  int width() const override { return projection_.rows; }
  bool differentiable() const override { return true; }
  std::vector<double> encode(const Image& image) const override;
  Var<float> encode(Graph<float>& graph, Var<float> image, int height, int width) const override;
  Var<double> encode(Graph<double>& graph, Var<double> image, int height, int width) const override;

  int grid() const { return grid_; }
  const Matrix<double>& projection() const { return projection_; }

  // Pooled feature vector of length grid*grid*C.
  std::vector<double> features(const Image& image) const;

  // Least-squares map sending the feature vector of prototypes[j] to
  // targets.row(j): projection = targets^T * pinv(Phi), Phi holding the
  // prototype features as columns.
  static PooledLinearImageEncoder fit(int grid, const std::vector<Image>& prototypes,
                                      const Matrix<double>& targets);

 private:
  template <typename T>
  Var<T> encode_graph(Graph<T>& graph, Var<T> image, int height, int width) const;

  int grid_;
  int channels_;
  Matrix<double> projection_;
  Matrix<float> projection_t_f_;  // (grid*grid*C) x e
  Matrix<double> projection_t_d_;
};

// Registered prompts map to orthonormal vectors (columns of Q from the QR of a
// seeded Gaussian matrix); any other prompt maps to a hashed unit vector.
class OrthogonalTextEncoder : public TextEncoder {
 public:
  OrthogonalTextEncoder(int width, const std::vector<std::string>& prompts, std::uint64_t seed);
  int width() const override { return width_; }
  std::vector<double> encode(const std::string& prompt) const override;

 private:
  int width_;
  std::map<std::string, std::vector<double>> table_;
};

// Memoizes another text encoder; prompts are static so each is encoded once.
class CachingTextEncoder : public TextEncoder {
 public:
  explicit CachingTextEncoder(std::shared_ptr<const TextEncoder> inner) : inner_(std::move(inner)) {}
  int width() const override { return inner_->width(); }
  std::vector<double> encode(const std::string& prompt) const override;
  int misses() const;

 private:
  std::shared_ptr<const TextEncoder> inner_;
  mutable std::mutex mu_;
  mutable std::map<std::string, std::vector<double>> cache_;
  mutable int misses_ = 0;
};

// Client for an external VL service:
//   GET  /handshake    -> {"width": e}
//   POST /encode_image {"image": base64 PNG} -> {"embedding": [...]}
//   POST /encode_text  {"text": prompt}       -> {"embedding": [...]}
// Not differentiable, so only the class-token loss terms can train with it.
class HttpVLClient : public ImageEncoder, public TextEncoder {
 public:
  HttpVLClient(std::string endpoint, std::string auth_token, int timeout_ms);
  int width() const override { return width_; }
  bool differentiable() const override { return false; }
  std::vector<double> encode(const Image& image) const override;
  std::vector<double> encode(const std::string& prompt) const override;
  using ImageEncoder::encode;

 private:
  std::string post(const std::string& path, const std::string& body) const;
  std::string endpoint_;
  std::string auth_token_;
  int timeout_ms_;
  int width_ = 0;
};

struct VLEncoderPair {
  std::shared_ptr<const ImageEncoder> image;
  std::shared_ptr<const TextEncoder> text;
  bool frozen = true;
};

// "a photo of a face with {phrase}"
std::string prompt_for(const std::string& phrase);

// Builds the configured pair. The prototype encoder is fitted to the mean face
// of the synthetic corpus: each component's region (and the background)
// is mapped onto that component's prompt embedding (background onto 0).
VLEncoderPair make_vl_pair(const PipelineConfig& config, const ComponentSchema& schema,
                           const SyntheticFaceSpec& face_spec);

// v_txt: K x e, row k = eps_t(prompt_for(phrase(k))).
Matrix<double> encode_prompts(const ComponentSchema& schema, const TextEncoder& text);

// Graph form of v_ffc / v_bfc. p is K x N on a square patch grid; each row is
// upsampled by nearest neighbour to the image before masking.
template <typename T>
struct ComponentVectors {
  Var<T> v_ffc;  // K x e
  Var<T> v_bfc;  // K x e
};

template <typename T>
ComponentVectors<T> encode_components(Graph<T>& graph, Var<T> image, int height, int width, Var<T> p,
                                      const ImageEncoder& encoder, bool need_ffc = true, bool need_bfc = true);

// Value form on a single image; p is K x N.
struct ComponentValues {
  Matrix<double> v_ffc, v_bfc;
};
ComponentValues encode_components(const Image& image, const Matrix<double>& p, const ImageEncoder& encoder);

// Nearest-neighbour upsampling of a grid x grid map to height x width.
std::vector<double> upsample_nearest(std::span<const double> map, int grid, int height, int width);

}  // namespace disfacerep

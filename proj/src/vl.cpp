#include "disfacerep/vl.hpp"

#include <cmath>
#include <numeric>

#include <Eigen/Dense>
#include <httplib.h>
#include <json.hpp>

#include "disfacerep/error.hpp"
#include "disfacerep/image_io.hpp"
#include "disfacerep/rng.hpp"
#include "disfacerep/synthetic.hpp"

namespace disfacerep {
namespace {

ad::IndexMap identity_index(int n) {
  auto v = std::make_shared<std::vector<int>>(n);
  std::iota(v->begin(), v->end(), 0);
  return v;
}

std::vector<double> unit(std::vector<double> v) {
  double n = 0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (n > 0) {
    for (double& x : v) x /= n;
  }
  return v;
}

Image masked_copy(const Image& image, const std::vector<double>& weights) {
  Image out = image;
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      const double w = weights[static_cast<std::size_t>(y) * image.width + x];
      for (int c = 0; c < image.channels; ++c) {
        float& v = out.at(y, x, c);
        v = static_cast<float>(v * w);
      }
    }
  }
  return out;
}

std::vector<double> parse_embedding(const std::string& body, int expected) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception& e) {
    throw ClientError(std::string("VL service returned malformed JSON: ") + e.what(), false);
  }
  if (!j.contains("embedding") || !j["embedding"].is_array()) {
    throw ClientError("VL service response lacks an 'embedding' array", false);
  }
  std::vector<double> v = j["embedding"].get<std::vector<double>>();
  if (expected > 0 && static_cast<int>(v.size()) != expected) {
    throw ClientError("VL service returned width " + std::to_string(v.size()) + ", expected " +
                          std::to_string(expected),
                      false);
  }
  return v;
}

}  // namespace

Var<float> ImageEncoder::encode(Graph<float>&, Var<float>, int, int) const {
  throw Error("image encoder is not differentiable");
}
Var<double> ImageEncoder::encode(Graph<double>&, Var<double>, int, int) const {
  throw Error("image encoder is not differentiable");
}

PooledLinearImageEncoder::PooledLinearImageEncoder(int grid, int channels, Matrix<double> projection)
    : grid_(grid), channels_(channels), projection_(std::move(projection)) {
  if (grid <= 0 || channels <= 0) throw ValidationError("vl.pool_grid", "must be positive");
  if (projection_.cols != grid * grid * channels) {
    throw ShapeError("pooled encoder projection must have grid*grid*channels columns");
  }
  projection_t_d_ = Matrix<double>(projection_.cols, projection_.rows);
  for (int r = 0; r < projection_.rows; ++r) {
    for (int c = 0; c < projection_.cols; ++c) projection_t_d_(c, r) = projection_(r, c);
  }
  projection_t_f_ = ad::cast<float>(projection_t_d_);
}

std::vector<double> PooledLinearImageEncoder::features(const Image& image) const {
  if (image.channels != channels_ || image.height % grid_ || image.width % grid_) {
    throw ShapeError("pooled encoder: image does not fit the pooling grid");
  }
  const int bh = image.height / grid_, bw = image.width / grid_;
  std::vector<double> f(static_cast<std::size_t>(grid_) * grid_ * channels_, 0.0);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      const int cell = (y / bh) * grid_ + x / bw;
      for (int c = 0; c < channels_; ++c) f[cell * channels_ + c] += image.at(y, x, c);
    }
  }
  for (double& v : f) v /= bh * bw;
  return f;
}

std::vector<double> PooledLinearImageEncoder::encode(const Image& image) const {
  const std::vector<double> f = features(image);
  std::vector<double> out(projection_.rows, 0.0);
  for (int r = 0; r < projection_.rows; ++r) {
    double s = 0;
    for (int c = 0; c < projection_.cols; ++c) s += projection_(r, c) * f[c];
    out[r] = s;
  }
  return out;
}

template <typename T>
Var<T> PooledLinearImageEncoder::encode_graph(Graph<T>& graph, Var<T> image, int height, int width) const {
  if (image.rows() != height * width || image.cols() != channels_) {
    throw ShapeError("pooled encoder: image Var has the wrong shape");
  }
  Var<T> pooled = ad::block_mean_pool(image, height, width, grid_);
  const int f = grid_ * grid_ * channels_;
  Var<T> flat = ad::gather(pooled, 1, f, identity_index(f));
  const Matrix<T>* pt;
  if constexpr (std::is_same_v<T, float>) {
    pt = &projection_t_f_;
  } else {
    pt = &projection_t_d_;
  }
  return ad::matmul(flat, graph.constant(*pt));
}

Var<float> PooledLinearImageEncoder::encode(Graph<float>& g, Var<float> image, int h, int w) const {
  return encode_graph(g, image, h, w);
}
Var<double> PooledLinearImageEncoder::encode(Graph<double>& g, Var<double> image, int h, int w) const {
  return encode_graph(g, image, h, w);
}

PooledLinearImageEncoder PooledLinearImageEncoder::fit(int grid, const std::vector<Image>& prototypes,
                                                       const Matrix<double>& targets) {
  if (prototypes.empty() || static_cast<int>(prototypes.size()) != targets.rows) {
    throw ShapeError("prototype count must match target rows");
  }
  const int channels = prototypes.front().channels;
  PooledLinearImageEncoder probe(grid, channels, Matrix<double>(1, grid * grid * channels));
  const int f = grid * grid * channels;
  Eigen::MatrixXd phi(f, prototypes.size());
  for (std::size_t j = 0; j < prototypes.size(); ++j) {
    const std::vector<double> feat = probe.features(prototypes[j]);
    for (int i = 0; i < f; ++i) phi(i, j) = feat[i];
  }
  Eigen::MatrixXd t(targets.cols, targets.rows);
  for (int j = 0; j < targets.rows; ++j) {
    for (int i = 0; i < targets.cols; ++i) t(i, j) = targets(j, i);
  }
  Eigen::MatrixXd pinv = Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd>(phi).pseudoInverse();
  Eigen::MatrixXd m = t * pinv;
  Matrix<double> projection(static_cast<int>(m.rows()), static_cast<int>(m.cols()));
  for (int r = 0; r < m.rows(); ++r) {
    for (int c = 0; c < m.cols(); ++c) projection(r, c) = m(r, c);
  }
  return PooledLinearImageEncoder(grid, channels, std::move(projection));
}

OrthogonalTextEncoder::OrthogonalTextEncoder(int width, const std::vector<std::string>& prompts,
                                             std::uint64_t seed)
    : width_(width) {
  const int n = static_cast<int>(prompts.size());
  if (n > width) throw ValidationError("model.vl_dim", "must be at least the number of components");
  Rng rng(seed);
  Eigen::MatrixXd g(width, std::max(n, 1));
  for (int c = 0; c < g.cols(); ++c) {
    for (int r = 0; r < width; ++r) g(r, c) = rng.normal();
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(width, g.cols());
  for (int j = 0; j < n; ++j) {
    std::vector<double> v(width);
    for (int r = 0; r < width; ++r) v[r] = q(r, j);
    if (!table_.emplace(prompts[j], std::move(v)).second) {
      throw ValidationError("prompts", "duplicate prompt '" + prompts[j] + "'");
    }
  }
}

std::vector<double> OrthogonalTextEncoder::encode(const std::string& prompt) const {
  auto it = table_.find(prompt);
  if (it != table_.end()) return it->second;
  Rng rng(fnv1a64(prompt));
  std::vector<double> v(width_);
  for (double& x : v) x = rng.normal();
  return unit(std::move(v));
}

std::vector<double> CachingTextEncoder::encode(const std::string& prompt) const {
  std::lock_guard lock(mu_);
  auto it = cache_.find(prompt);
  if (it != cache_.end()) return it->second;
  ++misses_;
  return cache_.emplace(prompt, inner_->encode(prompt)).first->second;
}

int CachingTextEncoder::misses() const {
  std::lock_guard lock(mu_);
  return misses_;
}

HttpVLClient::HttpVLClient(std::string endpoint, std::string auth_token, int timeout_ms)
    : endpoint_(std::move(endpoint)), auth_token_(std::move(auth_token)), timeout_ms_(timeout_ms) {
  if (endpoint_.empty()) throw ValidationError("vl.endpoint", "required when vl.kind is http");
  httplib::Client cli(endpoint_);
  cli.set_connection_timeout(0, timeout_ms_ * 1000);
  cli.set_read_timeout(0, timeout_ms_ * 1000);
  httplib::Headers headers;
  if (!auth_token_.empty()) headers.emplace("Authorization", "Bearer " + auth_token_);
  auto res = cli.Get("/handshake", headers);
  if (!res) throw ClientError("VL handshake failed: " + httplib::to_string(res.error()), true);
  if (res->status != 200) throw ClientError("VL handshake returned HTTP " + std::to_string(res->status), false);
  try {
    width_ = nlohmann::json::parse(res->body).at("width").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ClientError(std::string("VL handshake response invalid: ") + e.what(), false);
  }
}

std::string HttpVLClient::post(const std::string& path, const std::string& body) const {
  httplib::Client cli(endpoint_);
  cli.set_connection_timeout(0, timeout_ms_ * 1000);
  cli.set_read_timeout(0, timeout_ms_ * 1000);
  httplib::Headers headers;
  if (!auth_token_.empty()) headers.emplace("Authorization", "Bearer " + auth_token_);
  auto res = cli.Post(path, headers, body, "application/json");
  if (!res) throw ClientError("VL request " + path + " failed: " + httplib::to_string(res.error()), true);
  if (res->status != 200) {
    throw ClientError("VL request " + path + " returned HTTP " + std::to_string(res->status), res->status >= 500);
  }
  return res->body;
}

std::vector<double> HttpVLClient::encode(const Image& image) const {
  nlohmann::json req = {{"image", base64_encode(encode_png(image))}};
  return parse_embedding(post("/encode_image", req.dump()), width_);
}

std::vector<double> HttpVLClient::encode(const std::string& prompt) const {
  nlohmann::json req = {{"text", prompt}};
  return parse_embedding(post("/encode_text", req.dump()), width_);
}

std::string prompt_for(const std::string& phrase) { return "a photo of a face with " + phrase; }

VLEncoderPair make_vl_pair(const PipelineConfig& config, const ComponentSchema& schema,
                           const SyntheticFaceSpec& face_spec) {
  VLEncoderPair pair;
  if (config.vl.kind == "http") {
    auto client = std::make_shared<HttpVLClient>(config.vl.endpoint, config.vl.auth_token, config.vl.timeout_ms);
    if (client->width() != config.model.vl_dim) {
      throw ValidationError("model.vl_dim", "must equal the VL service width " + std::to_string(client->width()));
    }
    pair.image = client;
    pair.text = std::make_shared<CachingTextEncoder>(client);
    return pair;
  }
  if (config.vl.kind != "prototype") {
    throw ValidationError("vl.kind", "expected 'prototype' or 'http', got '" + config.vl.kind + "'");
  }
  if (face_spec.canvas != config.input_size) {
    throw ValidationError("input_size", "prototype VL encoder needs the synthetic canvas size");
  }
  const int k_count = schema.size();
  std::vector<std::string> prompts;
  for (int k = 0; k < k_count; ++k) prompts.push_back(prompt_for(schema.phrase(k)));
  auto text = std::make_shared<CachingTextEncoder>(
      std::make_shared<OrthogonalTextEncoder>(config.model.vl_dim, prompts, fnv1a64("prototype-text-encoder")));

  const Sample mean = render_mean_face(face_spec);
  const int bg = face_spec.schema.background_id();
  std::vector<int> source(k_count + 1, bg);
  for (int k = 0; k < k_count; ++k) {
    auto idx = face_spec.schema.index_of(schema.name(k));
    if (!idx) {
      throw ValidationError("vl.kind", "prototype encoder has no prototype for '" + schema.name(k) +
                                           "'; use vl.kind=http for this schema");
    }
    source[k] = *idx;
  }
  std::vector<Image> prototypes;
  Matrix<double> targets(k_count + 1, config.model.vl_dim);
  for (int j = 0; j <= k_count; ++j) {
    std::vector<double> region(mean.mask.labels.size());
    for (std::size_t i = 0; i < region.size(); ++i) region[i] = mean.mask.labels[i] == source[j] ? 1.0 : 0.0;
    prototypes.push_back(masked_copy(mean.face.pixels, region));
    if (j < k_count) {
      const std::vector<double> t = text->encode(prompts[j]);
      for (int i = 0; i < config.model.vl_dim; ++i) targets(j, i) = t[i];
    }
  }
  const int grid = config.vl.pool_grid > 0 ? config.vl.pool_grid : config.patch_grid();
  pair.image = std::make_shared<PooledLinearImageEncoder>(PooledLinearImageEncoder::fit(grid, prototypes, targets));
  pair.text = text;
  return pair;
}

Matrix<double> encode_prompts(const ComponentSchema& schema, const TextEncoder& text) {
  Matrix<double> out(schema.size(), text.width());
  for (int k = 0; k < schema.size(); ++k) {
    const std::vector<double> v = text.encode(prompt_for(schema.phrase(k)));
    if (static_cast<int>(v.size()) != text.width()) throw ShapeError("text encoder width mismatch");
    for (int i = 0; i < text.width(); ++i) out(k, i) = v[i];
  }
  return out;
}

std::vector<double> upsample_nearest(std::span<const double> map, int grid, int height, int width) {
  if (map.size() != static_cast<std::size_t>(grid) * grid) throw ShapeError("upsample: map is not grid x grid");
  std::vector<double> out(static_cast<std::size_t>(height) * width);
  for (int y = 0; y < height; ++y) {
    const int gy = static_cast<int>(static_cast<long>(y) * grid / height);
    for (int x = 0; x < width; ++x) {
      const int gx = static_cast<int>(static_cast<long>(x) * grid / width);
      out[static_cast<std::size_t>(y) * width + x] = map[gy * grid + gx];
    }
  }
  return out;
}

template <typename T>
ComponentVectors<T> encode_components(Graph<T>& graph, Var<T> image, int height, int width, Var<T> p,
                                      const ImageEncoder& encoder, bool need_ffc, bool need_bfc) {
  (void)graph;
  const int k_count = p.rows();
  const int n = p.cols();
  const int grid = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n))));
  if (grid * grid != n || height % grid || width % grid || height / grid != width / grid) {
    throw ShapeError("encode_components: attention map does not tile the image");
  }
  ad::IndexMap up = ad::upsample_index(grid, grid, 1, height / grid);
  std::vector<Var<T>> ffc, bfc;
  for (int k = 0; k < k_count; ++k) {
    Var<T> pk = ad::gather(ad::slice_rows(p, k, 1), height * width, 1, up);
    try {
      if (need_ffc) ffc.push_back(encoder.encode(graph, ad::mul_col(image, pk), height, width));
      if (need_bfc) bfc.push_back(encoder.encode(graph, ad::mul_col(image, ad::one_minus(pk)), height, width));
    } catch (const ClientError& e) {
      throw ClientError("encoding component " + std::to_string(k) + ": " + e.what(), e.retryable());
    } catch (const Error& e) {
      throw Error("encoding component " + std::to_string(k) + ": " + e.what());
    }
  }
  ComponentVectors<T> out;
  if (need_ffc) out.v_ffc = ad::concat_rows<T>(ffc);
  if (need_bfc) out.v_bfc = ad::concat_rows<T>(bfc);
  return out;
}

ComponentValues encode_components(const Image& image, const Matrix<double>& p, const ImageEncoder& encoder) {
  const int grid = static_cast<int>(std::lround(std::sqrt(static_cast<double>(p.cols))));
  if (grid * grid != p.cols) throw ShapeError("encode_components: attention map is not square");
  ComponentValues out{Matrix<double>(p.rows, encoder.width()), Matrix<double>(p.rows, encoder.width())};
  for (int k = 0; k < p.rows; ++k) {
    std::vector<double> up = upsample_nearest(p.row(k), grid, image.height, image.width);
    std::vector<double> ffc, bfc;
    try {
      ffc = encoder.encode(masked_copy(image, up));
      for (double& v : up) v = 1.0 - v;
      bfc = encoder.encode(masked_copy(image, up));
    } catch (const ClientError& e) {
      throw ClientError("encoding component " + std::to_string(k) + ": " + e.what(), e.retryable());
    } catch (const Error& e) {
      throw Error("encoding component " + std::to_string(k) + ": " + e.what());
    }
    for (int i = 0; i < encoder.width(); ++i) {
      out.v_ffc(k, i) = ffc[i];
      out.v_bfc(k, i) = bfc[i];
    }
  }
  return out;
}

template ComponentVectors<float> encode_components<float>(Graph<float>&, Var<float>, int, int, Var<float>,
                                                          const ImageEncoder&, bool, bool);
template ComponentVectors<double> encode_components<double>(Graph<double>&, Var<double>, int, int, Var<double>,
                                                            const ImageEncoder&, bool, bool);

}  // namespace disfacerep

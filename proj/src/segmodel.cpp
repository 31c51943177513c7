#include "disfacerep/segmodel.hpp"

#include <cmath>

#include "disfacerep/error.hpp"
#include "disfacerep/optim.hpp"
#include "disfacerep/parallel.hpp"
#include "disfacerep/rng.hpp"

namespace disfacerep {
namespace {

ad::Matrix<float> he_init(int rows, int cols, Rng& rng) {
  ad::Matrix<float> m(rows, cols);
  const double std = std::sqrt(2.0 / rows);
  for (float& v : m.data) v = static_cast<float>(rng.normal() * std);
  return m;
}

ad::Var<float> conv3x3(ad::Var<float> x, int size, ad::Var<float> w, ad::Var<float> b) {
  const int c = x.cols();
  ad::Var<float> cols = ad::gather(x, size * size, 9 * c, ad::im2col3x3_index(size, size, c));
  return ad::relu(ad::add_row(ad::matmul(cols, w), b));
}

}  // namespace

SegModel::SegModel(SegModelSpec spec, std::uint64_t seed) : spec_(spec) {
  if (spec_.image_size % 4 != 0) throw ValidationError("input_size", "parser needs a multiple of 4");
  if (spec_.num_classes < 2) throw ValidationError("num_classes", "parser needs at least two classes");
  Rng rng = Rng(seed).substream("parser-init");
  const int w = spec_.width, c = spec_.channels, k = spec_.num_classes;
  params_.add("enc1.w", he_init(9 * c, w, rng));
  params_.add("enc1.b", ad::Matrix<float>(1, w));
  params_.add("enc2.w", he_init(9 * w, 2 * w, rng));
  params_.add("enc2.b", ad::Matrix<float>(1, 2 * w));
  params_.add("enc3.w", he_init(18 * w, 2 * w, rng));
  params_.add("enc3.b", ad::Matrix<float>(1, 2 * w));
  params_.add("head1.w", he_init(w, k, rng));
  params_.add("head2.w", he_init(2 * w, k, rng));
  params_.add("head3.w", he_init(2 * w, k, rng));
  params_.add("head.b", ad::Matrix<float>(1, k));
}

SegModel::SegModel(SegModelSpec spec, nn::ParamStore<float> params) : spec_(spec), params_(std::move(params)) {}

ad::Var<float> SegModel::forward(ad::Graph<float>& /*graph*/, const nn::BoundParams<float>& p,
                                 ad::Var<float> image) const {
  const int s = spec_.image_size, k = spec_.num_classes;
  if (image.rows() != s * s || image.cols() != spec_.channels) throw ShapeError("parser: image has the wrong shape");
  ad::Var<float> c1 = conv3x3(image, s, p["enc1.w"], p["enc1.b"]);
  ad::Var<float> c2 = conv3x3(ad::block_mean_pool(c1, s, s, s / 2), s / 2, p["enc2.w"], p["enc2.b"]);
  ad::Var<float> c3 = conv3x3(ad::block_mean_pool(c2, s / 2, s / 2, s / 4), s / 4, p["enc3.w"], p["enc3.b"]);
  ad::Var<float> l1 = ad::add_row(ad::matmul(c1, p["head1.w"]), p["head.b"]);
  ad::Var<float> l2 = ad::gather(ad::matmul(c2, p["head2.w"]), s * s, k, ad::upsample_index(s / 2, s / 2, k, 2));
  ad::Var<float> l3 = ad::gather(ad::matmul(c3, p["head3.w"]), s * s, k, ad::upsample_index(s / 4, s / 4, k, 4));
  return ad::add(ad::add(l1, l2), l3);
}

SegMask SegModel::predict(const Image& image) const {
  ad::Graph<float> g;
  nn::BoundParams<float> p(g, params_, false);
  const ad::Matrix<float>& logits = forward(g, p, g.constant(nn::image_matrix<float>(image))).value();
  SegMask m(image.height, image.width, 0);
  for (int i = 0; i < logits.rows; ++i) {
    int best = 0;
    for (int c = 1; c < logits.cols; ++c) {
      if (logits(i, c) > logits(i, best)) best = c;
    }
    m.labels[i] = static_cast<std::uint8_t>(best);
  }
  return m;
}

ParserOutcome train_parser(const std::vector<ParserSample>& samples, int num_classes, const PipelineConfig& config) {
  if (samples.empty()) throw DataError("parser training set is empty");
  SegModelSpec spec{config.input_size, 3, config.parser.width, num_classes};
  ParserOutcome out{SegModel(spec, config.seed), {}};
  SegModel& model = out.model;
  AdamW<float> adam;
  adam.lr = config.parser.lr;
  adam.weight_decay = config.train.weight_decay;
  adam.init_like(model.params());
  const int n = static_cast<int>(samples.size());
  const int batch = std::max(1, config.parser.batch_size);
  long step = 0;
  for (const ParserSample& s : samples) {
    if (s.image.height != spec.image_size || s.image.width != spec.image_size) {
      throw ShapeError("parser sample is not " + std::to_string(spec.image_size) + " pixels square");
    }
  }
  for (int epoch = 0; epoch < config.parser.epochs; ++epoch) {
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    Rng rng = Rng(config.seed).substream("parser-batches").substream(static_cast<std::uint64_t>(epoch));
    for (int i = n - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_int(i + 1)]);
    for (int begin = 0; begin < n; begin += batch) {
      const int bs = std::min(batch, n - begin);
      std::vector<std::map<std::string, ad::Matrix<float>>> grads(bs);
      std::vector<double> losses(bs);
      parallel_for(bs, config.workers, [&](int i) {
        const ParserSample& s = samples[order[begin + i]];
        ad::Graph<float> g;
        nn::BoundParams<float> p(g, model.params(), true);
        ad::Var<float> logits = model.forward(g, p, g.constant(nn::image_matrix<float>(s.image)));
        std::vector<int> targets(s.target.labels.begin(), s.target.labels.end());
        ad::Var<float> loss = ad::softmax_cross_entropy(logits, targets);
        g.backward(loss);
        losses[i] = loss.item();
        grads[i] = p.gradients();
      });
      std::map<std::string, ad::Matrix<double>> sum;
      double loss = 0;
      for (int i = 0; i < bs; ++i) {
        loss += losses[i] / bs;
        for (const auto& [name, gm] : grads[i]) {
          auto [it, fresh] = sum.try_emplace(name, gm.rows, gm.cols);
          for (std::size_t j = 0; j < gm.size(); ++j) it->second.data[j] += gm.data[j] / bs;
        }
      }
      adam.step(model.params(), sum, ++step);
      out.losses.push_back(loss);
    }
  }
  return out;
}

void save_parser(const std::string& path, const SegModel& model) {
  Checkpoint ckpt;
  const SegModelSpec& s = model.spec();
  ckpt.meta = {{"kind", "parser"},
               {"image_size", s.image_size},
               {"channels", s.channels},
               {"width", s.width},
               {"num_classes", s.num_classes}};
  put_tensors(ckpt, "", model.params().all());
  save_checkpoint(path, ckpt);
}

SegModel load_parser(const std::string& path) {
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.meta.value("kind", "") != "parser") throw DataError("'" + path + "' is not a parser model");
  SegModelSpec s{ckpt.meta.at("image_size"), ckpt.meta.at("channels"), ckpt.meta.at("width"),
                 ckpt.meta.at("num_classes")};
  nn::ParamStore<float> params;
  for (auto& [name, m] : take_tensors<float>(ckpt, "")) params.add(name, std::move(m));
  return SegModel(s, std::move(params));
}

}  // namespace disfacerep

#include <doctest.h>

#include <cmath>

#include "disfacerep/encoders.hpp"
#include "disfacerep/error.hpp"
#include "disfacerep/synthetic.hpp"
#include "disfacerep/trainer.hpp"
#include "disfacerep/vl.hpp"
#include "gradcheck.hpp"
#include "helpers.hpp"

using namespace disfacerep;
using ad::Graph;

namespace {

nn::BackboneSpec small_backbone(bool pos_embed) {
  nn::BackboneSpec s;
  s.image_size = 8;
  s.channels = 3;
  s.patch = 2;
  s.embed_dim = 6;
  s.num_classes = 3;
  s.layers = 2;
  s.pos_embed = pos_embed;
  return s;
}

Image random_image(int size, Rng& rng) {
  Image img(size, size, 3);
  for (float& v : img.data) v = static_cast<float>(rng.uniform());
  return img;
}

nn::BackboneOutput<double> run_backbone(Graph<double>& g, const nn::ParamStore<double>& store,
                                        const nn::BackboneSpec& spec, const Image& img) {
  nn::BoundParams<double> p(g, store, false);
  return nn::forward_backbone(g, p, spec, g.constant(nn::image_matrix<double>(img)));
}

std::vector<double> layer_norm(std::span<const double> x) {
  double mean = 0, var = 0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  std::vector<double> out;
  for (double v : x) out.push_back((v - mean) / std::sqrt(var + 1e-5));
  return out;
}

}  // namespace

TEST_SUITE("encoders") {

TEST_CASE("project_class identity, zero and matmul oracle") {
  Rng rng(1);
  const auto f = testutil::random_matrix(3, 4, rng);
  Matrix<double> eye(4, 4);
  for (int i = 0; i < 4; ++i) eye(i, i) = 1;
  CHECK(nn::project_class(f, eye) == f);
  const auto w = testutil::random_matrix(4, 2, rng);
  const auto zero = nn::project_class(Matrix<double>(3, 4), w);
  for (double v : zero.data) CHECK(v == 0.0);
  const auto v = nn::project_class(f, w);
  for (int k = 0; k < 3; ++k) {
    for (int j = 0; j < 2; ++j) {
      double s = 0;
      for (int i = 0; i < 4; ++i) s += f(k, i) * w(i, j);
      CHECK(std::abs(v(k, j) - s) <= 1e-6);
    }
  }
  CHECK_THROWS_AS(nn::project_class(f, testutil::random_matrix(3, 2, rng)), ShapeError);
}

TEST_CASE("patch_attention zero head, bias limit and conv oracle") {
  Rng rng(2);
  const auto f = testutil::random_matrix(16, 5, rng);
  const auto half = nn::patch_attention(f, Matrix<double>(5, 3), Matrix<double>(1, 3));
  CHECK(half.rows == 3);
  CHECK(half.cols == 16);
  for (double v : half.data) CHECK(v == 0.5);

  const auto w = testutil::random_matrix(5, 3, rng);
  double prev = 0;
  for (double b = 0; b <= 30; b += 2) {
    const auto p = nn::patch_attention(f, w, Matrix<double>(1, 3, b));
    CHECK(p(0, 0) >= prev);
    prev = p(0, 0);
  }
  CHECK(prev > 0.999);

  const auto b = testutil::random_matrix(1, 3, rng);
  const auto p = nn::patch_attention(f, w, b);
  for (int k = 0; k < 3; ++k) {
    for (int n = 0; n < 16; ++n) {
      double z = b(0, k);
      for (int i = 0; i < 5; ++i) z += f(n, i) * w(i, k);
      CHECK(std::abs(p(k, n) - 1.0 / (1.0 + std::exp(-z))) <= 1e-6);
      CHECK(p(k, n) > 0.0);
      CHECK(p(k, n) < 1.0);
    }
  }
}

TEST_CASE("zero image through zero attention keeps the class-token rows") {
  const auto spec = small_backbone(true);
  nn::ParamStore<double> store;
  Rng rng(3);
  nn::init_backbone(store, spec, rng, 0.5);
  for (auto& [name, m] : store.all()) {
    if (name.find(".attn.") != std::string::npos || name.find(".mlp.w") != std::string::npos) {
      std::fill(m.data.begin(), m.data.end(), 0.0);
    }
  }
  Graph<double> g;
  const auto out = run_backbone(g, store, spec, Image(8, 8, 3, 0.0f));
  const auto& cls = store.at("backbone.cls_tokens");
  for (int k = 0; k < spec.num_classes; ++k) {
    const auto expect = layer_norm(cls.row(k));
    for (int i = 0; i < spec.embed_dim; ++i) CHECK(out.f_cls.value()(k, i) == doctest::Approx(expect[i]).epsilon(1e-12));
  }
  // Patch rows reduce to the positional path; attention is uniform.
  const auto& pos = store.at("backbone.pos_embed");
  for (int n = 0; n < spec.num_patches(); ++n) {
    const auto expect = layer_norm(pos.row(n));
    for (int i = 0; i < spec.embed_dim; ++i) CHECK(out.f_pat.value()(n, i) == doctest::Approx(expect[i]).epsilon(1e-12));
  }
  for (double a : out.class_to_patch[0].data) CHECK(a == doctest::Approx(1.0 / (3 + 16)).epsilon(1e-12));
}

TEST_CASE("identical images give identical tokens") {
  const auto spec = small_backbone(true);
  nn::ParamStore<double> store;
  Rng rng(4);
  nn::init_backbone(store, spec, rng, 0.3);
  const Image img = random_image(8, rng);
  Graph<double> g1, g2;
  CHECK(run_backbone(g1, store, spec, img).f_cls.value() == run_backbone(g2, store, spec, img).f_cls.value());
  Graph<double> g3;
  CHECK_THROWS_AS(run_backbone(g3, store, spec, Image(4, 4, 3)), ShapeError);
}

TEST_CASE("without positions, swapping two patches swaps their token rows") {
  const auto spec = small_backbone(false);
  nn::ParamStore<double> store;
  Rng rng(5);
  nn::init_backbone(store, spec, rng, 0.3);
  const Image img = random_image(8, rng);
  // Swap patch (0,0) with patch (2,3) on the 4x4 patch grid.
  Image swapped = img;
  for (int dy = 0; dy < 2; ++dy) {
    for (int dx = 0; dx < 2; ++dx) {
      for (int c = 0; c < 3; ++c) std::swap(swapped.at(dy, dx, c), swapped.at(4 + dy, 6 + dx, c));
    }
  }
  Graph<double> g1, g2;
  const auto a = run_backbone(g1, store, spec, img);
  const auto b = run_backbone(g2, store, spec, swapped);
  const int p0 = 0, p1 = 2 * 4 + 3;
  for (int n = 0; n < 16; ++n) {
    const int src = n == p0 ? p1 : n == p1 ? p0 : n;
    for (int i = 0; i < spec.embed_dim; ++i) {
      CHECK(b.f_pat.value()(n, i) == doctest::Approx(a.f_pat.value()(src, i)).epsilon(1e-10));
    }
  }
  for (std::size_t i = 0; i < a.f_cls.value().size(); ++i) {
    CHECK(b.f_cls.value().data[i] == doctest::Approx(a.f_cls.value().data[i]).epsilon(1e-10));
  }
}

TEST_CASE("classifier outputs have the documented shapes and ranges") {
  PipelineConfig c = gradcheck::tiny_config();
  nn::Classifier<double> model(nn::ClassifierSpec::from_config(c, 9), 1, 2.0);
  Graph<double> g;
  nn::BoundParams<double> p(g, model.params(), false);
  Rng rng(6);
  const auto out = model.forward(g, p, g.constant(nn::image_matrix<double>(random_image(16, rng))));
  CHECK(out.v_cls.rows() == 9);
  CHECK(out.v_cls.cols() == 12);
  CHECK(out.p.rows() == 9);
  CHECK(out.p.cols() == 16);
  CHECK(out.logits.rows() == 9);
  CHECK(out.patch_logits.rows() == 9);
  for (double v : out.p.value().data) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("total-loss gradients match central differences") {
  const auto r = gradcheck::run(20, 1);
  CHECK(r.coordinates == 20);
  INFO("worst coordinate " << r.worst_name);
  CHECK(r.worst_rel <= 1e-4);
}

TEST_CASE("encode_components saturation and symmetry") {
  Rng rng(7);
  const int grid = 2, size = 8;
  Matrix<double> proj = testutil::random_matrix(5, grid * grid * 3, rng);
  PooledLinearImageEncoder enc(grid, 3, proj);
  const Image img = random_image(size, rng);
  const auto full = encode_components(img, Matrix<double>(2, 16, 1.0), enc);
  const auto zero = encode_components(img, Matrix<double>(2, 16, 0.0), enc);
  const auto x = enc.encode(img);
  const auto blank = enc.encode(Image(size, size, 3, 0.0f));
  for (int k = 0; k < 2; ++k) {
    for (int i = 0; i < 5; ++i) {
      CHECK(full.v_ffc(k, i) == doctest::Approx(x[i]).epsilon(1e-6));
      CHECK(full.v_bfc(k, i) == doctest::Approx(blank[i]).epsilon(1e-6));
      CHECK(zero.v_ffc(k, i) == doctest::Approx(full.v_bfc(k, i)).epsilon(1e-12));
      CHECK(zero.v_bfc(k, i) == doctest::Approx(full.v_ffc(k, i)).epsilon(1e-12));
    }
  }
}

TEST_CASE("checkerboard P matches hand pooling") {
  // Average-pool encoder (grid 1) with identity projection.
  const int size = 8;
  Matrix<double> eye(3, 3);
  for (int i = 0; i < 3; ++i) eye(i, i) = 1;
  PooledLinearImageEncoder enc(1, 3, eye);
  Image img(size, size, 3);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<float>((y * size + x + c) % 7) / 7.0f;
    }
  }
  // 4x4 patch grid, checkerboard 0.9 / 0.2.
  Matrix<double> p(1, 16);
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) p(0, r * 4 + c) = (r + c) % 2 ? 0.2 : 0.9;
  }
  const auto v = encode_components(img, p, enc);
  for (int c = 0; c < 3; ++c) {
    double fg = 0, bg = 0;
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const double w = ((y / 2 + x / 2) % 2) ? 0.2 : 0.9;
        fg += img.at(y, x, c) * w;
        bg += img.at(y, x, c) * (1 - w);
      }
    }
    CHECK(std::abs(v.v_ffc(0, c) - fg / 64) <= 1e-6);
    CHECK(std::abs(v.v_bfc(0, c) - bg / 64) <= 1e-6);
  }
}

TEST_CASE("graph and value forms of encode_components agree") {
  Rng rng(8);
  PooledLinearImageEncoder enc(2, 3, testutil::random_matrix(4, 12, rng));
  const Image img = random_image(8, rng);
  Matrix<double> p(3, 16);
  for (double& v : p.data) v = rng.uniform();
  const auto value = encode_components(img, p, enc);
  Graph<double> g;
  const auto vars = encode_components<double>(g, g.constant(nn::image_matrix<double>(img)), 8, 8, g.constant(p), enc);
  // The value form masks a float32 image copy.
  for (std::size_t i = 0; i < value.v_ffc.size(); ++i) {
    CHECK(std::abs(vars.v_ffc.value().data[i] - value.v_ffc.data[i]) <= 1e-6);
    CHECK(std::abs(vars.v_bfc.value().data[i] - value.v_bfc.data[i]) <= 1e-6);
  }
}

TEST_CASE("prompts use the template, are cached and orthogonal") {
  const auto schema = ComponentSchema::synthetic();
  CHECK(prompt_for("nose") == "a photo of a face with nose");
  std::vector<std::string> prompts;
  for (int k = 0; k < schema.size(); ++k) prompts.push_back(prompt_for(schema.phrase(k)));
  auto inner = std::make_shared<OrthogonalTextEncoder>(16, prompts, 3);
  CachingTextEncoder text(inner);
  const auto a = encode_prompts(schema, text);
  const auto b = encode_prompts(schema, text);
  CHECK(a == b);
  CHECK(text.misses() == schema.size());
  const int nose = *schema.index_of("nose");
  const auto direct = inner->encode("a photo of a face with nose");
  for (int i = 0; i < 16; ++i) CHECK(a(nose, i) == direct[i]);
  for (int k = 0; k < schema.size(); ++k) {
    for (int l = 0; l < schema.size(); ++l) {
      double dot = 0;
      for (int i = 0; i < 16; ++i) dot += a(k, i) * a(l, i);
      CHECK(dot == doctest::Approx(k == l ? 1.0 : 0.0).epsilon(1e-12));
    }
  }
  ComponentSchema unmapped({"skin", "widget"}, {});
  CHECK_THROWS_AS(encode_prompts(unmapped, text), ValidationError);
}

TEST_CASE("prototype image encoder maps component prototypes onto their prompts") {
  PipelineConfig c = gradcheck::tiny_config();
  c.input_size = 32;
  c.patch_count = 64;
  const auto spec = SyntheticFaceSpec::default_faces(32);
  const auto vl = make_vl_pair(c, spec.schema, spec);
  CHECK(vl.frozen);
  CHECK(vl.image->differentiable());
  const auto v_txt = encode_prompts(spec.schema, *vl.text);
  const Sample mean = render_mean_face(spec);
  for (int k = 0; k < spec.schema.size(); ++k) {
    Image region = mean.face.pixels;
    for (int y = 0; y < 32; ++y) {
      for (int x = 0; x < 32; ++x) {
        if (mean.mask.at(y, x) != k) {
          for (int ch = 0; ch < 3; ++ch) region.at(y, x, ch) = 0;
        }
      }
    }
    const auto e = vl.image->encode(region);
    for (int i = 0; i < c.model.vl_dim; ++i) CHECK(std::abs(e[i] - v_txt(k, i)) <= 1e-6);
  }
  PipelineConfig narrow = c;
  narrow.model.vl_dim = 4;
  CHECK_THROWS_AS(make_vl_pair(narrow, spec.schema, spec), ValidationError);
}

TEST_CASE("a training step leaves the VL encoders untouched") {
  PipelineConfig c = gradcheck::tiny_config();
  c.precision = "float32";
  c.train.epochs = 1;
  c.train.batch_size = 2;
  const auto spec = SyntheticFaceSpec::default_faces(16);
  const auto vl = make_vl_pair(c, spec.schema, spec);
  const auto* enc = dynamic_cast<const PooledLinearImageEncoder*>(vl.image.get());
  REQUIRE(enc != nullptr);
  const Matrix<double> before = enc->projection();
  const auto txt_before = encode_prompts(spec.schema, *vl.text);
  const auto corpus = generate_synthetic(spec, 2, Rng(1));
  std::vector<LabeledFace> faces = {corpus[0].face, corpus[1].face};
  train_classifier(faces, spec.schema, c, vl);
  CHECK(enc->projection() == before);
  CHECK(encode_prompts(spec.schema, *vl.text) == txt_before);
}

TEST_CASE("upsample_nearest repeats each cell") {
  const std::vector<double> map = {1, 2, 3, 4};
  const auto up = upsample_nearest(map, 2, 4, 4);
  CHECK(up == std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4});
}

}  // TEST_SUITE

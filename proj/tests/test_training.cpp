#include <doctest.h>

#include "disfacerep/checkpoint.hpp"
#include "disfacerep/error.hpp"
#include "disfacerep/image_io.hpp"
#include "disfacerep/synthetic.hpp"
#include "disfacerep/trainer.hpp"
#include "gradcheck.hpp"
#include "helpers.hpp"

using namespace disfacerep;
using testutil::TempDir;

namespace {

PipelineConfig small_config() {
  PipelineConfig c;
  c.input_size = 16;
  c.patch_count = 16;
  c.embed_dim = 8;
  c.model.vl_dim = 12;
  c.model.init_std = 0.2;
  c.train.batch_size = 2;
  c.train.lr = 1e-2;
  return c;
}

std::vector<LabeledFace> faces(const SyntheticFaceSpec& spec, int n, std::uint64_t seed) {
  std::vector<LabeledFace> out;
  for (const auto& s : generate_synthetic(spec, n, Rng(seed))) out.push_back(s.face);
  return out;
}

// Opaque encoder standing in for a remote service.
class OpaqueEncoder : public ImageEncoder {
 public:
  int width() const override { return 12; }
  bool differentiable() const override { return false; }
  std::vector<double> encode(const Image&) const override { return std::vector<double>(12, 0.1); }
  using ImageEncoder::encode;
};

}  // namespace

TEST_SUITE("training") {

TEST_CASE("objective drops over 200 steps on two faces") {
  PipelineConfig c = small_config();
  c.train.epochs = 200;
  const auto spec = SyntheticFaceSpec::default_faces(16);
  const auto vl = make_vl_pair(c, spec.schema, spec);
  const auto out = train_classifier(faces(spec, 2, 1), spec.schema, c, vl);
  REQUIRE(out.steps.size() == 200);
  CHECK(out.steps.front().step == 1);
  CHECK(out.steps.back().loss.objective < out.steps.front().loss.objective);
}

TEST_CASE("a small step against the gradient lowers the loss") {
  const PipelineConfig c = gradcheck::tiny_config();
  const auto spec = SyntheticFaceSpec::default_faces(16);
  Rng rng(2);
  const Sample s = generate_face(spec, rng, "step");
  const auto vl = make_vl_pair(c, spec.schema, spec);
  const auto v_txt = encode_prompts(spec.schema, *vl.text);
  nn::Classifier<double> model(nn::ClassifierSpec::from_config(c, spec.schema.size()), 2, c.model.init_std);
  const auto before = sample_loss<double>(model, model.params(), s.face, v_txt, *vl.image, c, true);
  for (auto& [name, p] : model.params().all()) {
    const auto& g = before.gradients.at(name);
    for (std::size_t i = 0; i < p.size(); ++i) p.data[i] -= 1e-4 * g.data[i];
  }
  const auto after = sample_loss<double>(model, model.params(), s.face, v_txt, *vl.image, c, false);
  CHECK(after.breakdown.total < before.breakdown.total);
}

TEST_CASE("resuming replays the uninterrupted run") {
  PipelineConfig c = small_config();
  c.train.schedule = "constant";
  c.train.epochs = 4;
  const auto spec = SyntheticFaceSpec::default_faces(16);
  const auto vl = make_vl_pair(c, spec.schema, spec);
  const auto data = faces(spec, 4, 3);
  const auto full = train_classifier(data, spec.schema, c, vl);

  TempDir dir("resume");
  PipelineConfig half = c;
  half.train.epochs = 2;
  TrainIO io;
  io.checkpoint_path = dir / "state.ckpt";
  io.log_path = dir / "log.jsonl";
  train_classifier(data, spec.schema, half, vl, io);
  TrainIO again;
  again.resume_from = dir / "state.ckpt";
  again.log_path = dir / "log.jsonl";
  const auto resumed = train_classifier(data, spec.schema, c, vl, again);

  REQUIRE(full.steps.size() == 8);
  REQUIRE(resumed.steps.size() == 4);
  for (int i = 0; i < 4; ++i) {
    CHECK(resumed.steps[i].step == full.steps[4 + i].step);
    CHECK(resumed.steps[i].loss.objective == doctest::Approx(full.steps[4 + i].loss.objective).epsilon(1e-5));
  }
  for (const auto& [name, p] : full.model.params().all()) {
    const auto& q = resumed.model.params().all().at(name);
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(std::abs(p.data[i] - q.data[i]) <= 1e-5);
  }
  const std::string log = read_file(dir / "log.jsonl");
  CHECK(std::count(log.begin(), log.end(), '\n') == 8);

  PipelineConfig other = c;
  other.embed_dim = 12;
  CHECK_THROWS_AS(train_classifier(data, spec.schema, other, vl, again), ValidationError);
}

TEST_CASE("training is deterministic and checkpoints round trip") {
  PipelineConfig c = small_config();
  c.train.epochs = 2;
  const auto spec = SyntheticFaceSpec::default_faces(16);
  const auto vl = make_vl_pair(c, spec.schema, spec);
  const auto data = faces(spec, 4, 4);
  const auto a = train_classifier(data, spec.schema, c, vl);
  c.workers = 3;
  const auto b = train_classifier(data, spec.schema, c, vl);
  TempDir dir("ckpt");
  save_model(dir / "a.ckpt", a.model, spec.schema, c);
  save_model(dir / "b.ckpt", b.model, spec.schema, c);
  CHECK(sha256_file(dir / "a.ckpt") == sha256_file(dir / "b.ckpt"));

  std::vector<std::string> names;
  const auto back = load_model(dir / "a.ckpt", &names);
  CHECK(names == spec.schema.names());
  CHECK(back.spec() == a.model.spec());
  CHECK(back.params().all() == a.model.params().all());
  CHECK(serialize_checkpoint(model_checkpoint(back, spec.schema, c)) ==
        serialize_checkpoint(model_checkpoint(a.model, spec.schema, c)));
}

TEST_CASE("non-differentiable image encoders reject patch-level terms") {
  PipelineConfig c = small_config();
  const auto spec = SyntheticFaceSpec::default_faces(16);
  const auto vl = make_vl_pair(c, spec.schema, spec);
  const auto v_txt = encode_prompts(spec.schema, *vl.text);
  const OpaqueEncoder opaque;
  nn::Classifier<float> model(nn::ClassifierSpec::from_config(c, spec.schema.size()), 5, 0.2);
  Rng rng(5);
  const Sample s = generate_face(spec, rng, "opaque");
  CHECK_THROWS_AS(sample_loss<float>(model, model.params(), s.face, v_txt, opaque, c, true), ValidationError);
  c.alpha1 = c.beta1 = c.beta2 = 0;
  const auto ok = sample_loss<float>(model, model.params(), s.face, v_txt, opaque, c, true);
  CHECK(ok.breakdown.pos_ffc == 0.0);
  CHECK(std::isfinite(ok.breakdown.total));
}

TEST_CASE("bad training inputs") {
  PipelineConfig c = small_config();
  const auto spec = SyntheticFaceSpec::default_faces(16);
  const auto vl = make_vl_pair(c, spec.schema, spec);
  CHECK_THROWS_AS(train_classifier({}, spec.schema, c, vl), DataError);
  auto data = faces(spec, 2, 6);
  data[1].label.pop_back();
  CHECK_THROWS_AS(train_classifier(data, spec.schema, c, vl), ShapeError);
}

}  // TEST_SUITE

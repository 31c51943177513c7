#include <doctest.h>

#include <httplib.h>

#include <atomic>
#include <json.hpp>
#include <thread>

#include "disfacerep/ccd.hpp"
#include "disfacerep/cooccur.hpp"
#include "disfacerep/error.hpp"
#include "disfacerep/synthetic.hpp"
#include "helpers.hpp"

using namespace disfacerep;

namespace {

const ComponentSchema& syn() {
  static const ComponentSchema s = ComponentSchema::synthetic();
  return s;
}

int idx(const char* name) { return *syn().index_of(name); }

Detection det(const char* name, double w1, double w2, double conf, double h1 = 10, double h2 = 20) {
  return {idx(name), {h1, w1, h2, w2}, conf};
}

class FixedClient : public DetectionClient {
 public:
  explicit FixedClient(std::vector<RawDetection> out) : out_(std::move(out)) {}
  std::vector<RawDetection> query(const LabeledFace&, const std::vector<std::string>&) const override { return out_; }

 private:
  std::vector<RawDetection> out_;
};

class FailingClient : public DetectionClient {
 public:
  std::vector<RawDetection> query(const LabeledFace&, const std::vector<std::string>&) const override {
    throw ClientError("detector down", true);
  }
};

LabeledFace random_face(int size, Rng& rng) {
  LabeledFace f;
  f.id = "f";
  f.pixels = Image(size, size, 3);
  for (float& v : f.pixels.data) v = static_cast<float>(rng.uniform(0.01, 1.0));
  f.label = Label(syn().size(), 1);
  return f;
}

// Local detection service; fails the first `failures` requests with 503.
struct DetectorServer {
  httplib::Server server;
  std::thread thread;
  int port = 0;
  std::atomic<int> requests{0};
  std::string last_auth;

  explicit DetectorServer(int failures, int delay_ms = 0) {
    server.Post("/detect", [this, failures, delay_ms](const httplib::Request& req, httplib::Response& res) {
      const int n = requests++;
      last_auth = req.get_header_value("Authorization");
      if (delay_ms) std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms));
      if (n < failures) {
        res.status = 503;
        return;
      }
      const auto body = nlohmann::json::parse(req.body);
      nlohmann::json dets = nlohmann::json::array();
      for (const auto& p : body.at("phrases")) {
        dets.push_back({{"phrase", p.get<std::string>() + " "}, {"box", {1, 2, 5, 6}}, {"confidence", 0.8}});
      }
      dets.push_back({{"phrase", "tail"}, {"box", {0, 0, 1, 1}}, {"confidence", 0.9}});
      res.set_content(nlohmann::json{{"detections", dets}}.dump(), "application/json");
    });
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  ~DetectorServer() {
    server.stop();
    thread.join();
  }
  std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port); }
};

}  // namespace

TEST_SUITE("ccd") {

TEST_CASE("filter_boxes worked examples") {
  const std::vector<double> two = {0.5, 0.3};
  auto out = filter_boxes({det("r_eye", 100, 150, 0.9)}, 448, two, syn());
  REQUIRE(out.size() == 1);
  CHECK(out[0].box.w1 == 100);

  // First box fails geometry at 0.5, second accepted at 0.3.
  out = filter_boxes({det("r_eye", 300, 350, 0.9), det("r_eye", 100, 150, 0.4)}, 448, two, syn());
  REQUIRE(out.size() == 1);
  CHECK(out[0].box.w1 == 100);
  CHECK(out[0].confidence == 0.4);

  // Central components pass anywhere above the lowest threshold.
  out = filter_boxes({det("nose", 400, 440, 0.31)}, 448, two, syn());
  CHECK(out.size() == 1);
  CHECK(filter_boxes({det("nose", 400, 440, 0.29)}, 448, two, syn()).empty());

  // Left components need the box right of the midline; exact midline fails both.
  CHECK(filter_boxes({det("l_eye", 300, 350, 0.9)}, 448, two, syn()).size() == 1);
  CHECK(filter_boxes({det("l_eye", 200, 248, 0.9)}, 448, two, syn()).empty());
  CHECK(filter_boxes({det("r_eye", 200, 248, 0.9)}, 448, two, syn()).empty());
}

TEST_CASE("filter_boxes keeps the highest-confidence valid box at the first productive threshold") {
  const std::vector<double> t = {0.35, 0.25, 0.15};
  auto out = filter_boxes({det("r_ear", 10, 20, 0.3), det("r_ear", 30, 40, 0.32), det("r_ear", 50, 60, 0.2)},
                          448, t, syn());
  REQUIRE(out.size() == 1);
  CHECK(out[0].box.w1 == 30);
  // One box per component, ordered by component index.
  out = filter_boxes({det("mouth", 0, 10, 0.9), det("nose", 0, 10, 0.9), det("nose", 5, 10, 0.8)}, 448, t, syn());
  REQUIRE(out.size() == 2);
  CHECK(out[0].component == idx("nose"));
  CHECK(out[1].component == idx("mouth"));
  CHECK_THROWS_AS(filter_boxes({}, 0, t, syn()), ValidationError);
}

TEST_CASE("filter_boxes is idempotent") {
  Rng rng(3);
  const std::vector<double> t = {0.35, 0.25, 0.15};
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Detection> dets;
    const int n = static_cast<int>(rng.uniform_int(12));
    for (int i = 0; i < n; ++i) {
      const double w1 = rng.uniform(0, 400);
      dets.push_back({static_cast<int>(rng.uniform_int(syn().size())), {0, w1, 10, w1 + rng.uniform(1, 48)},
                      rng.uniform()});
    }
    const auto once = filter_boxes(dets, 448, t, syn());
    CHECK(filter_boxes(once, 448, t, syn()) == once);
  }
}

TEST_CASE("apply_mask identity, saturation and a 10x10 box") {
  Rng rng(1);
  const LabeledFace face = random_face(32, rng);
  MaskPlan empty;
  const auto same = apply_mask(face, empty);
  CHECK(same.pixels == face.pixels);
  CHECK(same.label == face.label);

  MaskPlan all;
  all.accepted = {{idx("nose"), {0, 0, 32, 32}, 0.9}};
  all.masked_components = {idx("nose")};
  const auto blank = apply_mask(face, all);
  for (float v : blank.pixels.data) CHECK(v == 0.0f);
  CHECK(blank.label[idx("nose")] == 0);
  CHECK(blank.label[idx("skin")] == 1);

  MaskPlan box;
  box.accepted = {{idx("mouth"), {5, 7, 15, 17}, 0.9}};
  box.masked_components = {idx("mouth")};
  const auto masked = apply_mask(face, box);
  int zeroed = 0, changed_outside = 0;
  for (int y = 0; y < 32; ++y) {
    for (int x = 0; x < 32; ++x) {
      const bool inside = y >= 5 && y < 15 && x >= 7 && x < 17;
      for (int c = 0; c < 3; ++c) {
        if (masked.pixels.at(y, x, c) == 0.0f && face.pixels.at(y, x, c) != 0.0f) ++zeroed;
        if (!inside && masked.pixels.at(y, x, c) != face.pixels.at(y, x, c)) ++changed_outside;
      }
    }
  }
  CHECK(zeroed == 100 * 3);
  CHECK(changed_outside == 0);
}

TEST_CASE("box coverage follows pixel centers") {
  const Box b{1.5, 2.0, 3.5, 4.6};
  CHECK_FALSE(box_covers(b, 0, 2));
  CHECK(box_covers(b, 1, 2));
  CHECK(box_covers(b, 2, 4));
  CHECK_FALSE(box_covers(b, 3, 2));
  CHECK_FALSE(box_covers(b, 2, 1));
  MaskPlan plan;
  plan.accepted = {{0, {0, 0, 4, 4}, 1}, {1, {2, 2, 6, 6}, 1}, {2, {10, 10, 12, 12}, 1}};
  CHECK(plan_area(plan, 16, 16) == 16 + 16 - 4 + 4);
  CHECK(overlapping_boxes(plan, 16, 16) == std::vector<std::pair<int, int>>{{0, 1}});
}

TEST_CASE("masking is measure-exact with pre-existing zeros") {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    LabeledFace face = random_face(24, rng);
    for (int i = 0; i < 40; ++i) {
      const int y = static_cast<int>(rng.uniform_int(24)), x = static_cast<int>(rng.uniform_int(24));
      for (int c = 0; c < 3; ++c) face.pixels.at(y, x, c) = 0.0f;
    }
    MaskPlan plan;
    for (int b = 0; b < 3; ++b) {
      const double h1 = rng.uniform(0, 20), w1 = rng.uniform(0, 20);
      plan.accepted.push_back({b, {h1, w1, h1 + rng.uniform(0, 8), w1 + rng.uniform(0, 8)}, 1});
    }
    const auto out = apply_mask(face, plan);
    long newly = 0, expect = 0;
    for (int y = 0; y < 24; ++y) {
      for (int x = 0; x < 24; ++x) {
        bool in_m = false;
        for (const auto& d : plan.accepted) in_m = in_m || box_covers(d.box, y, x);
        const bool was_zero = face.pixels.at(y, x, 0) == 0.0f;
        expect += in_m && !was_zero;
        newly += out.pixels.at(y, x, 0) == 0.0f && !was_zero;
      }
    }
    CHECK(newly == expect);
  }
}

TEST_CASE("detect normalizes phrases and drops unknown ones") {
  Rng rng(1);
  const LabeledFace face = random_face(32, rng);
  FixedClient client({{"nose", {1, 2, 3, 4}, 0.7}, {"mouth ", {5, 6, 7, 8}, 0.6}, {"tail", {0, 0, 1, 1}, 0.9},
                      {"LEFT EYE", {0, 20, 40, 40}, 0.5}});
  const auto dets = detect(face, {idx("nose"), idx("mouth")}, client, syn());
  REQUIRE(dets.size() == 3);
  CHECK(dets[0] == Detection{idx("nose"), {1, 2, 3, 4}, 0.7});
  CHECK(dets[1].component == idx("mouth"));
  CHECK(dets[2].component == idx("l_eye"));
  CHECK(dets[2].box.h2 == 32);  // clipped to the image
  CHECK_THROWS_AS(detect(face, {}, client, syn()), ValidationError);
}

TEST_CASE("build_debiased_set with mask_prob 0 and 1") {
  const auto spec = SyntheticFaceSpec::default_faces(32);
  const auto corpus = generate_synthetic(spec, 60, Rng(3));
  std::vector<LabeledFace> faces;
  for (const auto& s : corpus) faces.push_back(s.face);
  const auto cand = syn().maskable_indices();
  PipelineConfig c;
  c.detector.box_noise = 0;
  auto client = make_detection_client(c, syn(), corpus);

  c.mask_prob = 0.0;
  const auto none = build_debiased_set(faces, cand, syn(), c, *client, Rng(1));
  for (std::size_t i = 0; i < faces.size(); ++i) {
    CHECK(none.faces[i].pixels == faces[i].pixels);
    CHECK(none.faces[i].label == faces[i].label);
  }

  c.mask_prob = 1.0;
  const auto all = build_debiased_set(faces, cand, syn(), c, *client, Rng(1));
  for (std::size_t i = 0; i < faces.size(); ++i) {
    for (int k : cand) CHECK(all.faces[i].label[k] == 0);
    CHECK(all.faces[i].label[idx("skin")] == faces[i].label[idx("skin")]);
    const auto& rec = all.records[i];
    CHECK(rec.plan.accepted.size() == rec.plan.masked_components.size());
    // Exact boxes cover every pixel the component owns.
    for (int k : rec.plan.masked_components) {
      for (int r = 0; r < 32; ++r) {
        for (int col = 0; col < 32; ++col) {
          if (corpus[i].mask.at(r, col) != k) continue;
          for (int ch = 0; ch < 3; ++ch) CHECK(all.faces[i].pixels.at(r, col, ch) == 0.0f);
        }
      }
    }
  }
  CHECK_THROWS_AS(build_debiased_set(faces, {idx("skin")}, syn(), c, *client, Rng(1)), ValidationError);
}

TEST_CASE("masking rate at 0.5 is within 0.05 per component") {
  const auto spec = SyntheticFaceSpec::default_faces(32);
  const auto corpus = generate_synthetic(spec, 1000, Rng(0));
  std::vector<LabeledFace> faces;
  for (const auto& s : corpus) faces.push_back(s.face);
  PipelineConfig c;
  c.seed = 0;
  auto client = make_detection_client(c, syn(), corpus);
  const auto cand = syn().maskable_indices();
  const auto out = build_debiased_set(faces, cand, syn(), c, *client, Rng(0).substream("ccd"));
  for (int k : cand) {
    int present = 0, masked = 0;
    for (std::size_t i = 0; i < faces.size(); ++i) {
      if (!faces[i].label[k]) continue;
      ++present;
      masked += out.faces[i].label[k] == 0;
    }
    INFO(syn().name(k));
    CHECK(std::abs(static_cast<double>(masked) / present - 0.5) <= 0.05);
  }
}

TEST_CASE("debiased set is deterministic and independent of worker count") {
  const auto spec = SyntheticFaceSpec::default_faces(32);
  const auto corpus = generate_synthetic(spec, 40, Rng(4));
  std::vector<LabeledFace> faces;
  for (const auto& s : corpus) faces.push_back(s.face);
  PipelineConfig c;
  auto client = make_detection_client(c, syn(), corpus);
  const auto a = build_debiased_set(faces, syn().maskable_indices(), syn(), c, *client, Rng(9));
  c.workers = 3;
  const auto b = build_debiased_set(faces, syn().maskable_indices(), syn(), c, *client, Rng(9));
  for (std::size_t i = 0; i < faces.size(); ++i) {
    CHECK(a.faces[i].pixels == b.faces[i].pixels);
    CHECK(a.records[i].plan.masked_components == b.records[i].plan.masked_components);
  }
}

TEST_CASE("client failures are recorded without aborting") {
  const auto spec = SyntheticFaceSpec::default_faces(32);
  const auto corpus = generate_synthetic(spec, 10, Rng(5));
  std::vector<LabeledFace> faces;
  for (const auto& s : corpus) faces.push_back(s.face);
  PipelineConfig c;
  c.mask_prob = 1.0;
  FailingClient client;
  const auto out = build_debiased_set(faces, syn().maskable_indices(), syn(), c, client, Rng(1));
  CHECK(out.client_errors == 10);
  for (std::size_t i = 0; i < faces.size(); ++i) {
    CHECK(out.faces[i].pixels == faces[i].pixels);
    CHECK_FALSE(out.records[i].error.empty());
  }
}

TEST_CASE("stub detector returns ground-truth boxes and mirrored decoys") {
  const auto spec = SyntheticFaceSpec::default_faces(64);
  const auto corpus = generate_synthetic(spec, 20, Rng(6));
  DetectorSettings s;
  s.box_noise = 0;
  s.decoy_prob = 1.0;
  StubDetectionClient stub(syn(), s, 1);
  for (const auto& x : corpus) stub.add_mask(x.face.id, x.mask);
  for (const auto& x : corpus) {
    if (!x.face.label[idx("r_eye")] || !x.face.label[idx("l_eye")]) continue;
    const auto raw = stub.query(x.face, {"right eye"});
    Box truth;
    REQUIRE(mask_bbox(x.mask, idx("r_eye"), truth));
    bool found = false, decoy = false;
    for (const auto& r : raw) {
      found = found || r.box == truth;
      decoy = decoy || r.box.w1 > 32;
    }
    CHECK(found);
    CHECK(decoy);
    const auto kept = filter_boxes(detect(x.face, {idx("r_eye")}, stub, syn()), 64, {0.35, 0.25, 0.15}, syn());
    REQUIRE(kept.size() == 1);
    CHECK(kept[0].box == truth);
  }
}

TEST_CASE("http detector parses responses, retries 5xx and sends the token") {
  DetectorServer server(2);
  DetectorSettings s;
  s.kind = "http";
  s.endpoint = server.endpoint();
  s.auth_token = "secret";
  s.retries = 2;
  s.timeout_ms = 2000;
  HttpDetectionClient client(s);
  Rng rng(1);
  const LabeledFace face = random_face(16, rng);
  const auto dets = detect(face, {idx("mouth")}, client, syn());
  CHECK(server.requests == 3);
  CHECK(server.last_auth == "Bearer secret");
  REQUIRE(dets.size() == 1);
  CHECK(dets[0] == Detection{idx("mouth"), {1, 2, 5, 6}, 0.8});
}

TEST_CASE("http detector surfaces a retryable error after its retries") {
  DetectorServer server(100);
  DetectorSettings s;
  s.endpoint = server.endpoint();
  s.retries = 1;
  s.timeout_ms = 2000;
  HttpDetectionClient client(s);
  Rng rng(1);
  const LabeledFace face = random_face(16, rng);
  try {
    client.query(face, {"nose"});
    FAIL("expected ClientError");
  } catch (const ClientError& e) {
    CHECK(e.retryable());
  }
  CHECK(server.requests == 2);
}

TEST_CASE("http detector timeouts are retryable") {
  DetectorServer server(0, 600);
  DetectorSettings s;
  s.endpoint = server.endpoint();
  s.retries = 1;
  s.timeout_ms = 100;
  HttpDetectionClient client(s);
  Rng rng(1);
  const LabeledFace face = random_face(16, rng);
  try {
    client.query(face, {"nose"});
    FAIL("expected ClientError");
  } catch (const ClientError& e) {
    CHECK(e.retryable());
  }
}

}  // TEST_SUITE

TEST_SUITE("cooccur") {

TEST_CASE("worked example") {
  const auto r = compute_cooccurrence({{1, 1}, {1, 0}, {1, 1}});
  CHECK(r.num_images == 3);
  CHECK(r.frequency[0] == 1.0);
  CHECK(r.frequency[1] == doctest::Approx(2.0 / 3).epsilon(1e-15));
  CHECK(r.pair_matrix[0][1] == doctest::Approx(2.0 / 3).epsilon(1e-15));
  CHECK(r.pair_matrix[1][0] == 1.0);
  CHECK(r.pair_matrix[0][0] == 1.0);
  CHECK(r.pair_matrix[1][1] == 1.0);
  ComponentSchema s({"nose", "mouth"}, {"nose", "mouth"});
  CHECK(select_dominant(r, s, 0.99) == std::vector<int>{0});
  CHECK(select_dominant(r, s, 1e-9) == std::vector<int>{0, 1});
  CHECK(select_dominant(r, s, 1.0 - 1e-16) == std::vector<int>{0});
  ComponentSchema unmaskable({"nose", "mouth"}, {"mouth"});
  CHECK(select_dominant(r, unmaskable, 0.99).empty());
}

TEST_CASE("degenerate inputs") {
  const auto zero = compute_cooccurrence({{0, 0, 0}, {0, 0, 0}});
  for (double f : zero.frequency) CHECK(f == 0.0);
  for (const auto& row : zero.pair_matrix) {
    for (double v : row) CHECK(v == 0.0);
  }
  const auto one = compute_cooccurrence({{1, 1, 1}});
  for (double f : one.frequency) CHECK(f == 1.0);
  for (const auto& row : one.pair_matrix) {
    for (double v : row) CHECK(v == 1.0);
  }
  CHECK_THROWS_AS(compute_cooccurrence({}), DataError);
  CHECK_THROWS_AS(compute_cooccurrence({{1, 0}, {1}}), DataError);
}

TEST_CASE("order, duplication and joint symmetry") {
  Rng rng(4);
  std::vector<Label> labels(200, Label(6));
  for (auto& y : labels) {
    for (auto& v : y) v = rng.bernoulli(0.4);
  }
  const auto base = compute_cooccurrence(labels);
  auto shuffled = labels;
  std::reverse(shuffled.begin(), shuffled.end());
  std::swap(shuffled[3], shuffled[77]);
  const auto perm = compute_cooccurrence(shuffled);
  auto doubled = labels;
  doubled.insert(doubled.end(), labels.begin(), labels.end());
  const auto dup = compute_cooccurrence(doubled);
  for (int i = 0; i < 6; ++i) {
    CHECK(perm.frequency[i] == base.frequency[i]);
    CHECK(dup.frequency[i] == doctest::Approx(base.frequency[i]).epsilon(1e-15));
    for (int j = 0; j < 6; ++j) {
      CHECK(perm.pair_matrix[i][j] == base.pair_matrix[i][j]);
      CHECK(dup.pair_matrix[i][j] == doctest::Approx(base.pair_matrix[i][j]).epsilon(1e-15));
      CHECK(base.pair_matrix[i][j] * base.frequency[i] ==
            doctest::Approx(base.pair_matrix[j][i] * base.frequency[j]).epsilon(1e-12));
      CHECK(base.pair_matrix[i][j] >= 0.0);
      CHECK(base.pair_matrix[i][j] <= 1.0);
    }
  }
}

TEST_CASE("default synthetic corpus has two dominant components above 0.99") {
  const auto spec = SyntheticFaceSpec::default_faces(32);
  std::vector<Label> labels;
  for (const auto& s : generate_synthetic(spec, 1000, Rng(0))) labels.push_back(s.face.label);
  const auto r = compute_cooccurrence(labels);
  int above = 0;
  for (double f : r.frequency) above += f >= 0.99;
  CHECK(above >= 2);
  CHECK(r.frequency[*spec.schema.index_of("skin")] == 1.0);
  CHECK(r.frequency[*spec.schema.index_of("nose")] >= 0.99);
  const auto json = nlohmann::json::parse(report_json(r, spec.schema));
  CHECK(json.contains("frequency"));
}

}  // TEST_SUITE

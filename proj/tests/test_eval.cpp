#include <doctest.h>

#include <algorithm>
#include <json.hpp>

#include "disfacerep/error.hpp"
#include "disfacerep/eval.hpp"
#include "helpers.hpp"
#include "oracle.hpp"

using namespace disfacerep;

namespace {

const std::string kRemapTable = std::string(DFR_SOURCE_DIR) + "/data/remap/celebamask19_to_lapa11.txt";

SegMask mask_of(int h, int w, std::vector<std::uint8_t> values) {
  SegMask m(h, w, 0);
  m.labels = std::move(values);
  return m;
}

SegMask random_mask(int h, int w, int K, Rng& rng) {
  SegMask m(h, w, 0);
  for (auto& v : m.labels) v = static_cast<std::uint8_t>(rng.uniform_int(K + 1));
  return m;
}

}  // namespace

TEST_SUITE("eval") {

TEST_CASE("identity predictions score 1") {
  const ComponentSchema s({"a", "b", "c"}, {});
  Rng rng(1);
  std::vector<SegMask> gts;
  for (int i = 0; i < 5; ++i) gts.push_back(random_mask(6, 6, 3, rng));
  const auto r = f1_report(gts, gts, s);
  CHECK(r.mean_f1 == 1.0);
  for (double f : r.per_class) CHECK(f == 1.0);
}

TEST_CASE("hand-counted 2x2 case scores 4/6") {
  // Class 0: TP=2, FP=1, FN=1. Background is 1.
  const ComponentSchema s({"a"}, {});
  const SegMask pred = mask_of(2, 2, {0, 0, 0, 1});
  const SegMask gt = mask_of(2, 2, {0, 0, 1, 0});
  const auto r = f1_report({pred}, {gt}, s);
  CHECK(r.confusion[0].tp == 2);
  CHECK(r.confusion[0].fp == 1);
  CHECK(r.confusion[0].fn == 1);
  CHECK(r.per_class[0] == doctest::Approx(4.0 / 6).epsilon(1e-15));
  CHECK(r.mean_f1 == doctest::Approx(4.0 / 6).epsilon(1e-15));
}

TEST_CASE("classes absent everywhere are excluded unless asked otherwise") {
  const ComponentSchema s({"a", "b"}, {});
  const SegMask m = mask_of(1, 2, {0, 2});
  const auto r = f1_report({m}, {m}, s);
  CHECK(r.included == std::vector<bool>{true, false});
  CHECK(r.mean_f1 == 1.0);
  const auto strict = f1_report({m}, {m}, s, false);
  CHECK(strict.mean_f1 == 0.5);
}

TEST_CASE("micro F1 matches the pooled-count oracle") {
  const ComponentSchema s({"a", "b", "c", "d"}, {});
  Rng rng(2);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<SegMask> preds, gts;
    std::vector<std::vector<int>> op, og;
    for (int i = 0; i < 4; ++i) {
      preds.push_back(random_mask(5, 7, 4, rng));
      gts.push_back(random_mask(5, 7, 4, rng));
      op.emplace_back(preds.back().labels.begin(), preds.back().labels.end());
      og.emplace_back(gts.back().labels.begin(), gts.back().labels.end());
    }
    CHECK(f1_report(preds, gts, s).mean_f1 == doctest::Approx(oracle::mean_f1(op, og, 4)).epsilon(1e-14));
  }
}

TEST_CASE("F1 is invariant to sample order and to swapping preds with gts") {
  const ComponentSchema s({"a", "b", "c"}, {});
  Rng rng(3);
  std::vector<SegMask> preds, gts;
  for (int i = 0; i < 6; ++i) {
    preds.push_back(random_mask(4, 4, 3, rng));
    gts.push_back(random_mask(4, 4, 3, rng));
  }
  const auto base = f1_report(preds, gts, s);
  auto p2 = preds, g2 = gts;
  std::reverse(p2.begin(), p2.end());
  std::reverse(g2.begin(), g2.end());
  CHECK(f1_report(p2, g2, s).per_class == base.per_class);
  const auto swapped = f1_report(gts, preds, s);
  for (int k = 0; k < 3; ++k) CHECK(swapped.per_class[k] == doctest::Approx(base.per_class[k]).epsilon(1e-15));
}

TEST_CASE("shape mismatches name the sample") {
  const ComponentSchema s({"a"}, {});
  try {
    f1_report({SegMask(2, 2, 0), SegMask(2, 2, 0)}, {SegMask(2, 2, 0), SegMask(3, 2, 0)}, s);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("1") != std::string::npos);
  }
  CHECK_THROWS(f1_report({SegMask(2, 2, 0)}, {}, s));
}

TEST_CASE("shipped remap sends nose 2 to 6 and drops extras") {
  const auto r = LabelRemap::load(kRemapTable);
  const auto src = ComponentSchema::celebamask19();
  const auto dst = ComponentSchema::lapa11();
  CHECK(r.source == "celebamask19");
  CHECK(r.target == "lapa11");
  // Published index v is internal index v-1.
  const int nose = *src.index_of("nose");
  CHECK(nose + 1 == 2);
  CHECK(r.mapping[nose] + 1 == 6);
  CHECK(dst.name(r.mapping[nose]) == "nose");

  const auto out = remap_masks({SegMask(3, 3, static_cast<std::uint8_t>(nose))}, r);
  for (auto v : out[0].labels) CHECK(v + 1 == 6);

  SegMask extras(1, 3, 0);
  extras.labels = {static_cast<std::uint8_t>(*src.index_of("neck_l")), static_cast<std::uint8_t>(src.size()),
                   static_cast<std::uint8_t>(*src.index_of("hair"))};
  const auto dropped = remap_masks({extras}, r);
  CHECK(dropped[0].labels[0] == dst.background_id());
  CHECK(dropped[0].labels[1] == dst.background_id());
  CHECK(dst.name(dropped[0].labels[2]) == "hair");

  int mapped = 0;
  for (int t : r.mapping) mapped += t >= 0;
  CHECK(mapped == 10);
}

TEST_CASE("remap then inverse restores mapped pixels") {
  const auto r = LabelRemap::load(kRemapTable);
  const auto inv = r.inverse();
  const auto src = ComponentSchema::celebamask19();
  Rng rng(4);
  const SegMask m = random_mask(8, 8, src.size(), rng);
  const auto back = remap_masks(remap_masks({m}, r), inv)[0];
  for (std::size_t i = 0; i < m.labels.size(); ++i) {
    const int v = m.labels[i];
    if (v < src.size() && r.mapping[v] >= 0) {
      CHECK(back.labels[i] == v);
    } else {
      CHECK(back.labels[i] == src.background_id());
    }
  }
}

TEST_CASE("identity remap leaves masks unchanged") {
  std::string table = "source=lapa11 target=lapa11\n0 0\n";
  for (int i = 1; i <= 10; ++i) table += std::to_string(i) + " " + std::to_string(i) + "\n";
  const auto r = LabelRemap::parse(table);
  Rng rng(5);
  const SegMask m = random_mask(5, 5, 10, rng);
  CHECK(remap_masks({m}, r)[0] == m);
  SegMask bad(1, 1, 11);
  CHECK_THROWS_AS(remap_masks({bad}, r), DataError);
}

TEST_CASE("remap tables are validated by component name") {
  CHECK_THROWS_AS(LabelRemap::parse("source=celebamask19 target=lapa11\n0 0\n2 5\n"), ValidationError);
  CHECK_THROWS_AS(LabelRemap::parse("0 0\n"), ConfigError);
  CHECK_THROWS_AS(LabelRemap::parse("source=lapa11 target=lapa11\n1\n"), ConfigError);
  std::string missing = "source=lapa11 target=lapa11\n";
  for (int i = 1; i <= 9; ++i) missing += std::to_string(i) + " " + std::to_string(i) + "\n";
  CHECK_THROWS_AS(LabelRemap::parse(missing), ValidationError);
}

TEST_CASE("ablation tables") {
  const ComponentSchema s({"a", "b"}, {});
  const SegMask gt = mask_of(1, 4, {0, 1, 0, 2});
  const SegMask pred = mask_of(1, 4, {0, 0, 0, 2});
  const auto r = f1_report({pred}, {gt}, s);
  const auto single = ablation_table({{"run", r}});
  REQUIRE(single.rows.size() == 1);
  CHECK(single.columns.back() == "mean");
  CHECK(single.values[0].back() == doctest::Approx(100 * r.mean_f1));
  CHECK(single.values[0][0] == doctest::Approx(100 * r.per_class[0]));
  const auto twice = ablation_table({{"x", r}, {"y", r}});
  CHECK(twice.values[0] == twice.values[1]);
  const auto picked = ablation_table({{"x", r}}, {"b"});
  CHECK(picked.columns == std::vector<std::string>{"b", "mean"});
  CHECK(nlohmann::json::parse(twice.to_json()).is_object());
  CHECK(twice.to_markdown().find("| x |") != std::string::npos);

  auto other = f1_report({pred}, {gt}, ComponentSchema({"p", "q"}, {}));
  other.schema = "other";
  CHECK_THROWS_AS(ablation_table({{"x", r}, {"y", other}}), ValidationError);
}

TEST_CASE("f1 report json") {
  const ComponentSchema s({"a"}, {});
  const SegMask m = mask_of(1, 2, {0, 1});
  const auto j = nlohmann::json::parse(f1_report_json(f1_report({m}, {m}, s)));
  CHECK(j.at("mean_f1").get<double>() == 1.0);
}

}  // TEST_SUITE

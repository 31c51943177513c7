#include <doctest.h>

#include <cmath>

#include "disfacerep/tcd_loss.hpp"
#include "helpers.hpp"
#include "oracle.hpp"

using namespace disfacerep;

namespace {

oracle::Mat rows_of(const Matrix<double>& m) {
  oracle::Mat out(m.rows);
  for (int r = 0; r < m.rows; ++r) out[r].assign(m.row(r).begin(), m.row(r).end());
  return out;
}

struct Instance {
  RepresentationBundle b;
  Label y;
};

Instance random_instance(Rng& rng, int K, int e, int N) {
  Instance in;
  in.b.v_cls = testutil::random_matrix(K, e, rng);
  in.b.v_ffc = testutil::random_matrix(K, e, rng);
  in.b.v_bfc = testutil::random_matrix(K, e, rng);
  in.b.v_txt = testutil::random_matrix(K, e, rng);
  in.b.p = Matrix<double>(K, N);
  for (double& v : in.b.p.data) v = rng.uniform(0.01, 0.99);
  in.y.resize(K);
  for (auto& v : in.y) v = rng.bernoulli(0.6);
  return in;
}

// Two-dimensional unit vector at angle a.
std::vector<double> unit(double a) { return {std::cos(a), std::sin(a)}; }

Matrix<double> from_rows(const std::vector<std::vector<double>>& rows) {
  Matrix<double> m(static_cast<int>(rows.size()), static_cast<int>(rows[0].size()));
  for (int r = 0; r < m.rows; ++r) {
    for (int c = 0; c < m.cols; ++c) m(r, c) = rows[r][c];
  }
  return m;
}

}  // namespace

TEST_SUITE("tcd-loss") {

TEST_CASE("cosine similarity examples") {
  const std::vector<double> a = {1, 2}, b = {2, 1}, z = {0, 0};
  CHECK(cosine_sim(a, b) == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(cosine_sim(a, a) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(cosine_sim(std::vector<double>{1, 0}, std::vector<double>{0, 1}) == 0.0);
  CHECK(cosine_sim(a, z) == 0.0);
  CHECK(clamp_sim(-0.3) == kSimEps);
  CHECK(clamp_sim(1.0) == 1.0 - kSimEps);
}

TEST_CASE("positive loss examples") {
  // K=1, sim 0.5.
  const Matrix<double> v(1, 2, unit(0)), t(1, 2, unit(M_PI / 3));
  const auto pos = pos_losses(v, v, t, {1});
  CHECK(pos.cls == doctest::Approx(0.693147).epsilon(1e-6));
  CHECK(pos.ffc == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  // Perfect alignment.
  const auto perfect = pos_losses(t, t, t, {1});
  CHECK(perfect.cls == doctest::Approx(-std::log(1 - 1e-7)).epsilon(1e-9));
  // Empty label.
  const auto none = pos_losses(v, v, t, {0});
  CHECK(none.cls == 0.0);
  CHECK(none.ffc == 0.0);
}

TEST_CASE("negative loss examples") {
  // K=2, y=[1,0], sim(v_cls^1, v_txt^2) = 0.5 and L = 1.
  const Matrix<double> v_cls = from_rows({unit(0), unit(0)});
  const Matrix<double> v_txt = from_rows({unit(0), unit(M_PI / 3)});
  const Matrix<double> v_bfc = from_rows({unit(M_PI / 2), unit(M_PI / 2)});
  const auto neg = neg_losses(v_cls, v_cls, v_bfc, v_txt, {1, 0});
  CHECK(neg.cls == doctest::Approx(0.693147).epsilon(1e-6));
  CHECK(neg.prompt_count == 1);
  CHECK(neg.bfc == doctest::Approx(-std::log(1 - 1e-7)).epsilon(1e-9));
  // Background aligned with its own prompt saturates at the clamp ceiling.
  const auto sat = neg_losses(v_cls, v_cls, v_txt, v_txt, {1, 0});
  CHECK(sat.bfc == doctest::Approx(-std::log(1e-7)).epsilon(1e-12));
  // Fully disentangled: orthogonal prompts everywhere.
  const Matrix<double> ortho = from_rows({unit(0), unit(M_PI / 2)});
  const Matrix<double> swapped = from_rows({unit(M_PI / 2), unit(0)});
  const auto clean = neg_losses(ortho, ortho, swapped, ortho, {1, 1});
  CHECK(clean.cls == doctest::Approx(-2 * std::log(1 - 1e-7)).epsilon(1e-9));
  CHECK(clean.bfc == doctest::Approx(-2 * std::log(1 - 1e-7)).epsilon(1e-9));
}

TEST_CASE("regularizer examples") {
  CHECK(reg_loss(Matrix<double>(3, 4, 0.25)) == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(reg_loss(Matrix<double>(3, 4, 0.0)) == 0.0);
  const Matrix<double> p = from_rows({{.1, .2, .3, .4}, {.5, .5, .5, .5}});
  CHECK(reg_loss(p) == doctest::Approx(0.375).epsilon(1e-15));
}

TEST_CASE("total composes the six terms with the published weights") {
  LossWeights w;
  const double sum = w.alpha0 + w.alpha1 + w.beta0 + w.beta1 + w.beta2 + w.lambda_reg;
  CHECK(sum == doctest::Approx(3.667).epsilon(1e-12));
  CHECK(LossWeights::from_config(PipelineConfig{}).beta2 == 0.017);

  Rng rng(11);
  Instance in = random_instance(rng, 4, 6, 9);
  const auto lb = total_loss(in.b, in.y, w);
  const double expect = w.alpha0 * lb.pos_cls + w.alpha1 * lb.pos_ffc + w.beta0 * lb.neg_cls +
                        w.beta1 * lb.neg_ffc + w.beta2 * lb.neg_bfc + w.lambda_reg * lb.reg;
  CHECK(lb.total == expect);

  LossWeights doubled = w;
  doubled.lambda_reg *= 2;
  CHECK(total_loss(in.b, in.y, doubled).total == doctest::Approx(lb.total + w.lambda_reg * lb.reg).epsilon(1e-14));

  LossWeights zero{0, 0, 0, 0, 0, 0};
  CHECK(total_loss(in.b, in.y, zero).total == 0.0);
}

TEST_CASE("per-class contributions sum to each term") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Instance in = random_instance(rng, 4, 5, 6);
    const auto lb = total_loss(in.b, in.y, LossWeights{});
    auto sum = [](const std::vector<double>& v) {
      double s = 0;
      for (double x : v) s += x;
      return s;
    };
    CHECK(sum(lb.pos_cls_k) == doctest::Approx(lb.pos_cls).epsilon(1e-12));
    CHECK(sum(lb.neg_cls_k) == doctest::Approx(lb.neg_cls).epsilon(1e-12));
    CHECK(sum(lb.neg_bfc_k) == doctest::Approx(lb.neg_bfc).epsilon(1e-12));
    CHECK(sum(lb.reg_k) == doctest::Approx(lb.reg).epsilon(1e-12));
  }
}

TEST_CASE("value form matches the brute-force evaluator") {
  Rng rng(2024);
  const LossWeights w;
  const double wv[6] = {w.alpha0, w.alpha1, w.beta0, w.beta1, w.beta2, w.lambda_reg};
  for (int trial = 0; trial < 100; ++trial) {
    const int K = 1 + static_cast<int>(rng.uniform_int(4));
    const int e = 1 + static_cast<int>(rng.uniform_int(8));
    Instance in = random_instance(rng, K, e, 1 + static_cast<int>(rng.uniform_int(9)));
    for (NegativeSet set : {NegativeSet::all, NegativeSet::present}) {
      const auto lb = total_loss(in.b, in.y, w, set);
      std::vector<int> y(in.y.begin(), in.y.end());
      const auto o = oracle::evaluate(rows_of(in.b.v_cls), rows_of(in.b.v_ffc), rows_of(in.b.v_bfc),
                                      rows_of(in.b.v_txt), rows_of(in.b.p), y, wv, set == NegativeSet::present);
      CHECK(std::abs(lb.pos_cls - o.pos_cls) <= 1e-10);
      CHECK(std::abs(lb.pos_ffc - o.pos_ffc) <= 1e-10);
      CHECK(std::abs(lb.neg_cls - o.neg_cls) <= 1e-10);
      CHECK(std::abs(lb.neg_ffc - o.neg_ffc) <= 1e-10);
      CHECK(std::abs(lb.neg_bfc - o.neg_bfc) <= 1e-10);
      CHECK(std::abs(lb.reg - o.reg) <= 1e-10);
      CHECK(std::abs(lb.total - o.total) <= 1e-10);
    }
  }
}

TEST_CASE("present-only negatives count other present components") {
  Rng rng(1);
  Instance in = random_instance(rng, 4, 3, 4);
  in.y = {1, 0, 1, 1};
  CHECK(total_loss(in.b, in.y, LossWeights{}, NegativeSet::all).neg_prompt_count == 3);
  CHECK(total_loss(in.b, in.y, LossWeights{}, NegativeSet::present).neg_prompt_count == 2);
  CHECK(parse_negative_set("present") == NegativeSet::present);
}

TEST_CASE("losses are invariant to positive rescaling of any vector") {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    Instance in = random_instance(rng, 3, 5, 4);
    const auto before = total_loss(in.b, in.y, LossWeights{});
    Instance scaled = in;
    const double s = rng.uniform(0.01, 100);
    for (auto* m : {&scaled.b.v_cls, &scaled.b.v_ffc, &scaled.b.v_bfc, &scaled.b.v_txt}) {
      for (double& v : m->data) v *= s;
    }
    const auto after = total_loss(scaled.b, scaled.y, LossWeights{});
    CHECK(std::abs(after.total - before.total) <= 1e-12 * std::max(1.0, std::abs(before.total)) * 10);
  }
}

TEST_CASE("neg_cls grows strictly with cross similarity") {
  // v_cls^0 at angle 0; prompt 1 rotates toward it.
  double prev = -1;
  for (double angle = 1.5; angle > 0.1; angle -= 0.1) {
    const Matrix<double> v_cls = from_rows({unit(0), unit(2)});
    const Matrix<double> v_txt = from_rows({unit(-1.0), unit(angle)});
    const auto neg = neg_losses(v_cls, v_cls, v_cls, v_txt, {1, 0});
    CHECK(neg.cls > prev);
    prev = neg.cls;
  }
}

TEST_CASE("graph form matches the value form and its gradients") {
  Rng rng(77);
  const LossWeights w;
  for (int trial = 0; trial < 10; ++trial) {
    Instance in = random_instance(rng, 3, 4, 4);
    in.y[0] = 1;
    auto run = [&](const RepresentationBundle& b, bool grads, RepresentationBundle* out) {
      ad::Graph<double> g;
      auto mk = [&](const Matrix<double>& m) { return grads ? g.variable(m) : g.constant(m); };
      auto vc = mk(b.v_cls), vf = mk(b.v_ffc), vb = mk(b.v_bfc), vt = g.constant(b.v_txt), p = mk(b.p);
      auto terms = tcd_loss(g, vc, vf, vb, vt, p, in.y, w);
      if (grads) {
        g.backward(terms.total);
        out->v_cls = vc.grad();
        out->v_ffc = vf.grad();
        out->v_bfc = vb.grad();
        out->p = p.grad();
      }
      return terms.total.item();
    };
    const double value = run(in.b, false, nullptr);
    CHECK(value == doctest::Approx(total_loss(in.b, in.y, w).total).epsilon(1e-12));
    RepresentationBundle grad;
    run(in.b, true, &grad);
    const double h = 1e-6;
    for (auto member : {&RepresentationBundle::v_cls, &RepresentationBundle::v_ffc, &RepresentationBundle::v_bfc,
                        &RepresentationBundle::p}) {
      for (std::size_t i = 0; i < (in.b.*member).size(); ++i) {
        RepresentationBundle up = in.b, down = in.b;
        (up.*member).data[i] += h;
        (down.*member).data[i] -= h;
        const double numeric = (total_loss(up, in.y, w).total - total_loss(down, in.y, w).total) / (2 * h);
        CHECK(std::abs((grad.*member).data[i] - numeric) <= 1e-6 * std::max(1.0, std::abs(numeric)));
      }
    }
  }
}

}  // TEST_SUITE

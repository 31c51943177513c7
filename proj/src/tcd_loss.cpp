#include "disfacerep/tcd_loss.hpp"

#include <algorithm>
#include <cmath>

#include "disfacerep/error.hpp"

namespace disfacerep {

NegativeSet parse_negative_set(const std::string& name) {
  if (name == "all") return NegativeSet::all;
  if (name == "present") return NegativeSet::present;
  throw ValidationError("train.negatives", "expected 'all' or 'present', got '" + name + "'");
}

LossWeights LossWeights::from_config(const PipelineConfig& c) {
  return {c.alpha0, c.alpha1, c.beta0, c.beta1, c.beta2, c.lambda_reg};
}

double clamp_sim(double s) { return std::min(std::max(s, kSimEps), 1.0 - kSimEps); }

double cosine_sim(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("cosine_sim: length mismatch");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (na < 1e-12 || nb < 1e-12) return 0.0;
  return dot / (na * nb);
}

namespace {

void check_rows(const Matrix<double>& m, const Matrix<double>& ref, const Label& y, const char* what) {
  if (m.rows != ref.rows || m.cols != ref.cols) throw ShapeError(std::string(what) + ": shape mismatch");
  if (y.size() != static_cast<std::size_t>(m.rows)) throw ShapeError(std::string(what) + ": label length");
}

bool is_negative(int k, int l, const Label& y, NegativeSet negatives) {
  return l != k && (negatives == NegativeSet::all || y[l]);
}

}  // namespace

PosLosses pos_losses(const Matrix<double>& v_cls, const Matrix<double>& v_ffc, const Matrix<double>& v_txt,
                     const Label& y) {
  check_rows(v_cls, v_txt, y, "pos_losses");
  check_rows(v_ffc, v_txt, y, "pos_losses");
  const int k_count = v_txt.rows;
  PosLosses out;
  out.cls_k.assign(k_count, 0.0);
  out.ffc_k.assign(k_count, 0.0);
  for (int k = 0; k < k_count; ++k) {
    if (!y[k]) continue;
    out.cls_k[k] = -std::log(clamp_sim(cosine_sim(v_cls.row(k), v_txt.row(k))));
    out.ffc_k[k] = -std::log(clamp_sim(cosine_sim(v_ffc.row(k), v_txt.row(k))));
    out.cls += out.cls_k[k];
    out.ffc += out.ffc_k[k];
  }
  return out;
}

NegLosses neg_losses(const Matrix<double>& v_cls, const Matrix<double>& v_ffc, const Matrix<double>& v_bfc,
                     const Matrix<double>& v_txt, const Label& y, NegativeSet negatives) {
  check_rows(v_cls, v_txt, y, "neg_losses");
  check_rows(v_ffc, v_txt, y, "neg_losses");
  check_rows(v_bfc, v_txt, y, "neg_losses");
  const int k_count = v_txt.rows;
  NegLosses out;
  out.cls_k.assign(k_count, 0.0);
  out.ffc_k.assign(k_count, 0.0);
  out.bfc_k.assign(k_count, 0.0);
  for (int k = 0; k < k_count; ++k) {
    if (!y[k]) continue;
    int count = 0;
    for (int l = 0; l < k_count; ++l) {
      if (!is_negative(k, l, y, negatives)) continue;
      ++count;
      out.cls_k[k] -= std::log(clamp_sim(1.0 - cosine_sim(v_cls.row(k), v_txt.row(l))));
      out.ffc_k[k] -= std::log(clamp_sim(1.0 - cosine_sim(v_ffc.row(k), v_txt.row(l))));
    }
    out.prompt_count = std::max(out.prompt_count, count);
    out.bfc_k[k] = -std::log(clamp_sim(1.0 - cosine_sim(v_bfc.row(k), v_txt.row(k))));
    out.cls += out.cls_k[k];
    out.ffc += out.ffc_k[k];
    out.bfc += out.bfc_k[k];
  }
  if (negatives == NegativeSet::all) out.prompt_count = k_count - 1;
  return out;
}

double reg_loss(const Matrix<double>& p) {
  if (p.rows == 0 || p.cols == 0) throw ShapeError("reg_loss: empty attention map");
  double total = 0;
  for (int k = 0; k < p.rows; ++k) {
    double s = 0;
    for (double v : p.row(k)) s += v;
    total += s / p.cols;
  }
  return total / p.rows;
}

LossBreakdown total_loss(const RepresentationBundle& b, const Label& y, const LossWeights& w,
                         NegativeSet negatives) {
  PosLosses pos = pos_losses(b.v_cls, b.v_ffc, b.v_txt, y);
  NegLosses neg = neg_losses(b.v_cls, b.v_ffc, b.v_bfc, b.v_txt, y, negatives);
  if (b.p.rows != b.v_txt.rows) throw ShapeError("total_loss: attention map count");
  LossBreakdown out;
  out.pos_cls = pos.cls;
  out.pos_ffc = pos.ffc;
  out.neg_cls = neg.cls;
  out.neg_ffc = neg.ffc;
  out.neg_bfc = neg.bfc;
  out.reg = reg_loss(b.p);
  out.pos_cls_k = pos.cls_k;
  out.pos_ffc_k = pos.ffc_k;
  out.neg_cls_k = neg.cls_k;
  out.neg_ffc_k = neg.ffc_k;
  out.neg_bfc_k = neg.bfc_k;
  out.reg_k.assign(b.p.rows, 0.0);
  for (int k = 0; k < b.p.rows; ++k) {
    double s = 0;
    for (double v : b.p.row(k)) s += v;
    out.reg_k[k] = s / b.p.cols / b.p.rows;
  }
  out.neg_prompt_count = neg.prompt_count;
  out.total = w.alpha0 * out.pos_cls + w.alpha1 * out.pos_ffc + w.beta0 * out.neg_cls + w.beta1 * out.neg_ffc +
              w.beta2 * out.neg_bfc + w.lambda_reg * out.reg;
  out.objective = out.total;
  return out;
}

template <typename T>
LossTerms<T> tcd_loss(ad::Graph<T>& graph, ad::Var<T> v_cls, ad::Var<T> v_ffc, ad::Var<T> v_bfc,
                      ad::Var<T> v_txt, ad::Var<T> p, const Label& y, const LossWeights& w,
                      NegativeSet negatives) {
  const int k_count = v_txt.rows();
  if (y.size() != static_cast<std::size_t>(k_count)) throw ShapeError("tcd_loss: label length");
  const T lo = static_cast<T>(kSimEps);
  const T hi = static_cast<T>(1.0 - kSimEps);

  Matrix<T> diag(k_count, k_count), off(k_count, k_count);
  for (int k = 0; k < k_count; ++k) {
    if (!y[k]) continue;
    diag(k, k) = T(-1);
    for (int l = 0; l < k_count; ++l) {
      if (is_negative(k, l, y, negatives)) off(k, l) = T(-1);
    }
  }
  ad::Var<T> txt = ad::normalize_rows(v_txt);
  auto sims = [&](ad::Var<T> v) { return ad::matmul_nt(ad::normalize_rows(v), txt); };
  auto pos_term = [&](ad::Var<T> s) { return ad::weighted_sum(ad::log(ad::clamp(s, lo, hi)), diag); };
  auto neg_term = [&](ad::Var<T> s, const Matrix<T>& weights) {
    return ad::weighted_sum(ad::log(ad::clamp(ad::one_minus(s), lo, hi)), weights);
  };
  ad::Var<T> zero = graph.constant(Matrix<T>(1, 1));

  LossTerms<T> out;
  ad::Var<T> s_cls = sims(v_cls);
  out.pos_cls = pos_term(s_cls);
  out.neg_cls = neg_term(s_cls, off);
  if (v_ffc.valid()) {
    ad::Var<T> s_ffc = sims(v_ffc);
    out.pos_ffc = pos_term(s_ffc);
    out.neg_ffc = neg_term(s_ffc, off);
  } else {
    out.pos_ffc = out.neg_ffc = zero;
  }
  out.neg_bfc = v_bfc.valid() ? neg_term(sims(v_bfc), diag) : zero;
  out.reg = ad::mean(p);

  ad::Var<T> total = zero;
  auto accumulate = [&](ad::Var<T> term, double weight) {
    if (weight != 0.0) total = ad::add(total, ad::scale(term, static_cast<T>(weight)));
  };
  accumulate(out.pos_cls, w.alpha0);
  accumulate(out.pos_ffc, w.alpha1);
  accumulate(out.neg_cls, w.beta0);
  accumulate(out.neg_ffc, w.beta1);
  accumulate(out.neg_bfc, w.beta2);
  accumulate(out.reg, w.lambda_reg);
  out.total = total;
  return out;
}

template LossTerms<float> tcd_loss<float>(ad::Graph<float>&, ad::Var<float>, ad::Var<float>, ad::Var<float>,
                                          ad::Var<float>, ad::Var<float>, const Label&, const LossWeights&,
                                          NegativeSet);
template LossTerms<double> tcd_loss<double>(ad::Graph<double>&, ad::Var<double>, ad::Var<double>,
                                            ad::Var<double>, ad::Var<double>, ad::Var<double>, const Label&,
                                            const LossWeights&, NegativeSet);

}  // namespace disfacerep

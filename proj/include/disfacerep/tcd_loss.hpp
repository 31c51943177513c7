#pragma once

#include <span>
#include <string>
#include <vector>

#include "disfacerep/autograd.hpp"
#include "disfacerep/config.hpp"
#include "disfacerep/image.hpp"

namespace disfacerep {

using ad::Matrix;

// Similarities are clamped to [kSimEps, 1 - kSimEps] before every logarithm.
inline constexpr double kSimEps = 1e-7;

enum class NegativeSet { all, present };
NegativeSet parse_negative_set(const std::string& name);

struct LossWeights {
  double alpha0 = 1.2;
  double alpha1 = 0.2;
  double beta0 = 2.1;
  double beta1 = 0.1;
  double beta2 = 0.017;
  double lambda_reg = 0.05;

  static LossWeights from_config(const PipelineConfig& config);
};

// Forward values of one sample; rows index components.
struct RepresentationBundle {
  Matrix<double> v_cls;  // K x e
  Matrix<double> p;      // K x N, patch attention flattened row-major
  Matrix<double> v_ffc;  // K x e
  Matrix<double> v_bfc;  // K x e
  Matrix<double> v_txt;  // K x e
};

struct LossBreakdown {
  double pos_cls = 0, pos_ffc = 0, neg_cls = 0, neg_ffc = 0, neg_bfc = 0, reg = 0;
  double total = 0;
  std::vector<double> pos_cls_k, pos_ffc_k, neg_cls_k, neg_ffc_k, neg_bfc_k, reg_k;
  // Non-corresponding prompts per present component (the largest count when
  // restricted to present components).
  int neg_prompt_count = 0;
  // Training-only extras: classification losses and the optimized objective
  // (total + cls_weight * cls_bce + patch_cls_weight * patch_bce). Zero
  // outside training.
  double cls_bce = 0;
  double patch_bce = 0;
  double objective = 0;
};

double clamp_sim(double s);
// a.b / (|a||b|); 0 when either norm is below 1e-12.
double cosine_sim(std::span<const double> a, std::span<const double> b);

struct PosLosses {
  double cls = 0, ffc = 0;
  std::vector<double> cls_k, ffc_k;
};
PosLosses pos_losses(const Matrix<double>& v_cls, const Matrix<double>& v_ffc, const Matrix<double>& v_txt,
                     const Label& y);

struct NegLosses {
  double cls = 0, ffc = 0, bfc = 0;
  std::vector<double> cls_k, ffc_k, bfc_k;
  int prompt_count = 0;
};
NegLosses neg_losses(const Matrix<double>& v_cls, const Matrix<double>& v_ffc, const Matrix<double>& v_bfc,
                     const Matrix<double>& v_txt, const Label& y, NegativeSet negatives = NegativeSet::all);

// (1/K) sum_k mean(P_k) for P given as K x (spatial positions).
double reg_loss(const Matrix<double>& p);

LossBreakdown total_loss(const RepresentationBundle& bundle, const Label& y, const LossWeights& weights,
                         NegativeSet negatives = NegativeSet::all);

// Differentiable form of the same objective.
template <typename T>
struct LossTerms {
  ad::Var<T> pos_cls, pos_ffc, neg_cls, neg_ffc, neg_bfc, reg, total;
};

// v_ffc/v_bfc may be invalid Vars when their weights are zero; the matching
// terms then evaluate to constant 0.
template <typename T>
LossTerms<T> tcd_loss(ad::Graph<T>& graph, ad::Var<T> v_cls, ad::Var<T> v_ffc, ad::Var<T> v_bfc,
                      ad::Var<T> v_txt, ad::Var<T> p, const Label& y, const LossWeights& weights,
                      NegativeSet negatives = NegativeSet::all);

}  // namespace disfacerep

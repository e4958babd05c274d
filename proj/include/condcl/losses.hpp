#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "condcl/errors.hpp"
#include "condcl/kernels.hpp"
#include "condcl/numerics.hpp"

namespace condcl {

struct LossConfig {
  double tau = 0.1;       // temperature; not a value taken from any experiment
  double lambda = 1.0;    // weight on the uniformity term of the combined objective
  double epsilon = 1e-12; // floor for Z_hat and M - Z_hat

  void validate() const {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw InvalidArgument("LossConfig: tau must be > 0");
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw InvalidArgument("LossConfig: lambda must be >= 0");
    if (!(epsilon > 0.0 && epsilon <= 1e-6)) throw InvalidArgument("LossConfig: epsilon must be in (0, 1e-6]");
  }
};

/// Scalar loss and its gradients with respect to both feature views.
struct LossResult {
  double value = 0.0;
  Matrix grad_anchor;
  Matrix grad_candidate;
};

/// Two-view batch: candidates[i] is the second view of anchors[i]; weights
/// hold w(y_i, y_j) over the batch's meta-data.
struct Batch {
  Matrix anchors;
  Matrix candidates;
  WeightMatrix weights;
  double sup_norm = 1.0;

  std::size_t size() const noexcept { return anchors.rows(); }

  /// Validates shapes and that rows are unit norm within unit_tolerance.
  static Batch make(Matrix anchors, Matrix candidates, WeightMatrix weights, double sup_norm = 1.0,
                    double unit_tolerance = 1e-6) {
    if (anchors.rows() == 0) throw EmptyInputError("Batch: no samples");
    require_same_shape(anchors, candidates, "Batch views");
    if (weights.size() != anchors.rows() || weights.w.cols() != anchors.rows())
      throw ShapeMismatchError("Batch: weight matrix is not N x N");
    for (const Matrix* m : {&anchors, &candidates}) {
      for (std::size_t i = 0; i < m->rows(); ++i) {
        if (std::abs(norm(m->row(i)) - 1.0) > unit_tolerance)
          throw InvalidArgument("Batch: row " + std::to_string(i) + " is not unit norm");
      }
    }
    return Batch{std::move(anchors), std::move(candidates), std::move(weights), sup_norm};
  }

  /// The reverse direction: candidates act as anchors.
  Batch swapped() const { return Batch{candidates, anchors, weights.transposed(), sup_norm}; }
};

namespace detail {

inline Matrix scores(const Batch& b, double tau) { return scaled(pairwise_dot(b.anchors, b.candidates), 1.0 / tau); }

// Chain rule from dL/dS, where S = A C^T / tau.
inline LossResult from_score_grad(double value, const Matrix& ds, const Batch& b, double tau) {
  return LossResult{value, scaled(matmul(ds, b.candidates), 1.0 / tau),
                    scaled(matmul_tn(ds, b.anchors), 1.0 / tau)};
}

inline void check_z_hat(const Batch& b, double eps) {
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (b.weights.z_hat[i] < eps)
      throw DegenerateWeightsError("anchor " + std::to_string(i) + " has zero total similarity mass");
  }
}

// Row-wise softmax of s; lse receives the row log-sum-exps.
inline Matrix softmax_rows(const Matrix& s, std::vector<double>& lse) {
  Matrix p(s.rows(), s.cols());
  lse.resize(s.rows());
  for (std::size_t i = 0; i < s.rows(); ++i) {
    lse[i] = logsumexp(s.row(i));
    for (std::size_t j = 0; j < s.cols(); ++j) p(i, j) = std::exp(s(i, j) - lse[i]);
  }
  return p;
}

inline LossResult combine(const LossResult& a, double sa, const LossResult& b, double sb) {
  LossResult out{sa * a.value + sb * b.value, scaled(a.grad_anchor, sa), scaled(a.grad_candidate, sa)};
  axpy(out.grad_anchor, sb, b.grad_anchor);
  axpy(out.grad_candidate, sb, b.grad_candidate);
  return out;
}

}  // namespace detail

/// Kernel-weighted InfoNCE, averaged over anchors:
///   L_i = -(1/N) sum_k (w_ik / Z_i) log( e^{s_ik} / ((1/N) sum_j e^{s_ij}) ).
inline LossResult yaware_infonce(const Batch& b, const LossConfig& cfg) {
  cfg.validate();
  detail::check_z_hat(b, cfg.epsilon);
  const std::size_t n = b.size();
  const double nd = static_cast<double>(n);
  const double log_n = std::log(nd);
  const Matrix s = detail::scores(b, cfg.tau);
  std::vector<double> lse;
  const Matrix p = detail::softmax_rows(s, lse);

  // the q_ik sum to 1, so the log-normaliser leaves the weighted sum; the
  // attraction and normaliser parts are accumulated separately, which keeps
  // roundoff at a few ulp of the result even for tau ~ 1e-3
  double attract = 0.0, normaliser = 0.0;
  Matrix ds(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    const double inv = 1.0 / (nd * b.weights.z_hat[i]);
    double ai = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const double q = b.weights.w(i, k) * inv;
      ai -= q * s(i, k);
      ds(i, k) = (p(i, k) - q) / nd;
    }
    attract += ai;
    normaliser += lse[i] - log_n;
  }
  return detail::from_score_grad(attract / nd + normaliser / nd, ds, b, cfg.tau);
}

/// -(1/N) sum_k (w_ik / Z_i) s_ik, averaged over anchors.
inline LossResult conditional_alignment(const Batch& b, const LossConfig& cfg) {
  cfg.validate();
  detail::check_z_hat(b, cfg.epsilon);
  const std::size_t n = b.size();
  const double nd = static_cast<double>(n);
  const Matrix s = detail::scores(b, cfg.tau);
  double total = 0.0;
  Matrix ds(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    const double inv = 1.0 / (nd * b.weights.z_hat[i]);
    double ai = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const double q = b.weights.w(i, k) * inv;
      ai -= q * s(i, k);
      ds(i, k) = -q / nd;
    }
    total += ai;
  }
  return detail::from_score_grad(total / nd, ds, b, cfg.tau);
}

/// log (1/N) sum_j e^{s_ij}, averaged over anchors.
inline LossResult global_uniformity(const Batch& b, const LossConfig& cfg) {
  cfg.validate();
  const std::size_t n = b.size();
  const double nd = static_cast<double>(n);
  const Matrix s = detail::scores(b, cfg.tau);
  std::vector<double> lse;
  Matrix ds = detail::softmax_rows(s, lse);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += lse[i] - std::log(nd);
  for (double& v : ds.values()) v /= nd;
  return detail::from_score_grad(total / nd, ds, b, cfg.tau);
}

/// Negative-pair weights (M - w_ij) / (M - Z_i). Rows whose M - Z_i falls
/// below epsilon carry no dissimilar mass (every w_ij is within N*epsilon
/// of M) and are left at zero; AllSimilarError when that holds for every
/// row.
inline Matrix conditional_uniformity_weights(const WeightMatrix& weights, double sup_norm, double epsilon) {
  const std::size_t n = weights.size();
  Matrix v(n, n);
  bool any = false;
  for (std::size_t i = 0; i < n; ++i) {
    const double denom = sup_norm - weights.z_hat[i];
    if (denom < epsilon) continue;
    any = true;
    for (std::size_t j = 0; j < n; ++j) v(i, j) = std::max(0.0, sup_norm - weights.w(i, j)) / denom;
  }
  if (!any)
    throw AllSimilarError(
        "conditional uniformity undefined: all meta-data in the batch are kernel-identical");
  return v;
}

/// log (1/N^2) sum_{i,j} ((M - w_ij) / (M - Z_i)) e^{s_ij}.
inline LossResult conditional_uniformity(const Batch& b, const LossConfig& cfg) {
  cfg.validate();
  const std::size_t n = b.size();
  const double nd = static_cast<double>(n);
  const Matrix v = conditional_uniformity_weights(b.weights, b.sup_norm, cfg.epsilon);
  const Matrix s = detail::scores(b, cfg.tau);

  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (v(i, j) > 0.0) mx = std::max(mx, std::log(v(i, j)) + s(i, j));
  if (!std::isfinite(mx)) throw AllSimilarError("conditional uniformity: no dissimilar pair in batch");

  Matrix ds(n, n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (v(i, j) <= 0.0) continue;
      const double e = std::exp(std::log(v(i, j)) + s(i, j) - mx);
      ds(i, j) = e;
      total += e;
    }
  }
  for (double& x : ds.values()) x /= total;
  const double value = mx + std::log(total) - 2.0 * std::log(nd);
  return detail::from_score_grad(value, ds, b, cfg.tau);
}

/// conditional_alignment + lambda * conditional_uniformity.
inline LossResult combined_objective(const Batch& b, const LossConfig& cfg) {
  LossResult align = conditional_alignment(b, cfg);
  if (cfg.lambda == 0.0) return align;
  return detail::combine(align, 1.0, conditional_uniformity(b, cfg), cfg.lambda);
}

/// conditional_alignment + lambda * global_uniformity; equal to
/// yaware_infonce at lambda = 1.
inline LossResult alignment_global_uniformity(const Batch& b, const LossConfig& cfg) {
  LossResult align = conditional_alignment(b, cfg);
  if (cfg.lambda == 0.0) return align;
  return detail::combine(align, 1.0, global_uniformity(b, cfg), cfg.lambda);
}

namespace detail {

// Per-anchor positive-set contrastive loss with the (1/N)-normalised
// denominator. Written anchor by anchor, independent of the matrix path
// above, so it can serve as an oracle.
inline LossResult positive_set_loss(const Matrix& anchors, const Matrix& candidates,
                                    const std::function<bool(std::size_t, std::size_t)>& positive,
                                    double tau) {
  const std::size_t n = anchors.rows();
  const double nd = static_cast<double>(n);
  LossResult out{0.0, Matrix(n, anchors.cols()), Matrix(n, anchors.cols())};
  std::vector<double> sim(n);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      sim[j] = dot(anchors.row(i), candidates.row(j)) / tau;
      mx = std::max(mx, sim[j]);
    }
    double denom = 0.0;
    for (std::size_t j = 0; j < n; ++j) denom += std::exp(sim[j] - mx);
    const double log_mean = mx + std::log(denom) - std::log(nd);

    std::size_t n_pos = 0;
    for (std::size_t k = 0; k < n; ++k) n_pos += positive(i, k) ? 1 : 0;
    if (n_pos == 0) throw NoPositiveError("anchor " + std::to_string(i) + " has no positive");

    double li = 0.0;
    for (std::size_t k = 0; k < n; ++k)
      if (positive(i, k)) li -= (sim[k] - log_mean) / static_cast<double>(n_pos);
    out.value += li / nd;

    for (std::size_t j = 0; j < n; ++j) {
      const double g = (std::exp(sim[j] - mx) / denom - (positive(i, j) ? 1.0 / static_cast<double>(n_pos) : 0.0)) /
                       (nd * tau);
      if (g == 0.0) continue;
      for (std::size_t c = 0; c < anchors.cols(); ++c) {
        out.grad_anchor(i, c) += g * candidates(j, c);
        out.grad_candidate(j, c) += g * anchors(i, c);
      }
    }
  }
  return out;
}

}  // namespace detail

/// Supervised contrastive loss over stacked views: rows [0, N) of features
/// are view 1 (anchors), rows [N, 2N) view 2 (candidates). labels has one
/// entry per source sample (N) or per row (2N). The denominator is the
/// mean over candidates, so the value is the textbook one minus log N.
inline LossResult supcon_reference(const Matrix& features, std::span<const int> labels, const LossConfig& cfg) {
  cfg.validate();
  if (features.rows() < 2 || features.rows() % 2 != 0)
    throw ShapeMismatchError("supcon_reference: features must stack two views of N >= 1 samples");
  const std::size_t n = features.rows() / 2;
  if (labels.size() != n && labels.size() != 2 * n)
    throw ShapeMismatchError("supcon_reference: label count must be N or 2N");
  std::vector<std::size_t> first(n), second(n);
  for (std::size_t i = 0; i < n; ++i) {
    first[i] = i;
    second[i] = n + i;
  }
  const Matrix anchors = gather_rows(features, first);
  const Matrix candidates = gather_rows(features, second);
  auto anchor_label = [&](std::size_t i) { return labels[i]; };
  auto candidate_label = [&](std::size_t k) { return labels.size() == n ? labels[k] : labels[n + k]; };
  return detail::positive_set_loss(
      anchors, candidates, [&](std::size_t i, std::size_t k) { return anchor_label(i) == candidate_label(k); },
      cfg.tau);
}

/// Two-view InfoNCE (NT-Xent, view 1 against view 2) with the same
/// mean-normalised denominator; equals supcon_reference with distinct labels.
inline LossResult infonce_reference(const Batch& b, const LossConfig& cfg) {
  cfg.validate();
  return detail::positive_set_loss(b.anchors, b.candidates,
                                   [](std::size_t i, std::size_t k) { return i == k; }, cfg.tau);
}

using LossFn = std::function<LossResult(const Batch&, const LossConfig&)>;

/// Average of loss(view1 -> view2) and loss(view2 -> view1).
inline LossResult symmetrized(const LossFn& fn, const Batch& b, const LossConfig& cfg) {
  const LossResult fwd = fn(b, cfg);
  const LossResult bwd = fn(b.swapped(), cfg);
  LossResult out{0.5 * (fwd.value + bwd.value), scaled(fwd.grad_anchor, 0.5), scaled(fwd.grad_candidate, 0.5)};
  axpy(out.grad_anchor, 0.5, bwd.grad_candidate);
  axpy(out.grad_candidate, 0.5, bwd.grad_anchor);
  return out;
}

/// Training objectives selectable by configuration.
enum class LossKind { infonce, supcon, yaware, align_global, align_cond };

inline std::string_view to_string(LossKind k) {
  switch (k) {
    case LossKind::infonce: return "infonce";
    case LossKind::supcon: return "supcon";
    case LossKind::yaware: return "yaware";
    case LossKind::align_global: return "align+global_unif";
    case LossKind::align_cond: return "align+cond_unif";
  }
  return "?";
}

inline LossKind parse_loss_kind(std::string_view s) {
  if (s == "infonce") return LossKind::infonce;
  if (s == "supcon") return LossKind::supcon;
  if (s == "yaware") return LossKind::yaware;
  if (s == "align+global_unif") return LossKind::align_global;
  if (s == "align+cond_unif") return LossKind::align_cond;
  throw ConfigError("unknown loss kind '" + std::string(s) + "'");
}

}  // namespace condcl

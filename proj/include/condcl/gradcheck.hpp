#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "condcl/encoder.hpp"
#include "condcl/errors.hpp"
#include "condcl/kernels.hpp"
#include "condcl/losses.hpp"
#include "condcl/numerics.hpp"
#include "condcl/parallel.hpp"

namespace condcl {

/// Comparison of one analytic gradient against central differences.
///
/// max_rel_err is normwise: max_abs_err / max(|analytic|_inf, |numeric|_inf,
/// kRelErrFloor). Entrywise ratios are meaningless for entries that are zero
/// up to roundoff, which every loss here has once N grows; the floor keeps a
/// gradient that is itself ~1e-7 from turning 1e-11 roundoff into a failure. worst_index is the (row, col) of
/// max_abs_err; for loss checks rows index the stacked [anchors; candidates].
struct GradReport {
  std::string op_name;
  std::size_t n = 0;
  std::size_t d = 0;
  std::uint64_t seed = 0;
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;
  std::pair<std::size_t, std::size_t> worst_index{0, 0};
  bool passed = false;
};

inline constexpr double kRelErrFloor = 1e-4;

using ScalarFn = std::function<double(const Matrix&)>;

/// Central differences (L(f + h e) - L(f - h e)) / 2h for every entry of f.
inline Matrix finite_diff(const ScalarFn& loss_eval, const Matrix& f, double step = 1e-5) {
  if (!(step >= 1e-8 && step <= 1e-3)) throw InvalidArgument("finite_diff: step must lie in [1e-8, 1e-3]");
  Matrix g(f.rows(), f.cols());
  Matrix probe = f;
  for (std::size_t k = 0; k < f.size(); ++k) {
    const double orig = f.values()[k];
    probe.values()[k] = orig + step;
    const double lp = loss_eval(probe);
    probe.values()[k] = orig - step;
    const double lm = loss_eval(probe);
    probe.values()[k] = orig;
    if (!std::isfinite(lp) || !std::isfinite(lm))
      throw NonFiniteLossError("finite_diff: non-finite loss at entry " + std::to_string(k));
    g.values()[k] = (lp - lm) / (2.0 * step);
  }
  return g;
}

/// Fills the error fields of r from an analytic/numeric pair.
inline void compare_gradients(GradReport& r, const Matrix& analytic, const Matrix& numeric, double threshold) {
  require_same_shape(analytic, numeric, "compare_gradients");
  double scale = kRelErrFloor;
  for (std::size_t k = 0; k < analytic.size(); ++k) {
    const double err = std::abs(analytic.values()[k] - numeric.values()[k]);
    if (err > r.max_abs_err || k == 0) {
      r.max_abs_err = err;
      r.worst_index = {k / analytic.cols(), k % analytic.cols()};
    }
    scale = std::max({scale, std::abs(analytic.values()[k]), std::abs(numeric.values()[k])});
  }
  r.max_rel_err = r.max_abs_err / scale;
  r.passed = std::isfinite(r.max_rel_err) && r.max_rel_err < threshold;
}

struct GradcheckOptions {
  LossConfig loss{};
  double step = 1e-5;
  double sigma = 2.0;             // rbf bandwidth on y ~ U[0, 10]
  bool include_references = false; // also check infonce/supcon references
  std::size_t threads = 1;
};

namespace detail {

inline Matrix stack_views(const Matrix& a, const Matrix& c) {
  Matrix out(a.rows() + c.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) std::ranges::copy(a.row(i), out.row(i).begin());
  for (std::size_t i = 0; i < c.rows(); ++i) std::ranges::copy(c.row(i), out.row(a.rows() + i).begin());
  return out;
}

struct GradOp {
  std::string name;
  // value and stacked [grad_anchor; grad_candidate] from stacked features
  std::function<LossResult(const Matrix& stacked)> eval;
};

inline std::vector<GradOp> loss_ops(const WeightMatrix& w, std::vector<int> labels, const GradcheckOptions& opt) {
  const LossConfig cfg = opt.loss;
  auto wrap = [w, cfg](LossResult (*fn)(const Batch&, const LossConfig&)) {
    return [w, cfg, fn](const Matrix& s) {
      const std::size_t n = s.rows() / 2;
      std::vector<std::size_t> first(n), second(n);
      for (std::size_t i = 0; i < n; ++i) first[i] = i, second[i] = n + i;
      const Batch b = Batch::make(gather_rows(s, first), gather_rows(s, second), w, 1.0, 1e-3);
      return fn(b, cfg);
    };
  };
  std::vector<GradOp> ops{
      {"yaware_infonce", wrap(yaware_infonce)},
      {"conditional_alignment", wrap(conditional_alignment)},
      {"global_uniformity", wrap(global_uniformity)},
      {"conditional_uniformity", wrap(conditional_uniformity)},
      {"combined_objective", wrap(combined_objective)},
  };
  if (opt.include_references) {
    ops.push_back({"infonce_reference", wrap(infonce_reference)});
    ops.push_back({"supcon_reference",
                   [labels, cfg](const Matrix& s) { return supcon_reference(s, labels, cfg); }});
  }
  return ops;
}

}  // namespace detail

inline std::vector<std::string> gradcheck_op_names(bool include_references) {
  std::vector<std::string> names{"yaware_infonce", "conditional_alignment", "global_uniformity",
                                 "conditional_uniformity", "combined_objective"};
  if (include_references) {
    names.push_back("infonce_reference");
    names.push_back("supcon_reference");
  }
  return names;
}

/// One report per (loss OP, seed, size). All ops for a given (seed, size)
/// see the same random batch: unit-norm features, weights
/// from an rbf kernel on y ~ U[0, 10], labels y // 2.5 for supcon.
/// Failures are reported, never thrown.
inline std::vector<GradReport> check_all(const std::vector<std::uint64_t>& seeds,
                                         const std::vector<std::pair<std::size_t, std::size_t>>& sizes,
                                         double threshold = 1e-6, const GradcheckOptions& opt = {}) {
  const std::size_t n_ops = gradcheck_op_names(opt.include_references).size();
  const std::size_t total = n_ops * seeds.size() * sizes.size();
  std::vector<GradReport> reports(total);
  parallel_for(seeds.size() * sizes.size(), opt.threads, [&](std::size_t job) {
    const std::uint64_t seed = seeds[job / sizes.size()];
    const std::size_t si = job % sizes.size();
    const auto [n, d] = sizes[si];
    Rng rng = Rng(seed).split(si);
    const Matrix a = random_sphere(n, d, rng);
    const Matrix c = random_sphere(n, d, rng);
    MetaBatch meta(n);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double y = rng.uniform(0.0, 10.0);
      meta[i].continuous = {y};
      labels[i] = static_cast<int>(y / 2.5);
    }
    // supcon needs a positive for every anchor; its own view always is one
    const WeightMatrix w = weight_matrix(meta, KernelConfig::make(KernelFamily::rbf, opt.sigma));
    const Matrix stacked = detail::stack_views(a, c);
    const auto ops = detail::loss_ops(w, labels, opt);
    for (std::size_t o = 0; o < ops.size(); ++o) {
      GradReport& r = reports[job * n_ops + o];
      r.op_name = ops[o].name;
      r.n = n;
      r.d = d;
      r.seed = seed;
      try {
        const LossResult res = ops[o].eval(stacked);
        const Matrix analytic = detail::stack_views(res.grad_anchor, res.grad_candidate);
        const Matrix numeric =
            finite_diff([&](const Matrix& s) { return ops[o].eval(s).value; }, stacked, opt.step);
        compare_gradients(r, analytic, numeric, threshold);
      } catch (const Error&) {
        r.max_abs_err = r.max_rel_err = std::numeric_limits<double>::max();
        r.passed = false;
      }
    }
  });
  return reports;
}

/// End-to-end check of loss(normalize(mlp(x1)), normalize(mlp(x2))) against
/// central differences in every network parameter. One report per seed,
/// covering all layers (worst_index rows count through the layers' rows in
/// order, weights before bias).
inline GradReport check_encoder(std::uint64_t seed, std::size_t n = 6, std::vector<std::size_t> dims = {5, 8, 4},
                                double threshold = 1e-5, const GradcheckOptions& opt = {}) {
  Rng rng(seed);
  const Mlp model = Mlp::init(dims, rng);
  const Matrix x1 = random_normal(n, dims.front(), rng);
  const Matrix x2 = random_normal(n, dims.front(), rng);
  MetaBatch meta(n);
  for (auto& r : meta) r.continuous = {rng.uniform(0.0, 10.0)};
  const WeightMatrix w = weight_matrix(meta, KernelConfig::make(KernelFamily::rbf, opt.sigma));

  auto loss_of = [&](const Mlp& m) {
    const auto [f1, c1] = forward(m, x1);
    const auto [f2, c2] = forward(m, x2);
    return yaware_infonce(Batch::make(f1, f2, w), opt.loss).value;
  };
  const auto [f1, c1] = forward(model, x1);
  const auto [f2, c2] = forward(model, x2);
  const LossResult res = yaware_infonce(Batch::make(f1, f2, w), opt.loss);
  MlpGradients g = backward(model, c1, res.grad_anchor);
  accumulate(g, backward(model, c2, res.grad_candidate));

  // flatten every parameter into one column so a single report covers all
  std::vector<double> analytic, numeric;
  for (std::size_t l = 0; l < model.depth(); ++l) {
    for (int which = 0; which < 2; ++which) {
      const Matrix& p = which ? model.layers()[l].bias : model.layers()[l].weight;
      const Matrix& ga = which ? g.layers[l].bias : g.layers[l].weight;
      const Matrix num = finite_diff(
          [&](const Matrix& probe) {
            Mlp m = model;
            (which ? m.mutable_layers()[l].bias : m.mutable_layers()[l].weight) = probe;
            return loss_of(m);
          },
          p, opt.step);
      analytic.insert(analytic.end(), ga.values().begin(), ga.values().end());
      numeric.insert(numeric.end(), num.values().begin(), num.values().end());
    }
  }
  GradReport r;
  r.op_name = "encoder_yaware";
  r.n = n;
  r.d = dims.back();
  r.seed = seed;
  compare_gradients(r, Matrix(analytic.size(), 1, analytic), Matrix(numeric.size(), 1, numeric), threshold);
  return r;
}

/// Every (N, d) pair of the standard sweep: N in {2, 3, 8, 32}, d in {2, 8, 64}.
inline std::vector<std::pair<std::size_t, std::size_t>> standard_sweep_sizes() {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t n : {2, 3, 8, 32})
    for (std::size_t d : {2, 8, 64}) out.emplace_back(n, d);
  return out;
}

}  // namespace condcl

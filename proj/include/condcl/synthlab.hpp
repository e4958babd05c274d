#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "condcl/encoder.hpp"
#include "condcl/errors.hpp"
#include "condcl/kernels.hpp"
#include "condcl/losses.hpp"
#include "condcl/numerics.hpp"
#include "condcl/parallel.hpp"

namespace condcl {

// ---------------------------------------------------------------------------
// Label distributions

struct UniformLabels {
  double lo = 0.0;
  double hi = 10.0;
};

struct GaussianMixtureLabels {
  std::vector<double> weights;
  std::vector<double> means;
  std::vector<double> stddevs;
};

/// Finitely many label values; value k also carries latent class k.
struct DiscreteLabels {
  std::vector<double> values;
  std::vector<double> probs;
};

using LabelDist = std::variant<UniformLabels, GaussianMixtureLabels, DiscreteLabels>;

/// A drawn label: its value plus the latent class (-1 when continuous).
struct Label {
  double value = 0.0;
  int cls = -1;

  MetaRecord meta() const {
    MetaRecord r;
    r.continuous = {value};
    if (cls >= 0) r.categorical = {cls};
    return r;
  }
};

namespace detail {

inline std::size_t draw_index(std::span<const double> probs, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t k = 0; k < probs.size(); ++k) {
    acc += probs[k];
    if (u < acc) return k;
  }
  return probs.size() - 1;
}

inline void check_probs(std::span<const double> p, const char* what) {
  if (p.empty()) throw InvalidArgument(std::string(what) + ": no components");
  double s = 0.0;
  for (double v : p) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw InvalidArgument(std::string(what) + ": negative probability");
    s += v;
  }
  if (std::abs(s - 1.0) > 1e-9) throw InvalidArgument(std::string(what) + ": probabilities do not sum to 1");
}

}  // namespace detail

inline void validate(const LabelDist& dist) {
  std::visit(
      [](const auto& d) {
        using T = std::decay_t<decltype(d)>;
        if constexpr (std::is_same_v<T, UniformLabels>) {
          if (!(d.hi > d.lo)) throw InvalidArgument("UniformLabels: need lo < hi");
        } else if constexpr (std::is_same_v<T, GaussianMixtureLabels>) {
          detail::check_probs(d.weights, "GaussianMixtureLabels");
          if (d.means.size() != d.weights.size() || d.stddevs.size() != d.weights.size())
            throw ShapeMismatchError("GaussianMixtureLabels: component lists differ in length");
          for (double s : d.stddevs)
            if (!(s > 0.0)) throw InvalidArgument("GaussianMixtureLabels: stddev must be positive");
        } else {
          detail::check_probs(d.probs, "DiscreteLabels");
          if (d.values.size() != d.probs.size()) throw ShapeMismatchError("DiscreteLabels: values/probs differ");
        }
      },
      dist);
}

inline Label sample_label(const LabelDist& dist, Rng& rng) {
  return std::visit(
      [&](const auto& d) -> Label {
        using T = std::decay_t<decltype(d)>;
        if constexpr (std::is_same_v<T, UniformLabels>) {
          return {rng.uniform(d.lo, d.hi), -1};
        } else if constexpr (std::is_same_v<T, GaussianMixtureLabels>) {
          const std::size_t k = detail::draw_index(d.weights, rng);
          return {d.means[k] + d.stddevs[k] * rng.normal(), -1};
        } else {
          const std::size_t k = detail::draw_index(d.probs, rng);
          return {d.values[k], static_cast<int>(k)};
        }
      },
      dist);
}

// ---------------------------------------------------------------------------
// Generative model

/// p(y) plus p(x|y) on the unit sphere S^{dim-1}.
///
/// Mean direction: for continuous labels, a great-circle arc
/// mu(y) = cos(t) e1 + sin(t) e2 with t = pi (y - lo) / (hi - lo); for latent
/// classes (DiscreteLabels with latent_classes set) the axis e_{c mod dim}.
/// Noise: x = normalize(mu + g / sqrt(kappa)), g ~ N(0, I); kappa = infinity
/// makes p(x|y) a point mass at mu(y).
struct SyntheticModel {
  LabelDist labels = UniformLabels{};
  std::size_t dim = 3;
  double kappa = 20.0;
  bool latent_classes = false;
  double arc_lo = 0.0;
  double arc_hi = 10.0;

  void validate() const {
    condcl::validate(labels);
    if (dim < 2) throw InvalidArgument("SyntheticModel: dim must be >= 2");
    if (!(kappa > 0.0)) throw InvalidArgument("SyntheticModel: kappa must be positive");
    if (!(arc_hi > arc_lo)) throw InvalidArgument("SyntheticModel: need arc_lo < arc_hi");
    if (latent_classes && !std::holds_alternative<DiscreteLabels>(labels))
      throw InvalidArgument("SyntheticModel: latent classes need discrete labels");
  }

  std::vector<double> mean_direction(const Label& y) const {
    std::vector<double> mu(dim, 0.0);
    if (latent_classes) {
      mu[static_cast<std::size_t>(y.cls) % dim] = 1.0;
      return mu;
    }
    const double t = std::numbers::pi * (y.value - arc_lo) / (arc_hi - arc_lo);
    mu[0] = std::cos(t);
    mu[1] = std::sin(t);
    return mu;
  }

  /// x ~ p(x|y), unit norm.
  std::vector<double> sample_x(const Label& y, Rng& rng) const {
    std::vector<double> x = mean_direction(y);
    if (std::isfinite(kappa)) {
      const double s = 1.0 / std::sqrt(kappa);
      for (double& v : x) v += s * rng.normal();
    }
    const double n = norm(x);
    if (!(n > 1e-30)) throw ZeroRowError("SyntheticModel: degenerate noise draw");
    for (double& v : x) v /= n;
    return x;
  }
};

/// The model used when nothing else is configured: y ~ U[0, 10] on S^2,
/// kappa = 20.
inline SyntheticModel default_synthetic_model() { return SyntheticModel{}; }

// ---------------------------------------------------------------------------
// Frozen encoders

/// Fixed map from inputs to the unit sphere: identity (inputs already on the
/// sphere) or an untrained MLP.
class FrozenEncoder {
 public:
  FrozenEncoder() = default;
  explicit FrozenEncoder(Mlp net) : net_(std::move(net)) {}

  static FrozenEncoder identity() { return FrozenEncoder(); }
  static FrozenEncoder random_mlp(std::vector<std::size_t> dims, Rng& rng) {
    return FrozenEncoder(Mlp::init(std::move(dims), rng));
  }

  bool is_identity() const noexcept { return !net_.has_value(); }

  Matrix encode(const Matrix& x) const {
    if (!net_) return row_normalize(x);
    return forward(*net_, x).first;
  }

 private:
  std::optional<Mlp> net_;
};

// ---------------------------------------------------------------------------
// Positive / negative pair samplers

struct PairSample {
  std::vector<double> x;
  Label y;
  std::vector<double> x_other;
  Label y_other;
};

inline constexpr std::size_t kRejectionBudget = 1'000'000;

namespace detail {

inline void require_unit_sup(const KernelConfig& cfg) {
  if (cfg.sup_norm != 1.0) throw InvalidArgument("pair samplers need a kernel with sup norm 1");
}

// y' ~ p(y) accepted with probability accept(w(y, y')).
template <class Accept>
Label rejection_draw(const SyntheticModel& m, const KernelConfig& cfg, const Label& y, Rng& rng, Accept accept,
                     const char* what) {
  const MetaRecord ym = y.meta();
  for (std::size_t tries = 0; tries < kRejectionBudget; ++tries) {
    const Label cand = sample_label(m.labels, rng);
    const double w = kernel_value(ym, cand.meta(), cfg);
    if (rng.uniform() < accept(w)) return cand;
  }
  throw RejectionBudgetError(std::string(what) + ": " + std::to_string(kRejectionBudget) +
                             " consecutive proposals rejected");
}

}  // namespace detail

/// (x, y, x+, y+) with y ~ p(y), y+ ~ w(y, .) p(.) / Z(y), x ~ p(x|y),
/// x+ ~ p(x|y+). Exact: w <= 1 makes p(y) a valid rejection envelope.
inline PairSample sample_positive_pair(const SyntheticModel& m, const KernelConfig& cfg, Rng& rng) {
  detail::require_unit_sup(cfg);
  PairSample s;
  s.y = sample_label(m.labels, rng);
  s.y_other = detail::rejection_draw(m, cfg, s.y, rng, [](double w) { return w; }, "sample_positive_pair");
  s.x = m.sample_x(s.y, rng);
  s.x_other = m.sample_x(s.y_other, rng);
  return s;
}

/// (x, y, x-, y-) with y- ~ (1 - w(y, .)) p(.) / (1 - Z(y)).
inline PairSample sample_negative_pair(const SyntheticModel& m, const KernelConfig& cfg, Rng& rng) {
  detail::require_unit_sup(cfg);
  PairSample s;
  s.y = sample_label(m.labels, rng);
  s.y_other =
      detail::rejection_draw(m, cfg, s.y, rng, [](double w) { return 1.0 - w; }, "sample_negative_pair");
  s.x = m.sample_x(s.y, rng);
  s.x_other = m.sample_x(s.y_other, rng);
  return s;
}

// ---------------------------------------------------------------------------
// Monte Carlo limit of the y-aware InfoNCE loss

struct Estimate {
  double mean = 0.0;
  double stderr_ = 0.0;
};

struct LimitTerms {
  Estimate align;  // E_pos[f(x, x+)]
  Estimate unif;   // E_x log E_x' exp f(x, x')
};

struct LimitOptions {
  std::size_t blocks = 64;       // batch-means blocks
  std::size_t n_inner = 0;       // 0 means sqrt(n_samples)
  std::size_t chunk = 4096;      // rows encoded at once
};

namespace detail {

inline Estimate batch_means(const std::vector<double>& block_means) {
  const double b = static_cast<double>(block_means.size());
  double mean = 0.0;
  for (double v : block_means) mean += v;
  mean /= b;
  double ss = 0.0;
  for (double v : block_means) ss += (v - mean) * (v - mean);
  const double se = block_means.size() > 1 ? std::sqrt(ss / (b - 1.0) / b) : std::numeric_limits<double>::quiet_NaN();
  return {mean, se};
}

inline Matrix rows_to_matrix(const std::vector<std::vector<double>>& rows) {
  Matrix m(rows.size(), rows.empty() ? 0 : rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i) std::ranges::copy(rows[i], m.row(i).begin());
  return m;
}

// n draws x ~ p(x) (y ~ p(y), x ~ p(x|y)), encoded.
inline Matrix encoded_marginal(const SyntheticModel& m, const FrozenEncoder& enc, std::size_t n, Rng& rng) {
  std::vector<std::vector<double>> xs(n);
  for (auto& x : xs) x = m.sample_x(sample_label(m.labels, rng), rng);
  return enc.encode(rows_to_matrix(xs));
}

}  // namespace detail

/// align: mean of f(x, x+) = <enc(x), enc(x+)> / tau over n_samples positive
/// pairs. unif: nested estimator; each of `blocks` blocks draws a fresh inner
/// pool of n_inner marginal samples and averages log mean exp f(x, x') over
/// its share of the outer samples. Standard errors are batch means over the
/// blocks, so they include the inner-pool variability.
inline LimitTerms mc_limit_terms(const SyntheticModel& m, const FrozenEncoder& enc, const KernelConfig& cfg,
                                 const LossConfig& loss_cfg, std::size_t n_samples, Rng& rng,
                                 const LimitOptions& opt = {}) {
  m.validate();
  loss_cfg.validate();
  if (n_samples < 1000) throw InvalidArgument("mc_limit_terms: n_samples must be >= 1000");
  if (opt.blocks < 2 || opt.blocks > n_samples) throw InvalidArgument("mc_limit_terms: bad block count");
  const std::size_t n_inner =
      opt.n_inner ? opt.n_inner : static_cast<std::size_t>(std::sqrt(static_cast<double>(n_samples)));
  const double inv_tau = 1.0 / loss_cfg.tau;
  Rng align_rng = rng.split(0);
  Rng unif_rng = rng.split(1);

  LimitTerms out;
  std::vector<double> align_blocks, unif_blocks;
  for (std::size_t b = 0; b < opt.blocks; ++b) {
    const std::size_t lo = b * n_samples / opt.blocks, hi = (b + 1) * n_samples / opt.blocks;

    double align_sum = 0.0;
    for (std::size_t start = lo; start < hi; start += opt.chunk) {
      const std::size_t len = std::min(opt.chunk, hi - start);
      std::vector<std::vector<double>> xs(len), xp(len);
      for (std::size_t i = 0; i < len; ++i) {
        auto s = sample_positive_pair(m, cfg, align_rng);
        xs[i] = std::move(s.x);
        xp[i] = std::move(s.x_other);
      }
      const Matrix fx = enc.encode(detail::rows_to_matrix(xs));
      const Matrix fp = enc.encode(detail::rows_to_matrix(xp));
      for (std::size_t i = 0; i < len; ++i) align_sum += dot(fx.row(i), fp.row(i)) * inv_tau;
    }
    align_blocks.push_back(align_sum / static_cast<double>(hi - lo));

    const Matrix inner = detail::encoded_marginal(m, enc, n_inner, unif_rng);
    const double log_n_inner = std::log(static_cast<double>(n_inner));
    double unif_sum = 0.0;
    std::vector<double> s(n_inner);
    for (std::size_t start = lo; start < hi; start += opt.chunk) {
      const std::size_t len = std::min(opt.chunk, hi - start);
      const Matrix outer = detail::encoded_marginal(m, enc, len, unif_rng);
      for (std::size_t i = 0; i < len; ++i) {
        for (std::size_t j = 0; j < n_inner; ++j) s[j] = dot(outer.row(i), inner.row(j)) * inv_tau;
        unif_sum += logsumexp(s) - log_n_inner;
      }
    }
    unif_blocks.push_back(unif_sum / static_cast<double>(hi - lo));
  }
  out.align = detail::batch_means(align_blocks);
  out.unif = detail::batch_means(unif_blocks);
  return out;
}

// ---------------------------------------------------------------------------
// Convergence of the batch loss to its limit

/// Value of the y-aware InfoNCE loss computed row by row, without forming any
/// N x N matrix. Agrees with yaware_infonce(...).value.
inline double yaware_infonce_value(const Matrix& anchors, const Matrix& candidates, const MetaBatch& meta,
                                   const KernelConfig& kcfg, const LossConfig& cfg) {
  cfg.validate();
  require_same_shape(anchors, candidates, "yaware_infonce_value");
  if (meta.size() != anchors.rows()) throw ShapeMismatchError("yaware_infonce_value: meta length differs");
  check_batch_arity(meta);
  const std::size_t n = anchors.rows();
  const double nd = static_cast<double>(n);
  std::vector<double> s(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double wsum = 0.0, ws = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      s[k] = dot(anchors.row(i), candidates.row(k)) / cfg.tau;
      const double w = kernel_value(meta[i], meta[k], kcfg);
      wsum += w;
      ws += w * s[k];
    }
    if (!(wsum / nd > cfg.epsilon)) throw DegenerateWeightsError("yaware_infonce_value: z_hat below epsilon");
    total += -(ws / wsum) + logsumexp(s) - std::log(nd);
  }
  return total / nd;
}

struct ConvergenceRow {
  std::size_t n = 0;
  std::size_t rep = 0;
  double loss_value = 0.0;
  double abs_gap = 0.0;
};

struct ConvergenceSummary {
  std::size_t n = 0;
  double mean_gap = 0.0;
  std::optional<double> stderr_gap;  // absent with a single rep
};

struct ConvergenceTable {
  LimitTerms limit;
  double limit_loss = 0.0;  // -align + unif
  std::vector<ConvergenceRow> rows;
  std::vector<ConvergenceSummary> summary;
  std::optional<double> loglog_slope;  // least squares of log mean gap on log N
};

struct ConvergenceOptions {
  std::size_t limit_samples = 200'000;
  LimitOptions limit{};
  std::size_t threads = 1;
};

/// Least-squares slope of log(ys) against log(xs).
inline double loglog_slope(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size() || xs.size() < 2) throw InvalidArgument("loglog_slope: need >= 2 points");
  double mx = 0.0, my = 0.0;
  for (std::size_t k = 0; k < xs.size(); ++k) mx += std::log(xs[k]), my += std::log(ys[k]);
  mx /= static_cast<double>(xs.size());
  my /= static_cast<double>(xs.size());
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const double dx = std::log(xs[k]) - mx;
    sxy += dx * (std::log(ys[k]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

/// For each N and rep: y_i ~ p(y), two views x_i, x'_i ~ p(x|y_i), the batch
/// loss L(N), and |L(N) - (-align + unif)| against one Monte Carlo limit.
inline ConvergenceTable convergence_experiment(const SyntheticModel& m, const FrozenEncoder& enc,
                                               const KernelConfig& cfg, const LossConfig& loss_cfg,
                                               const std::vector<std::size_t>& batch_sizes, std::size_t reps,
                                               Rng& rng, const ConvergenceOptions& opt = {}) {
  if (batch_sizes.empty() || reps == 0) throw InvalidArgument("convergence_experiment: nothing to run");
  for (std::size_t k = 0; k < batch_sizes.size(); ++k) {
    if (batch_sizes[k] < 2) throw InvalidArgument("convergence_experiment: batch sizes must be >= 2");
    if (k > 0 && batch_sizes[k] <= batch_sizes[k - 1])
      throw InvalidArgument("convergence_experiment: batch sizes must ascend");
  }
  ConvergenceTable t;
  Rng limit_rng = rng.split(0);
  t.limit = mc_limit_terms(m, enc, cfg, loss_cfg, opt.limit_samples, limit_rng, opt.limit);
  t.limit_loss = -t.limit.align.mean + t.limit.unif.mean;

  t.rows.resize(batch_sizes.size() * reps);
  const Rng base = rng.split(1);
  parallel_for(t.rows.size(), opt.threads, [&](std::size_t job) {
    const std::size_t ni = job / reps, rep = job % reps;
    const std::size_t n = batch_sizes[ni];
    Rng r = base.split(job);
    MetaBatch meta(n);
    Matrix x1(n, m.dim), x2(n, m.dim);
    for (std::size_t i = 0; i < n; ++i) {
      const Label y = sample_label(m.labels, r);
      meta[i] = y.meta();
      std::ranges::copy(m.sample_x(y, r), x1.row(i).begin());
      std::ranges::copy(m.sample_x(y, r), x2.row(i).begin());
    }
    const double value = yaware_infonce_value(enc.encode(x1), enc.encode(x2), meta, cfg, loss_cfg);
    t.rows[job] = {n, rep, value, std::abs(value - t.limit_loss)};
  });

  std::vector<double> xs, ys;
  for (std::size_t ni = 0; ni < batch_sizes.size(); ++ni) {
    std::vector<double> gaps;
    for (std::size_t rep = 0; rep < reps; ++rep) gaps.push_back(t.rows[ni * reps + rep].abs_gap);
    ConvergenceSummary s{batch_sizes[ni], 0.0, std::nullopt};
    if (reps > 1) {
      const Estimate e = detail::batch_means(gaps);
      s.mean_gap = e.mean;
      s.stderr_gap = e.stderr_;
    } else {
      s.mean_gap = gaps.front();
    }
    t.summary.push_back(s);
    xs.push_back(static_cast<double>(s.n));
    ys.push_back(s.mean_gap);
  }
  if (xs.size() >= 2) t.loglog_slope = loglog_slope(xs, ys);
  return t;
}

}  // namespace condcl

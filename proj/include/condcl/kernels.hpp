#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "condcl/errors.hpp"
#include "condcl/numerics.hpp"

namespace condcl {

/// Proxy label y attached to one sample: a continuous part (e.g. age) and a
/// categorical part (e.g. sex code, class label).
struct MetaRecord {
  std::vector<double> continuous;
  std::vector<int> categorical;

  friend bool operator==(const MetaRecord&, const MetaRecord&) = default;
};

using MetaBatch = std::vector<MetaRecord>;

enum class KernelFamily { rbf, categorical, product };

inline std::string_view to_string(KernelFamily f) {
  switch (f) {
    case KernelFamily::rbf: return "rbf";
    case KernelFamily::categorical: return "categorical";
    case KernelFamily::product: return "product";
  }
  throw UnknownFamilyError("unknown kernel family");
}

inline KernelFamily parse_kernel_family(std::string_view name) {
  if (name == "rbf") return KernelFamily::rbf;
  if (name == "categorical") return KernelFamily::categorical;
  if (name == "product") return KernelFamily::product;
  throw UnknownFamilyError("unknown kernel family '" + std::string(name) + "'");
}

struct KernelConfig;
double kernel_sup_norm(const KernelConfig& cfg);

/// Kernel family, bandwidth and sup-norm M = ||w||_inf.
///
/// sigma has no default: it is required for rbf and product, ignored for
/// categorical. Build through make() so sup_norm is validated.
struct KernelConfig {
  KernelFamily family = KernelFamily::rbf;
  double sigma = 0.0;
  double sup_norm = 1.0;

  static KernelConfig make(KernelFamily family, std::optional<double> sigma = std::nullopt) {
    KernelConfig cfg;
    cfg.family = family;
    if (family != KernelFamily::categorical) {
      if (!sigma) throw BandwidthError("kernel '" + std::string(to_string(family)) + "' requires sigma");
      if (!(*sigma > 0.0) || !std::isfinite(*sigma))
        throw BandwidthError("kernel bandwidth must be positive and finite");
      cfg.sigma = *sigma;
    } else {
      cfg.sigma = sigma.value_or(0.0);
    }
    cfg.sup_norm = kernel_sup_norm(cfg);
    return cfg;
  }
};

inline double kernel_sup_norm(const KernelConfig& cfg) {
  switch (cfg.family) {
    case KernelFamily::rbf:
    case KernelFamily::categorical:
    case KernelFamily::product:
      return 1.0;
  }
  throw UnknownFamilyError("kernel_sup_norm: unknown kernel family");
}

/// exp(-||y1 - y2||^2 / (2 sigma^2)) over the continuous parts.
inline double rbf_kernel(const MetaRecord& y1, const MetaRecord& y2, double sigma) {
  if (!(sigma > 0.0)) throw BandwidthError("rbf_kernel: sigma must be positive");
  if (y1.continuous.size() != y2.continuous.size())
    throw ArityMismatchError("rbf_kernel: continuous arity differs");
  double sq = 0.0;
  for (std::size_t k = 0; k < y1.continuous.size(); ++k) {
    const double d = y1.continuous[k] - y2.continuous[k];
    sq += d * d;
  }
  return std::exp(-sq / (2.0 * sigma * sigma));
}

/// 1 if every categorical code matches (vacuously true when empty), else 0.
inline double categorical_kernel(const MetaRecord& y1, const MetaRecord& y2) {
  if (y1.categorical.size() != y2.categorical.size())
    throw ArityMismatchError("categorical_kernel: categorical arity differs");
  return y1.categorical == y2.categorical ? 1.0 : 0.0;
}

inline double product_kernel(const MetaRecord& y1, const MetaRecord& y2, double sigma) {
  const double c = categorical_kernel(y1, y2);
  const double r = rbf_kernel(y1, y2, sigma);
  return r * c;
}

inline double kernel_value(const MetaRecord& y1, const MetaRecord& y2, const KernelConfig& cfg) {
  switch (cfg.family) {
    case KernelFamily::rbf: return rbf_kernel(y1, y2, cfg.sigma);
    case KernelFamily::categorical: return categorical_kernel(y1, y2);
    case KernelFamily::product: return product_kernel(y1, y2, cfg.sigma);
  }
  throw UnknownFamilyError("kernel_value: unknown kernel family");
}

/// All pairwise kernel values over a batch plus the empirical normaliser
/// z_hat[i] = mean_j w[i][j]. Values are never row-normalised here.
struct WeightMatrix {
  Matrix w;
  std::vector<double> z_hat;

  std::size_t size() const noexcept { return w.rows(); }

  /// Wraps an externally built N x N kernel matrix, computing z_hat.
  static WeightMatrix from_matrix(Matrix w) {
    if (w.rows() != w.cols()) throw ShapeMismatchError("WeightMatrix: matrix must be square");
    WeightMatrix out;
    const std::size_t n = w.rows();
    out.z_hat.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += w(i, j);
      out.z_hat[i] = s / static_cast<double>(n);
    }
    out.w = std::move(w);
    return out;
  }

  WeightMatrix transposed() const { return from_matrix(transpose(w)); }
};

inline void check_batch_arity(const MetaBatch& batch) {
  for (const auto& r : batch) {
    if (r.continuous.size() != batch.front().continuous.size() ||
        r.categorical.size() != batch.front().categorical.size())
      throw ArityMismatchError("meta batch records have differing arity");
    for (double v : r.continuous)
      if (!std::isfinite(v)) throw NonFiniteError("meta record has a non-finite continuous entry");
    for (int c : r.categorical)
      if (c < 0) throw InvalidArgument("meta record has a negative categorical code");
  }
}

inline WeightMatrix weight_matrix(const MetaBatch& batch, const KernelConfig& cfg) {
  if (batch.empty()) throw EmptyInputError("weight_matrix: empty batch");
  check_batch_arity(batch);
  const std::size_t n = batch.size();
  Matrix w(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      const double v = kernel_value(batch[i], batch[j], cfg);
      w(i, j) = v;
      w(j, i) = v;
    }
  }
  return WeightMatrix::from_matrix(std::move(w));
}

/// w[i][j] = 1 iff labels match: the delta kernel on class labels.
inline WeightMatrix label_weights(std::span<const int> labels) {
  const std::size_t n = labels.size();
  if (n == 0) throw EmptyInputError("label_weights: empty labels");
  Matrix w(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) w(i, j) = labels[i] == labels[j] ? 1.0 : 0.0;
  return WeightMatrix::from_matrix(std::move(w));
}

/// w[i][j] = 1 iff i == j: each anchor's only positive is its own view.
inline WeightMatrix identity_weights(std::size_t n) {
  if (n == 0) throw EmptyInputError("identity_weights: empty batch");
  Matrix w(n, n);
  for (std::size_t i = 0; i < n; ++i) w(i, i) = 1.0;
  return WeightMatrix::from_matrix(std::move(w));
}

inline MetaBatch gather_meta(const MetaBatch& meta, std::span<const std::size_t> idx) {
  MetaBatch out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(meta[i]);
  return out;
}

}  // namespace condcl

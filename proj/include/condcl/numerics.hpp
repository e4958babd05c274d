#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "condcl/errors.hpp"

namespace condcl {

/// Dense row-major matrix of doubles.
///
/// Constructors reject non-finite entries; element access afterwards is
/// unchecked, so code that writes through operator() owns the finiteness
/// invariant for what it writes.
class Matrix {
 public:
  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeMismatchError("Matrix: data length " + std::to_string(data_.size()) +
                               " does not match " + std::to_string(rows_) + "x" +
                               std::to_string(cols_));
    }
    for (double v : data_) {
      if (!std::isfinite(v)) throw NonFiniteError("Matrix: non-finite entry");
    }
  }

  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeMismatchError("Matrix: ragged initializer");
      for (double v : r) {
        if (!std::isfinite(v)) throw NonFiniteError("Matrix: non-finite entry");
        data_.push_back(v);
      }
    }
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeMismatchError(std::string(what) + ": shapes " + std::to_string(a.rows()) + "x" +
                             std::to_string(a.cols()) + " and " + std::to_string(b.rows()) + "x" +
                             std::to_string(b.cols()) + " differ");
  }
}

inline double dot(std::span<const double> a, std::span<const double> b) noexcept {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

inline double norm(std::span<const double> a) noexcept { return std::sqrt(dot(a, a)); }

/// Scales every row to unit Euclidean norm. Throws ZeroRowError when a row
/// norm falls below 1e-30.
inline Matrix row_normalize(const Matrix& m) {
  Matrix out = m;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const double n = norm(m.row(i));
    if (!(n >= 1e-30)) throw ZeroRowError("row_normalize: row " + std::to_string(i) + " has zero norm");
    auto r = out.row(i);
    for (double& v : r) v /= n;
  }
  return out;
}

/// log(sum(exp(v))) with max subtraction.
inline double logsumexp(std::span<const double> v) {
  if (v.empty()) throw EmptyInputError("logsumexp: empty input");
  const double mx = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(mx)) throw NonFiniteError("logsumexp: non-finite input");
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

/// out(i, j) = <a_i, b_j>, i.e. a * b^T.
inline Matrix pairwise_dot(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeMismatchError("pairwise_dot: column counts " + std::to_string(a.cols()) + " and " +
                             std::to_string(b.cols()) + " differ");
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto ai = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) out(i, j) = dot(ai, b.row(j));
  }
  return out;
}

/// a * b.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw ShapeMismatchError("matmul: inner dimensions differ");
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto oi = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const auto bk = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) oi[j] += aik * bk[j];
    }
  }
  return out;
}

/// a^T * b.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw ShapeMismatchError("matmul_tn: row counts differ");
  Matrix out(a.cols(), b.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const auto ar = a.row(r);
    const auto br = b.row(r);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double ari = ar[i];
      if (ari == 0.0) continue;
      auto oi = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) oi[j] += ari * br[j];
    }
  }
  return out;
}

inline Matrix transpose(const Matrix& m) {
  Matrix out(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(j, i) = m(i, j);
  return out;
}

inline Matrix scaled(const Matrix& m, double s) {
  Matrix out = m;
  for (double& v : out.values()) v *= s;
  return out;
}

/// a += s * b
inline void axpy(Matrix& a, double s, const Matrix& b) {
  require_same_shape(a, b, "axpy");
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t k = 0; k < av.size(); ++k) av[k] += s * bv[k];
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k)
    m = std::max(m, std::abs(a.values()[k] - b.values()[k]));
  return m;
}

/// Rows of m selected by index, in the given order.
inline Matrix gather_rows(const Matrix& m, std::span<const std::size_t> idx) {
  Matrix out(idx.size(), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) std::ranges::copy(m.row(idx[i]), out.row(i).begin());
  return out;
}

/// Counter-based generator: output n is a SplitMix64 hash of (key, n), so a
/// stream is fully described by two integers and can be split without
/// threading state through callers.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed = 0) : seed_(seed), key_(mix(seed ^ 0x6A09E667F3BCC909ULL)) {}

  static Rng restore(std::uint64_t seed, std::uint64_t key, std::uint64_t counter) {
    Rng r(seed);
    r.key_ = key;
    r.counter_ = counter;
    return r;
  }

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() noexcept {
    ++counter_;
    return mix(key_ + counter_ * 0x9E3779B97F4A7C15ULL);
  }

  /// Independent child stream; does not advance this generator.
  Rng split(std::uint64_t stream) const {
    Rng child(seed_);
    child.key_ = mix(key_ ^ mix(stream + 0xD1B54A32D192ED03ULL));
    return child;
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Standard normal by Box-Muller; consumes exactly two words per draw.
  double normal() noexcept {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw InvalidArgument("Rng::below: empty range");
    // reject the top partial block so every residue is equally likely
    const std::uint64_t limit = max() - max() % n;
    for (;;) {
      const std::uint64_t x = (*this)();
      if (x < limit) return x % n;
    }
  }

  bool bernoulli(double p) noexcept { return uniform() < p; }

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t counter() const noexcept { return counter_; }

  friend bool operator==(const Rng&, const Rng&) = default;

 private:
  static constexpr std::uint64_t mix(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_ = 0;
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

/// Fisher-Yates with Rng::below, so the permutation is identical on every
/// standard library.
template <class T>
void shuffle(std::span<T> v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.below(i));
    std::swap(v[i - 1], v[j]);
  }
}

/// Matrix of i.i.d. standard normals.
inline Matrix random_normal(std::size_t rows, std::size_t cols, Rng& rng) {
  Matrix m(rows, cols);
  for (double& v : m.values()) v = rng.normal();
  return m;
}

/// Random unit-norm rows.
inline Matrix random_sphere(std::size_t rows, std::size_t cols, Rng& rng) {
  return row_normalize(random_normal(rows, cols, rng));
}

}  // namespace condcl

#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "condcl/errors.hpp"
#include "condcl/kernels.hpp"
#include "condcl/losses.hpp"
#include "condcl/numerics.hpp"

namespace condcl {

// Parity fixture file shared with foreign bindings:
//   "CCLF", u16 version, u32 count, then per entry
//   u8 op, f64 tau, f64 lambda, u32 N, u32 d,
//   view1 (N x d), view2 (N x d), weights (N x N),
//   f64 expected value, grad view1 (N x d), grad view2 (N x d).
// Little-endian, matrices row-major f64. Weights come from a kernel with
// sup-norm 1.

enum class FixtureOp : std::uint8_t {
  yaware_infonce = 0,
  conditional_alignment = 1,
  global_uniformity = 2,
  conditional_uniformity = 3,
  combined_objective = 4,
};

inline constexpr std::uint16_t kFixtureVersion = 1;
inline constexpr std::uint8_t kFixtureOpCount = 5;

struct FixtureEntry {
  FixtureOp op = FixtureOp::yaware_infonce;
  double tau = 0.1;
  double lambda = 1.0;
  Matrix view1;
  Matrix view2;
  Matrix weights;
  double value = 0.0;
  Matrix grad1;
  Matrix grad2;
};

inline LossResult evaluate_fixture_op(FixtureOp op, const Matrix& view1, const Matrix& view2, const Matrix& weights,
                                      double tau, double lambda) {
  LossConfig cfg;
  cfg.tau = tau;
  cfg.lambda = lambda;
  const Batch b = Batch::make(view1, view2, WeightMatrix::from_matrix(weights));
  switch (op) {
    case FixtureOp::yaware_infonce: return yaware_infonce(b, cfg);
    case FixtureOp::conditional_alignment: return conditional_alignment(b, cfg);
    case FixtureOp::global_uniformity: return global_uniformity(b, cfg);
    case FixtureOp::conditional_uniformity: return conditional_uniformity(b, cfg);
    case FixtureOp::combined_objective: return combined_objective(b, cfg);
  }
  throw InvalidArgument("unknown fixture op");
}

/// count entries cycling through the ops; N in [1, 16], d in [2, 8],
/// rbf weights (sigma 2) on y ~ U[0, 10]. Expected outputs from the core.
inline std::vector<FixtureEntry> generate_fixture(std::size_t count, std::uint64_t seed) {
  static constexpr double taus[] = {0.05, 0.1, 0.5, 1.0};
  static constexpr double lambdas[] = {0.0, 0.5, 1.0, 2.0};
  const KernelConfig kcfg = KernelConfig::make(KernelFamily::rbf, 2.0);
  Rng root(seed);
  std::vector<FixtureEntry> out;
  for (std::size_t k = 0; k < count; ++k) {
    Rng rng = root.split(k);
    FixtureEntry e;
    e.op = static_cast<FixtureOp>(k % kFixtureOpCount);
    e.tau = taus[rng.below(4)];
    e.lambda = lambdas[rng.below(4)];
    // ops with a uniformity term need two labels far apart
    const bool needs_spread = e.op == FixtureOp::conditional_uniformity || e.op == FixtureOp::combined_objective;
    const std::size_t n = (needs_spread ? 2 : 1) + rng.below(15);
    const std::size_t d = 2 + rng.below(7);
    e.view1 = random_sphere(n, d, rng);
    e.view2 = random_sphere(n, d, rng);
    MetaBatch meta(n);
    for (auto& r : meta) r.continuous = {rng.uniform(0.0, 10.0)};
    if (needs_spread) {
      meta[0].continuous = {rng.uniform(0.0, 1.0)};
      meta[1].continuous = {rng.uniform(9.0, 10.0)};
    }
    e.weights = weight_matrix(meta, kcfg).w;
    const LossResult r = evaluate_fixture_op(e.op, e.view1, e.view2, e.weights, e.tau, e.lambda);
    e.value = r.value;
    e.grad1 = r.grad_anchor;
    e.grad2 = r.grad_candidate;
    out.push_back(std::move(e));
  }
  return out;
}

namespace detail {

inline void fx_put(std::ostream& os, std::uint64_t v, int bytes) {
  for (int b = 0; b < bytes; ++b) os.put(static_cast<char>((v >> (8 * b)) & 0xFF));
}

inline std::uint64_t fx_get(std::istream& is, int bytes) {
  std::uint64_t v = 0;
  for (int b = 0; b < bytes; ++b) {
    const int c = is.get();
    if (c == std::char_traits<char>::eof()) throw FormatError("fixture: unexpected end of file");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * b);
  }
  return v;
}

inline void fx_put_values(std::ostream& os, const Matrix& m) {
  for (double v : m.values()) fx_put(os, std::bit_cast<std::uint64_t>(v), 8);
}

inline Matrix fx_get_matrix(std::istream& is, std::size_t rows, std::size_t cols) {
  std::vector<double> data(rows * cols);
  for (double& v : data) v = std::bit_cast<double>(fx_get(is, 8));
  return Matrix(rows, cols, std::move(data));
}

}  // namespace detail

inline void write_fixture(std::ostream& os, const std::vector<FixtureEntry>& entries) {
  os.write("CCLF", 4);
  detail::fx_put(os, kFixtureVersion, 2);
  detail::fx_put(os, entries.size(), 4);
  for (const auto& e : entries) {
    const std::size_t n = e.view1.rows(), d = e.view1.cols();
    if (e.view2.rows() != n || e.view2.cols() != d || e.weights.rows() != n || e.weights.cols() != n ||
        e.grad1.rows() != n || e.grad1.cols() != d || e.grad2.rows() != n || e.grad2.cols() != d)
      throw ShapeMismatchError("write_fixture: entry shapes are inconsistent");
    detail::fx_put(os, static_cast<std::uint8_t>(e.op), 1);
    detail::fx_put(os, std::bit_cast<std::uint64_t>(e.tau), 8);
    detail::fx_put(os, std::bit_cast<std::uint64_t>(e.lambda), 8);
    detail::fx_put(os, n, 4);
    detail::fx_put(os, d, 4);
    detail::fx_put_values(os, e.view1);
    detail::fx_put_values(os, e.view2);
    detail::fx_put_values(os, e.weights);
    detail::fx_put(os, std::bit_cast<std::uint64_t>(e.value), 8);
    detail::fx_put_values(os, e.grad1);
    detail::fx_put_values(os, e.grad2);
  }
}

inline std::vector<FixtureEntry> read_fixture(std::istream& is) {
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "CCLF") throw FormatError("fixture: bad magic");
  const auto version = detail::fx_get(is, 2);
  if (version != kFixtureVersion) throw FormatError("fixture: unsupported version " + std::to_string(version));
  const auto count = detail::fx_get(is, 4);
  std::vector<FixtureEntry> out;
  for (std::uint64_t k = 0; k < count; ++k) {
    FixtureEntry e;
    const auto op = detail::fx_get(is, 1);
    if (op >= kFixtureOpCount) throw FormatError("fixture: unknown op code " + std::to_string(op));
    e.op = static_cast<FixtureOp>(op);
    e.tau = std::bit_cast<double>(detail::fx_get(is, 8));
    e.lambda = std::bit_cast<double>(detail::fx_get(is, 8));
    const auto n = detail::fx_get(is, 4), d = detail::fx_get(is, 4);
    if (n == 0 || d == 0 || n > (1u << 16) || d > (1u << 16)) throw FormatError("fixture: implausible shape");
    e.view1 = detail::fx_get_matrix(is, n, d);
    e.view2 = detail::fx_get_matrix(is, n, d);
    e.weights = detail::fx_get_matrix(is, n, n);
    e.value = std::bit_cast<double>(detail::fx_get(is, 8));
    e.grad1 = detail::fx_get_matrix(is, n, d);
    e.grad2 = detail::fx_get_matrix(is, n, d);
    out.push_back(std::move(e));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("fixture: trailing bytes");
  return out;
}

inline void write_fixture(const std::string& path, const std::vector<FixtureEntry>& entries) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open '" + path + "' for writing");
  write_fixture(os, entries);
}

inline std::vector<FixtureEntry> read_fixture(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open fixture '" + path + "'");
  return read_fixture(is);
}

}  // namespace condcl

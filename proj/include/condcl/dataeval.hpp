#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "condcl/csv.hpp"
#include "condcl/dataset.hpp"
#include "condcl/encoder.hpp"
#include "condcl/errors.hpp"
#include "condcl/kernels.hpp"
#include "condcl/losses.hpp"
#include "condcl/numerics.hpp"
#include "condcl/synthlab.hpp"

namespace condcl {

// ---------------------------------------------------------------------------
// CIFAR-10 binary format: records of 1 label byte (0-9) + 3072 pixel bytes
// (1024 red, 1024 green, 1024 blue, each row-major 32x32).

inline constexpr std::size_t kCifarSide = 32;
inline constexpr std::size_t kCifarPixels = 3 * kCifarSide * kCifarSide;
inline constexpr std::size_t kCifarRecord = 1 + kCifarPixels;

inline Dataset parse_cifar10_binary(const std::vector<unsigned char>& bytes, const std::string& what = "buffer") {
  if (bytes.size() % kCifarRecord != 0)
    throw FormatError(what + ": size " + std::to_string(bytes.size()) + " is not a multiple of 3073");
  const std::size_t n = bytes.size() / kCifarRecord;
  Dataset ds;
  ds.image_side = kCifarSide;
  ds.channels = 3;
  ds.inputs = Matrix(n, kCifarPixels);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* rec = bytes.data() + i * kCifarRecord;
    if (rec[0] > 9) throw FormatError(what + ": record " + std::to_string(i) + " has label byte " + std::to_string(rec[0]));
    ds.labels.push_back(rec[0]);
    ds.meta.push_back(MetaRecord{{}, {rec[0]}});
    auto row = ds.inputs.row(i);
    for (std::size_t k = 0; k < kCifarPixels; ++k) row[k] = rec[1 + k] / 255.0;
  }
  return ds;
}

/// Concatenation of every file; meta = class label (categorical).
inline Dataset load_cifar10_binary(const std::vector<std::string>& paths) {
  std::vector<unsigned char> all;
  for (const auto& p : paths) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw FormatError("cannot open CIFAR file '" + p + "'");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (bytes.size() % kCifarRecord != 0)
      throw FormatError(p + ": size " + std::to_string(bytes.size()) + " is not a multiple of 3073");
    all.insert(all.end(), bytes.begin(), bytes.end());
  }
  return parse_cifar10_binary(all, paths.empty() ? "buffer" : paths.front());
}

inline std::vector<unsigned char> serialize_cifar10_binary(const Dataset& ds) {
  if (ds.inputs.cols() != kCifarPixels) throw ShapeMismatchError("serialize_cifar10_binary: not 32x32x3 inputs");
  std::vector<unsigned char> out;
  out.reserve(ds.size() * kCifarRecord);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.labels[i] < 0 || ds.labels[i] > 9) throw FormatError("serialize_cifar10_binary: label out of range");
    out.push_back(static_cast<unsigned char>(ds.labels[i]));
    for (double v : ds.inputs.row(i))
      out.push_back(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  }
  return out;
}

inline void save_cifar10_binary(const Dataset& ds, const std::string& path) {
  const auto bytes = serialize_cifar10_binary(ds);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open '" + path + "' for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

/// Luminance 0.299 R + 0.587 G + 0.114 B, then side x side block means.
inline Dataset downsample_gray(const Dataset& d, std::size_t side) {
  if (d.image_side != kCifarSide || d.channels != 3 || d.inputs.cols() != kCifarPixels)
    throw ShapeMismatchError("downsample_gray: expects 32x32x3 inputs");
  if (side == 0 || kCifarSide % side != 0) throw ShapeMismatchError("downsample_gray: side must divide 32");
  const std::size_t block = kCifarSide / side, plane = kCifarSide * kCifarSide;
  const double inv = 1.0 / static_cast<double>(block * block);
  Dataset out;
  out.labels = d.labels;
  out.meta = d.meta;
  out.image_side = side;
  out.channels = 1;
  out.inputs = Matrix(d.size(), side * side);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto px = d.inputs.row(i);
    auto o = out.inputs.row(i);
    for (std::size_t r = 0; r < kCifarSide; ++r) {
      for (std::size_t c = 0; c < kCifarSide; ++c) {
        const std::size_t k = r * kCifarSide + c;
        const double lum = 0.299 * px[k] + 0.587 * px[plane + k] + 0.114 * px[2 * plane + k];
        o[(r / block) * side + c / block] += lum * inv;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic classification bed

struct SyntheticDatasetOptions {
  double meta_jitter = 1.0;  // std-dev of the continuous proxy around the class value
  double nuisance_scale = 1.0;  // nuisance coordinates ~ U[0, nuisance_scale]
};

/// The default 3-class model: classes at proxy values {0, 5, 10} with equal
/// mass, each mapped to a coordinate axis of R^3, noise kappa = 4.
inline SyntheticModel default_class_model() {
  SyntheticModel m;
  m.labels = DiscreteLabels{{0.0, 5.0, 10.0}, {1.0 / 3, 1.0 / 3, 1.0 / 3}};
  m.latent_classes = true;
  m.dim = 3;
  m.kappa = 4.0;
  return m;
}

/// inputs = [(x + 1) / 2 for x ~ p(x|c) | nuisance_dim uniform noise
/// coordinates]; labels = latent class; meta = class value + Gaussian jitter.
inline Dataset make_synthetic_dataset(const SyntheticModel& m, std::size_t n, std::size_t nuisance_dim, Rng& rng,
                                      const SyntheticDatasetOptions& opt = {}) {
  m.validate();
  if (n == 0) throw InvalidArgument("make_synthetic_dataset: n must be >= 1");
  if (!m.latent_classes) throw InvalidArgument("make_synthetic_dataset: model needs latent classes");
  Dataset ds;
  ds.inputs = Matrix(n, m.dim + nuisance_dim);
  for (std::size_t i = 0; i < n; ++i) {
    const Label y = sample_label(m.labels, rng);
    const auto x = m.sample_x(y, rng);
    auto row = ds.inputs.row(i);
    for (std::size_t k = 0; k < m.dim; ++k) row[k] = 0.5 * (x[k] + 1.0);
    for (std::size_t k = 0; k < nuisance_dim; ++k) row[m.dim + k] = opt.nuisance_scale * rng.uniform();
    ds.labels.push_back(y.cls);
    ds.meta.push_back(MetaRecord{{y.value + opt.meta_jitter * rng.normal()}, {}});
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Evaluation

inline Matrix extract_features(const Checkpoint& ck, const Dataset& d) { return forward(ck.model, d.inputs).first; }

struct ProbeResult {
  double top1_accuracy = 0.0;
  std::vector<double> per_class_accuracy;  // 0 for classes absent from the test set
  std::vector<std::size_t> per_class_count;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  std::size_t probe_epochs = 0;
  std::vector<double> loss_history;  // training cross-entropy before each epoch's step

  friend bool operator==(const ProbeResult&, const ProbeResult&) = default;
};

struct ProbeOptions {
  std::size_t epochs = 500;
  double learning_rate = 0.1;
};

inline int count_classes(std::span<const int> train_labels) {
  int c = 0;
  for (int l : train_labels) {
    if (l < 0) throw DegenerateLabelsError("linear_probe: negative label");
    c = std::max(c, l + 1);
  }
  std::vector<bool> seen(static_cast<std::size_t>(c), false);
  for (int l : train_labels) seen[static_cast<std::size_t>(l)] = true;
  for (int k = 0; k < c; ++k)
    if (!seen[static_cast<std::size_t>(k)])
      throw DegenerateLabelsError("linear_probe: class " + std::to_string(k) + " absent from training labels");
  return c;
}

/// Multinomial logistic regression (weights + bias, zero init, no
/// regularisation) trained by full-batch gradient descent on the mean
/// cross-entropy. Deterministic: there is nothing random to seed.
inline ProbeResult linear_probe(const Matrix& train_f, std::span<const int> train_labels, const Matrix& test_f,
                                std::span<const int> test_labels, const ProbeOptions& opt = {}) {
  if (train_f.rows() != train_labels.size() || test_f.rows() != test_labels.size())
    throw ShapeMismatchError("linear_probe: feature and label counts differ");
  if (train_f.rows() == 0) throw EmptyInputError("linear_probe: empty training set");
  if (test_f.rows() > 0 && test_f.cols() != train_f.cols())
    throw ShapeMismatchError("linear_probe: train and test feature widths differ");
  const int c = count_classes(train_labels);
  for (int l : test_labels)
    if (l < 0 || l >= c) throw DegenerateLabelsError("linear_probe: test label outside the training classes");
  const std::size_t n = train_f.rows(), d = train_f.cols(), cc = static_cast<std::size_t>(c);

  Matrix w(d, cc), b(1, cc);
  ProbeResult res;
  res.n_train = n;
  res.n_test = test_f.rows();
  res.probe_epochs = opt.epochs;

  auto logits_of = [&](const Matrix& f) {
    Matrix z = matmul(f, w);
    for (std::size_t i = 0; i < z.rows(); ++i)
      for (std::size_t k = 0; k < cc; ++k) z(i, k) += b(0, k);
    return z;
  };
  std::vector<double> lse;
  for (std::size_t e = 0; e < opt.epochs; ++e) {
    Matrix p = detail::softmax_rows(logits_of(train_f), lse);
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t y = static_cast<std::size_t>(train_labels[i]);
      loss -= std::log(std::max(p(i, y), std::numeric_limits<double>::min()));
      p(i, y) -= 1.0;
    }
    res.loss_history.push_back(loss / static_cast<double>(n));
    const double scale = opt.learning_rate / static_cast<double>(n);
    axpy(w, -scale, matmul_tn(train_f, p));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < cc; ++k) b(0, k) -= scale * p(i, k);
  }

  res.per_class_accuracy.assign(cc, 0.0);
  res.per_class_count.assign(cc, 0);
  if (test_f.rows() == 0) return res;
  const Matrix z = logits_of(test_f);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < z.rows(); ++i) {
    const auto row = z.row(i);
    const auto pred = static_cast<std::size_t>(std::distance(row.begin(), std::ranges::max_element(row)));
    const auto y = static_cast<std::size_t>(test_labels[i]);
    res.per_class_count[y] += 1;
    if (pred == y) {
      ++correct;
      res.per_class_accuracy[y] += 1.0;
    }
  }
  for (std::size_t k = 0; k < cc; ++k)
    if (res.per_class_count[k]) res.per_class_accuracy[k] /= static_cast<double>(res.per_class_count[k]);
  res.top1_accuracy = static_cast<double>(correct) / static_cast<double>(z.rows());
  return res;
}

/// k-nearest-neighbour accuracy under Euclidean distance. Votes tie-break
/// toward the class of the nearest tied neighbour; equal distances toward
/// the lower training index.
inline double knn_accuracy(const Matrix& train_x, std::span<const int> train_labels, const Matrix& test_x,
                           std::span<const int> test_labels, std::size_t k = 5) {
  if (train_x.rows() != train_labels.size() || test_x.rows() != test_labels.size())
    throw ShapeMismatchError("knn_accuracy: row and label counts differ");
  if (k == 0 || k > train_x.rows()) throw InvalidArgument("knn_accuracy: k must lie in [1, n_train]");
  if (test_x.rows() == 0) throw EmptyInputError("knn_accuracy: empty test set");
  int c = 0;
  for (int l : train_labels) c = std::max(c, l + 1);
  std::vector<std::pair<double, std::size_t>> dist(train_x.rows());
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test_x.rows(); ++i) {
    for (std::size_t j = 0; j < train_x.rows(); ++j) {
      double s = 0.0;
      for (std::size_t q = 0; q < train_x.cols(); ++q) {
        const double diff = test_x(i, q) - train_x(j, q);
        s += diff * diff;
      }
      dist[j] = {s, j};
    }
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
    std::vector<int> votes(static_cast<std::size_t>(c), 0);
    for (std::size_t r = 0; r < k; ++r) votes[static_cast<std::size_t>(train_labels[dist[r].second])] += 1;
    const int best = *std::ranges::max_element(votes);
    int pred = -1;
    for (std::size_t r = 0; r < k && pred < 0; ++r) {
      const int l = train_labels[dist[r].second];
      if (votes[static_cast<std::size_t>(l)] == best) pred = l;
    }
    correct += pred == test_labels[i] ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(test_x.rows());
}

struct RepresentationMetrics {
  double align_score = 0.0;
  double global_unif_score = 0.0;
  std::optional<double> cond_unif_score;  // absent when every label is kernel-identical
};

/// The loss terms on a single view (anchors = candidates = f), no gradients.
inline RepresentationMetrics representation_metrics(const Matrix& f, const MetaBatch& meta, const KernelConfig& cfg,
                                                    const LossConfig& loss_cfg) {
  const Batch b = Batch::make(f, f, weight_matrix(meta, cfg), cfg.sup_norm);
  RepresentationMetrics m;
  m.align_score = conditional_alignment(b, loss_cfg).value;
  m.global_unif_score = global_uniformity(b, loss_cfg).value;
  try {
    m.cond_unif_score = conditional_uniformity(b, loss_cfg).value;
  } catch (const AllSimilarError&) {
    m.cond_unif_score.reset();
  }
  return m;
}

/// One row per sample: f0..f{d-1}, label, meta_c*, meta_k*.
inline void write_features_csv(std::ostream& os, const Matrix& f, std::span<const int> labels, const MetaBatch& meta) {
  if (labels.size() != f.rows() || meta.size() != f.rows())
    throw ShapeMismatchError("write_features_csv: row counts differ");
  check_batch_arity(meta);
  std::vector<std::string> header;
  for (std::size_t k = 0; k < f.cols(); ++k) header.push_back("f" + std::to_string(k));
  header.push_back("label");
  const std::size_t nc = meta.empty() ? 0 : meta.front().continuous.size();
  const std::size_t nk = meta.empty() ? 0 : meta.front().categorical.size();
  for (std::size_t k = 0; k < nc; ++k) header.push_back("meta_c" + std::to_string(k));
  for (std::size_t k = 0; k < nk; ++k) header.push_back("meta_k" + std::to_string(k));
  CsvWriter csv(os, header);
  for (std::size_t i = 0; i < f.rows(); ++i) {
    std::vector<std::string> cells;
    for (double v : f.row(i)) cells.push_back(format_double(v));
    cells.push_back(std::to_string(labels[i]));
    for (double v : meta[i].continuous) cells.push_back(format_double(v));
    for (int v : meta[i].categorical) cells.push_back(std::to_string(v));
    csv.row_cells(cells);
  }
}

}  // namespace condcl

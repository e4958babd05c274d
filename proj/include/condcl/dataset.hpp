#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "condcl/errors.hpp"
#include "condcl/kernels.hpp"
#include "condcl/numerics.hpp"

namespace condcl {

/// Inputs in [0, 1], downstream class labels, and the proxy meta-data the
/// contrastive losses weight pairs by. image_side/channels describe the
/// planar (channel-major, row-major) layout of image inputs; 0 for plain
/// vectors.
struct Dataset {
  Matrix inputs;
  std::vector<int> labels;
  MetaBatch meta;
  std::size_t image_side = 0;
  std::size_t channels = 0;

  std::size_t size() const noexcept { return inputs.rows(); }

  int num_classes() const {
    int c = 0;
    for (int l : labels) c = std::max(c, l + 1);
    return c;
  }

  void validate() const {
    if (labels.size() != inputs.rows() || meta.size() != inputs.rows())
      throw ShapeMismatchError("Dataset: inputs, labels and meta lengths differ");
    if (image_side != 0 && inputs.rows() > 0 && inputs.cols() != image_side * image_side * channels)
      throw ShapeMismatchError("Dataset: image layout does not match input width");
  }

  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset out;
    out.inputs = gather_rows(inputs, idx);
    out.labels.reserve(idx.size());
    for (auto i : idx) out.labels.push_back(labels[i]);
    out.meta = gather_meta(meta, idx);
    out.image_side = image_side;
    out.channels = channels;
    return out;
  }

  /// First n samples (or all, when n exceeds the size).
  Dataset head(std::size_t n) const {
    std::vector<std::size_t> idx(std::min(n, size()));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return subset(idx);
  }
};

}  // namespace condcl

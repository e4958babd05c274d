#pragma once

#include <atomic>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "condcl/dataset.hpp"
#include "condcl/errors.hpp"
#include "condcl/kernels.hpp"
#include "condcl/losses.hpp"
#include "condcl/numerics.hpp"

namespace condcl {

struct DenseLayer {
  Matrix weight;  // in x out
  Matrix bias;    // 1 x out
};

namespace detail {
inline std::uint64_t next_param_token() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}
}  // namespace detail

/// Fully connected ReLU network whose output is projected onto the unit
/// sphere. dims = {d_in, hidden..., d}; a single entry gives the zero-depth
/// network (normalisation only).
class Mlp {
 public:
  Mlp() = default;

  static Mlp init(std::vector<std::size_t> dims, Rng& rng) {
    if (dims.empty()) throw InvalidArgument("Mlp: empty layer list");
    Mlp m;
    m.dims_ = std::move(dims);
    for (std::size_t l = 0; l + 1 < m.dims_.size(); ++l) {
      const std::size_t in = m.dims_[l], out = m.dims_[l + 1];
      if (in == 0 || out == 0) throw InvalidArgument("Mlp: zero-width layer");
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      DenseLayer layer{Matrix(in, out), Matrix(1, out)};
      for (double& v : layer.weight.values()) v = rng.uniform(-bound, bound);
      for (double& v : layer.bias.values()) v = rng.uniform(-bound, bound);
      m.layers_.push_back(std::move(layer));
    }
    return m;
  }

  static Mlp from_layers(std::vector<std::size_t> dims, std::vector<DenseLayer> layers) {
    if (dims.empty() || layers.size() + 1 != dims.size()) throw ShapeMismatchError("Mlp: layer count mismatch");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      if (layers[l].weight.rows() != dims[l] || layers[l].weight.cols() != dims[l + 1] ||
          layers[l].bias.rows() != 1 || layers[l].bias.cols() != dims[l + 1])
        throw ShapeMismatchError("Mlp: layer " + std::to_string(l) + " has wrong shape");
    }
    Mlp m;
    m.dims_ = std::move(dims);
    m.layers_ = std::move(layers);
    return m;
  }

  const std::vector<std::size_t>& dims() const noexcept { return dims_; }
  std::size_t input_dim() const { return dims_.front(); }
  std::size_t output_dim() const { return dims_.back(); }
  std::size_t depth() const noexcept { return layers_.size(); }

  const std::vector<DenseLayer>& layers() const noexcept { return layers_; }

  /// Mutable access invalidates outstanding forward caches.
  std::vector<DenseLayer>& mutable_layers() {
    token_ = detail::next_param_token();
    return layers_;
  }

  std::uint64_t token() const noexcept { return token_; }

  friend bool operator==(const Mlp& a, const Mlp& b) {
    if (a.dims_ != b.dims_ || a.layers_.size() != b.layers_.size()) return false;
    for (std::size_t l = 0; l < a.layers_.size(); ++l)
      if (!(a.layers_[l].weight == b.layers_[l].weight) || !(a.layers_[l].bias == b.layers_[l].bias)) return false;
    return true;
  }

 private:
  std::vector<std::size_t> dims_;
  std::vector<DenseLayer> layers_;
  std::uint64_t token_ = detail::next_param_token();
};

/// Projection v -> v / ||v|| onto the unit sphere.
struct NormalizeLayer {
  static Matrix forward(const Matrix& v, std::vector<double>& norms) {
    norms.resize(v.rows());
    Matrix u = v;
    for (std::size_t i = 0; i < v.rows(); ++i) {
      norms[i] = norm(v.row(i));
      if (!(norms[i] >= 1e-30)) throw ZeroRowError("NormalizeLayer: zero row " + std::to_string(i));
      for (double& x : u.row(i)) x /= norms[i];
    }
    return u;
  }

  /// Exact Jacobian-vector product: (I - u u^T) g / ||v||.
  static Matrix backward(const Matrix& grad_u, const Matrix& u, const std::vector<double>& norms) {
    require_same_shape(grad_u, u, "NormalizeLayer::backward");
    Matrix g(u.rows(), u.cols());
    for (std::size_t i = 0; i < u.rows(); ++i) {
      const double radial = dot(u.row(i), grad_u.row(i));
      for (std::size_t c = 0; c < u.cols(); ++c) g(i, c) = (grad_u(i, c) - radial * u(i, c)) / norms[i];
    }
    return g;
  }
};

struct ForwardCache {
  std::uint64_t token = 0;
  std::vector<Matrix> inputs;  // input to each dense layer
  std::vector<Matrix> pre;     // pre-activation of each dense layer
  std::vector<double> norms;
  Matrix output;               // unit-norm embeddings
};

struct MlpGradients {
  std::vector<DenseLayer> layers;
  Matrix input;
};

inline std::pair<Matrix, ForwardCache> forward(const Mlp& m, const Matrix& x) {
  if (x.cols() != m.input_dim())
    throw ShapeMismatchError("forward: input width " + std::to_string(x.cols()) + ", expected " +
                             std::to_string(m.input_dim()));
  ForwardCache cache;
  cache.token = m.token();
  Matrix h = x;
  for (std::size_t l = 0; l < m.depth(); ++l) {
    const auto& layer = m.layers()[l];
    cache.inputs.push_back(h);
    Matrix z = matmul(h, layer.weight);
    for (std::size_t i = 0; i < z.rows(); ++i)
      for (std::size_t j = 0; j < z.cols(); ++j) z(i, j) += layer.bias(0, j);
    cache.pre.push_back(z);
    if (l + 1 < m.depth())
      for (double& v : z.values()) v = v > 0.0 ? v : 0.0;
    h = std::move(z);
  }
  cache.output = NormalizeLayer::forward(h, cache.norms);
  Matrix out = cache.output;
  return {std::move(out), std::move(cache)};
}

inline MlpGradients backward(const Mlp& m, const ForwardCache& cache, const Matrix& grad_out) {
  if (cache.token != m.token() || cache.inputs.size() != m.depth())
    throw StaleCacheError("backward: cache does not belong to the current parameters");
  require_same_shape(grad_out, cache.output, "backward");
  MlpGradients grads;
  grads.layers.resize(m.depth());
  Matrix g = NormalizeLayer::backward(grad_out, cache.output, cache.norms);
  for (std::size_t l = m.depth(); l-- > 0;) {
    const auto& layer = m.layers()[l];
    grads.layers[l].weight = matmul_tn(cache.inputs[l], g);
    grads.layers[l].bias = Matrix(1, g.cols());
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) grads.layers[l].bias(0, j) += g(i, j);
    Matrix gin = pairwise_dot(g, layer.weight);  // g * W^T
    if (l > 0) {
      const Matrix& pre = cache.pre[l - 1];
      for (std::size_t k = 0; k < gin.size(); ++k)
        if (!(pre.values()[k] > 0.0)) gin.values()[k] = 0.0;
    }
    g = std::move(gin);
  }
  grads.input = std::move(g);
  return grads;
}

inline void accumulate(MlpGradients& into, const MlpGradients& from) {
  for (std::size_t l = 0; l < into.layers.size(); ++l) {
    axpy(into.layers[l].weight, 1.0, from.layers[l].weight);
    axpy(into.layers[l].bias, 1.0, from.layers[l].bias);
  }
}

// ---------------------------------------------------------------------------
// Optimizers

enum class OptimizerKind { sgd_momentum, adam };

inline std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd-momentum"; }

inline OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd-momentum" || s == "sgd") return OptimizerKind::sgd_momentum;
  throw ConfigError("unknown optimizer '" + std::string(s) + "'");
}

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One Adam update of p from gradient g (bias-corrected, step count t >= 1).
inline void adam_update(Matrix& p, const Matrix& g, Matrix& m, Matrix& v, std::uint64_t t, double lr,
                        const AdamParams& a = {}) {
  const double c1 = 1.0 - std::pow(a.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(a.beta2, static_cast<double>(t));
  auto pv = p.values();
  auto gv = g.values();
  auto mv = m.values();
  auto vv = v.values();
  for (std::size_t k = 0; k < pv.size(); ++k) {
    mv[k] = a.beta1 * mv[k] + (1.0 - a.beta1) * gv[k];
    vv[k] = a.beta2 * vv[k] + (1.0 - a.beta2) * gv[k] * gv[k];
    pv[k] -= lr * (mv[k] / c1) / (std::sqrt(vv[k] / c2) + a.eps);
  }
}

/// SGD with heavy-ball momentum or Adam, with L2 weight decay folded into
/// the gradient.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double weight_decay, double momentum = 0.9)
      : kind_(kind), weight_decay_(weight_decay), momentum_(momentum) {}

  void step(Mlp& model, const MlpGradients& grads, double lr) {
    auto& layers = model.mutable_layers();
    if (first_.empty()) {
      for (const auto& l : layers) {
        first_.push_back({Matrix(l.weight.rows(), l.weight.cols()), Matrix(1, l.bias.cols())});
        second_.push_back({Matrix(l.weight.rows(), l.weight.cols()), Matrix(1, l.bias.cols())});
      }
    }
    ++t_;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      update(layers[l].weight, grads.layers[l].weight, first_[l].weight, second_[l].weight, lr);
      update(layers[l].bias, grads.layers[l].bias, first_[l].bias, second_[l].bias, lr);
    }
  }

  std::uint64_t steps() const noexcept { return t_; }

 private:
  void update(Matrix& p, const Matrix& g_raw, Matrix& m, Matrix& v, double lr) const {
    Matrix g = g_raw;
    if (weight_decay_ != 0.0) axpy(g, weight_decay_, p);
    if (kind_ == OptimizerKind::adam) {
      adam_update(p, g, m, v, t_, lr);
      return;
    }
    auto pv = p.values();
    auto mv = m.values();
    auto gv = g.values();
    for (std::size_t k = 0; k < pv.size(); ++k) {
      mv[k] = momentum_ * mv[k] + gv[k];
      pv[k] -= lr * mv[k];
    }
  }

  OptimizerKind kind_;
  double weight_decay_;
  double momentum_;
  std::uint64_t t_ = 0;
  std::vector<DenseLayer> first_;
  std::vector<DenseLayer> second_;
};

// ---------------------------------------------------------------------------
// Augmentation

/// Strengths in [0, 1]. crop and flip apply only to image inputs.
struct AugmentConfig {
  double noise = 0.0;  // std-dev of additive Gaussian noise
  double mask = 0.0;   // per-coordinate drop probability
  double crop = 0.0;   // crop side shrinks by up to crop * side / 2
  double flip = 0.0;   // horizontal flip with probability flip / 2

  void validate() const {
    for (double s : {noise, mask, crop, flip})
      if (!(s >= 0.0 && s <= 1.0)) throw InvalidArgument("AugmentConfig: strengths must lie in [0, 1]");
  }
};

struct ImageLayout {
  std::size_t side = 0;
  std::size_t channels = 0;
};

/// One stochastic view of x, clamped to [0, 1].
inline std::vector<double> augment(std::span<const double> x, Rng& rng, const AugmentConfig& cfg,
                                   ImageLayout layout = {}) {
  cfg.validate();
  std::vector<double> out(x.begin(), x.end());
  const std::size_t side = layout.side;
  if (side > 0 && layout.channels * side * side == x.size() && (cfg.crop > 0.0 || cfg.flip > 0.0)) {
    const std::size_t shrink =
        static_cast<std::size_t>(std::floor(cfg.crop * rng.uniform() * static_cast<double>(side) / 2.0));
    const std::size_t cs = side - shrink;
    const std::size_t oy = shrink ? rng.below(shrink + 1) : 0;
    const std::size_t ox = shrink ? rng.below(shrink + 1) : 0;
    const bool flip = rng.uniform() < 0.5 * cfg.flip;
    for (std::size_t c = 0; c < layout.channels; ++c) {
      const std::size_t base = c * side * side;
      for (std::size_t r = 0; r < side; ++r) {
        for (std::size_t q = 0; q < side; ++q) {
          const std::size_t sr = oy + r * cs / side;
          std::size_t sq = ox + q * cs / side;
          if (flip) sq = ox + (side - 1 - q) * cs / side;
          out[base + r * side + q] = x[base + sr * side + sq];
        }
      }
    }
  }
  for (double& v : out) {
    if (cfg.noise > 0.0) v += cfg.noise * rng.normal();
    if (cfg.mask > 0.0 && rng.uniform() < cfg.mask) v = 0.0;
    v = std::clamp(v, 0.0, 1.0);
  }
  return out;
}

inline Matrix augment_rows(const Matrix& x, Rng& rng, const AugmentConfig& cfg, ImageLayout layout = {}) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto v = augment(x.row(i), rng, cfg, layout);
    std::ranges::copy(v, out.row(i).begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t batch_size = 256;
  std::size_t epochs = 20;
  double learning_rate = 1e-3;
  double weight_decay = 5e-5;
  OptimizerKind optimizer = OptimizerKind::adam;
  LossKind loss_kind = LossKind::align_cond;
  double lambda = 1.0;
  double tau = 0.1;
  KernelFamily kernel = KernelFamily::rbf;
  std::optional<double> sigma;
  std::uint64_t seed = 0;
  double lr_decay_gamma = 1.0;
  std::size_t lr_decay_period = 0;  // epochs; 0 disables decay
  AugmentConfig augment{0.05, 0.1, 0.0, 0.0};
  std::vector<std::size_t> hidden{256, 128};
  std::size_t embed_dim = 32;

  /// Named presets. "cifar" and "mri" carry the published optimisation
  /// settings (batch 1024, d 128, Adam lr 1e-3, weight decay 5e-5; batch 64,
  /// lr 1e-4 decayed by 0.9 every 10 epochs, 50 epochs). "desk" is the
  /// scaled-down default.
  static TrainConfig preset(std::string_view name) {
    TrainConfig c;
    if (name == "desk") return c;
    if (name == "cifar") {
      c.batch_size = 1024;
      c.embed_dim = 128;
      c.learning_rate = 1e-3;
      c.weight_decay = 5e-5;
      c.optimizer = OptimizerKind::adam;
      return c;
    }
    if (name == "mri") {
      c.batch_size = 64;
      c.learning_rate = 1e-4;
      c.lr_decay_gamma = 0.9;
      c.lr_decay_period = 10;
      c.epochs = 50;
      c.optimizer = OptimizerKind::adam;
      return c;
    }
    throw ConfigError("unknown preset '" + std::string(name) + "'");
  }

  std::vector<std::size_t> layer_dims(std::size_t input_dim) const {
    std::vector<std::size_t> dims{input_dim};
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    dims.push_back(embed_dim);
    return dims;
  }

  LossConfig loss_config() const {
    LossConfig lc;
    lc.tau = tau;
    lc.lambda = lambda;
    return lc;
  }

  bool needs_kernel() const {
    return loss_kind == LossKind::yaware || loss_kind == LossKind::align_global || loss_kind == LossKind::align_cond;
  }

  KernelConfig kernel_config() const { return KernelConfig::make(kernel, sigma); }

  void validate() const {
    if (batch_size < 2) throw ConfigError("train.batch_size must be >= 2");
    if (!(learning_rate >= 0.0)) throw ConfigError("train.learning_rate must be >= 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
    if (!(lr_decay_gamma > 0.0)) throw ConfigError("train.lr_decay_gamma must be > 0");
    if (embed_dim == 0) throw ConfigError("train.embed_dim must be > 0");
    augment.validate();
    loss_config().validate();
    if (needs_kernel()) kernel_config();
  }

  double lr_at_epoch(std::size_t epoch) const {
    if (lr_decay_period == 0) return learning_rate;
    return learning_rate * std::pow(lr_decay_gamma, static_cast<double>(epoch / lr_decay_period));
  }

  /// Canonical key-sorted text, one "key=value" per line.
  std::string canonical_text() const {
    std::map<std::string, std::string> kv;
    auto num = [](double v) {
      std::ostringstream os;
      os.precision(17);
      os << v;
      return os.str();
    };
    kv["augment_crop"] = num(augment.crop);
    kv["augment_flip"] = num(augment.flip);
    kv["augment_mask"] = num(augment.mask);
    kv["augment_noise"] = num(augment.noise);
    kv["batch_size"] = std::to_string(batch_size);
    kv["embed_dim"] = std::to_string(embed_dim);
    kv["epochs"] = std::to_string(epochs);
    std::string h;
    for (std::size_t i = 0; i < hidden.size(); ++i) h += (i ? "," : "") + std::to_string(hidden[i]);
    kv["hidden"] = h;
    kv["kernel"] = std::string(to_string(kernel));
    kv["lambda"] = num(lambda);
    kv["learning_rate"] = num(learning_rate);
    kv["loss_kind"] = std::string(to_string(loss_kind));
    kv["lr_decay_gamma"] = num(lr_decay_gamma);
    kv["lr_decay_period"] = std::to_string(lr_decay_period);
    kv["optimizer"] = std::string(to_string(optimizer));
    kv["seed"] = std::to_string(seed);
    kv["sigma"] = sigma ? num(*sigma) : "";
    kv["tau"] = num(tau);
    kv["weight_decay"] = num(weight_decay);
    std::string out;
    for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
    return out;
  }

  static TrainConfig from_canonical_text(const std::string& text) {
    TrainConfig c;
    std::istringstream is(text);
    std::string line;
    auto to_size = [](const std::string& v) { return static_cast<std::size_t>(std::stoull(v)); };
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw FormatError("checkpoint config: malformed line '" + line + "'");
      const std::string k = line.substr(0, eq), v = line.substr(eq + 1);
      if (k == "augment_crop") c.augment.crop = std::stod(v);
      else if (k == "augment_flip") c.augment.flip = std::stod(v);
      else if (k == "augment_mask") c.augment.mask = std::stod(v);
      else if (k == "augment_noise") c.augment.noise = std::stod(v);
      else if (k == "batch_size") c.batch_size = to_size(v);
      else if (k == "embed_dim") c.embed_dim = to_size(v);
      else if (k == "epochs") c.epochs = to_size(v);
      else if (k == "hidden") {
        c.hidden.clear();
        std::istringstream hs(v);
        std::string tok;
        while (std::getline(hs, tok, ','))
          if (!tok.empty()) c.hidden.push_back(to_size(tok));
      } else if (k == "kernel") c.kernel = parse_kernel_family(v);
      else if (k == "lambda") c.lambda = std::stod(v);
      else if (k == "learning_rate") c.learning_rate = std::stod(v);
      else if (k == "loss_kind") c.loss_kind = parse_loss_kind(v);
      else if (k == "lr_decay_gamma") c.lr_decay_gamma = std::stod(v);
      else if (k == "lr_decay_period") c.lr_decay_period = to_size(v);
      else if (k == "optimizer") c.optimizer = parse_optimizer(v);
      else if (k == "seed") c.seed = std::stoull(v);
      else if (k == "sigma") c.sigma = v.empty() ? std::nullopt : std::optional<double>(std::stod(v));
      else if (k == "tau") c.tau = std::stod(v);
      else if (k == "weight_decay") c.weight_decay = std::stod(v);
      else throw FormatError("checkpoint config: unknown key '" + k + "'");
    }
    return c;
  }
};

struct Checkpoint {
  TrainConfig config;
  Mlp model;
  std::uint32_t epoch = 0;
  Rng rng;
  std::vector<double> loss_history;

  friend bool operator==(const Checkpoint& a, const Checkpoint& b) {
    return a.config.canonical_text() == b.config.canonical_text() && a.model == b.model && a.epoch == b.epoch &&
           a.rng == b.rng && a.loss_history == b.loss_history;
  }
};

struct HistoryRow {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double loss = 0.0;
  double align_term = 0.0;
  double unif_term = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<HistoryRow> history;
};

/// Random-initialisation checkpoint: what train() starts from.
inline Checkpoint initial_checkpoint(const TrainConfig& cfg, std::size_t input_dim) {
  Rng root(cfg.seed);
  Rng init = root.split(0);
  Checkpoint ck;
  ck.config = cfg;
  ck.model = Mlp::init(cfg.layer_dims(input_dim), init);
  ck.rng = root.split(1);
  return ck;
}

namespace detail {

inline Matrix stack_rows(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() + b.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) std::ranges::copy(a.row(i), out.row(i).begin());
  for (std::size_t i = 0; i < b.rows(); ++i) std::ranges::copy(b.row(i), out.row(a.rows() + i).begin());
  return out;
}

}  // namespace detail

/// The symmetrised training loss for a two-view batch. labels are used by
/// supcon; align_term/unif_term are the diagnostic decomposition terms.
struct StepLoss {
  LossResult result;
  double align_term = 0.0;
  double unif_term = 0.0;
};

inline StepLoss training_loss(const TrainConfig& cfg, const Matrix& f1, const Matrix& f2, const MetaBatch& meta,
                              std::span<const int> labels) {
  const LossConfig lc = cfg.loss_config();
  const std::size_t n = f1.rows();
  WeightMatrix weights;
  switch (cfg.loss_kind) {
    case LossKind::infonce: weights = identity_weights(n); break;
    case LossKind::supcon: weights = label_weights(labels); break;
    default: weights = weight_matrix(meta, cfg.kernel_config());
  }
  const double sup_norm = cfg.needs_kernel() ? cfg.kernel_config().sup_norm : 1.0;
  const Batch batch = Batch::make(f1, f2, std::move(weights), sup_norm, 1e-9);

  LossFn fn;
  switch (cfg.loss_kind) {
    case LossKind::infonce: fn = infonce_reference; break;
    case LossKind::supcon: {
      std::vector<int> lab(labels.begin(), labels.end());
      fn = [lab](const Batch& b, const LossConfig& c) {
        return supcon_reference(detail::stack_rows(b.anchors, b.candidates), lab, c);
      };
      break;
    }
    case LossKind::yaware: fn = yaware_infonce; break;
    case LossKind::align_global: fn = alignment_global_uniformity; break;
    case LossKind::align_cond: fn = combined_objective; break;
  }
  StepLoss out{symmetrized(fn, batch, lc)};
  out.align_term = conditional_alignment(batch, lc).value;
  if (cfg.loss_kind == LossKind::align_cond) {
    try {
      out.unif_term = conditional_uniformity(batch, lc).value;
    } catch (const AllSimilarError&) {
      out.unif_term = std::numeric_limits<double>::quiet_NaN();
    }
  } else {
    out.unif_term = global_uniformity(batch, lc).value;
  }
  return out;
}

using EpochCallback = std::function<void(std::size_t epoch, const Mlp& model)>;

/// Contrastive pre-training. Each step: two augmented views of a shuffled
/// batch, forward both, symmetrised loss, backward, optimizer step.
/// Deterministic given cfg.seed. on_epoch (if set) runs after every epoch.
inline TrainResult train(const TrainConfig& cfg, const Dataset& data, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  data.validate();
  if (cfg.loss_kind != LossKind::infonce && cfg.loss_kind != LossKind::supcon && data.meta.empty())
    throw ConfigError("train: loss '" + std::string(to_string(cfg.loss_kind)) + "' requires meta-data");
  TrainResult res;
  res.checkpoint = initial_checkpoint(cfg, data.inputs.cols());
  Checkpoint& ck = res.checkpoint;
  Rng& rng = ck.rng;
  Optimizer opt(cfg.optimizer, cfg.weight_decay);
  const ImageLayout layout{data.image_side, data.channels};

  const std::size_t n = data.size();
  const std::size_t bs = std::min(cfg.batch_size, n);
  if (n < 2 && cfg.epochs > 0) throw ConfigError("train: dataset needs at least 2 samples");
  std::vector<std::size_t> order(n);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    shuffle(std::span<std::size_t>(order), rng);
    const double lr = cfg.lr_at_epoch(epoch);
    for (std::size_t start = 0; start + bs <= n; start += bs) {
      const std::span<const std::size_t> idx(order.data() + start, bs);
      const Matrix x = gather_rows(data.inputs, idx);
      const MetaBatch meta = gather_meta(data.meta, idx);
      std::vector<int> labels;
      for (auto i : idx) labels.push_back(data.labels[i]);

      const Matrix v1 = augment_rows(x, rng, cfg.augment, layout);
      const Matrix v2 = augment_rows(x, rng, cfg.augment, layout);
      auto [f1, c1] = forward(ck.model, v1);
      auto [f2, c2] = forward(ck.model, v2);
      StepLoss loss;
      try {
        loss = training_loss(cfg, f1, f2, meta, labels);
      } catch (const AllSimilarError& e) {
        throw AllSimilarError(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(start / bs) + ")");
      }
      MlpGradients g = backward(ck.model, c1, loss.result.grad_anchor);
      accumulate(g, backward(ck.model, c2, loss.result.grad_candidate));
      opt.step(ck.model, g, lr);

      res.history.push_back({step, epoch, loss.result.value, loss.align_term, loss.unif_term, lr});
      ck.loss_history.push_back(loss.result.value);
      ++step;
    }
    ck.epoch = static_cast<std::uint32_t>(epoch + 1);
    if (on_epoch) on_epoch(epoch + 1, ck.model);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoint persistence: "CCL1", u16 version, u32 config length + canonical
// config text, u32 epoch, u64 rng seed/key/counter, u32 tensor count, then
// tensors as (u16 name length, name, u32 rows, u32 cols, f64 row-major).
// All integers and floats little-endian.

namespace detail {

inline void put_le(std::ostream& os, std::uint64_t v, int bytes) {
  for (int b = 0; b < bytes; ++b) os.put(static_cast<char>((v >> (8 * b)) & 0xFF));
}

inline std::uint64_t get_le(std::istream& is, int bytes) {
  std::uint64_t v = 0;
  for (int b = 0; b < bytes; ++b) {
    const int c = is.get();
    if (c == std::char_traits<char>::eof()) throw FormatError("checkpoint: unexpected end of file");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * b);
  }
  return v;
}

inline void put_tensor(std::ostream& os, const std::string& name, const Matrix& m) {
  put_le(os, name.size(), 2);
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_le(os, m.rows(), 4);
  put_le(os, m.cols(), 4);
  for (double v : m.values()) put_le(os, std::bit_cast<std::uint64_t>(v), 8);
}

inline std::pair<std::string, Matrix> get_tensor(std::istream& is) {
  const auto len = get_le(is, 2);
  std::string name(len, '\0');
  is.read(name.data(), static_cast<std::streamsize>(len));
  if (!is) throw FormatError("checkpoint: truncated tensor name");
  const auto rows = get_le(is, 4), cols = get_le(is, 4);
  std::vector<double> data(rows * cols);
  for (double& v : data) v = std::bit_cast<double>(get_le(is, 8));
  return {std::move(name), Matrix(rows, cols, std::move(data))};
}

}  // namespace detail

inline constexpr std::uint16_t kCheckpointVersion = 1;

inline void save_checkpoint(std::ostream& os, const Checkpoint& ck) {
  os.write("CCL1", 4);
  detail::put_le(os, kCheckpointVersion, 2);
  const std::string text = ck.config.canonical_text();
  detail::put_le(os, text.size(), 4);
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  detail::put_le(os, ck.epoch, 4);
  detail::put_le(os, ck.rng.seed(), 8);
  detail::put_le(os, ck.rng.key(), 8);
  detail::put_le(os, ck.rng.counter(), 8);

  const auto& dims = ck.model.dims();
  Matrix dm(1, dims.size());
  for (std::size_t i = 0; i < dims.size(); ++i) dm(0, i) = static_cast<double>(dims[i]);
  detail::put_le(os, 2 + 2 * ck.model.depth(), 4);
  detail::put_tensor(os, "model.dims", dm);
  for (std::size_t l = 0; l < ck.model.depth(); ++l) {
    detail::put_tensor(os, "layer" + std::to_string(l) + ".weight", ck.model.layers()[l].weight);
    detail::put_tensor(os, "layer" + std::to_string(l) + ".bias", ck.model.layers()[l].bias);
  }
  detail::put_tensor(os, "history.loss", Matrix(1, ck.loss_history.size(), ck.loss_history));
}

inline Checkpoint load_checkpoint(std::istream& is) {
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "CCL1") throw FormatError("checkpoint: bad magic");
  const auto version = detail::get_le(is, 2);
  if (version != kCheckpointVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  const auto text_len = detail::get_le(is, 4);
  std::string text(text_len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(text_len));
  if (!is) throw FormatError("checkpoint: truncated config block");
  Checkpoint ck;
  ck.config = TrainConfig::from_canonical_text(text);
  ck.epoch = static_cast<std::uint32_t>(detail::get_le(is, 4));
  const auto seed = detail::get_le(is, 8), key = detail::get_le(is, 8), counter = detail::get_le(is, 8);
  ck.rng = Rng::restore(seed, key, counter);

  const auto count = detail::get_le(is, 4);
  std::map<std::string, Matrix> tensors;
  for (std::uint64_t t = 0; t < count; ++t) {
    auto [name, m] = detail::get_tensor(is);
    tensors.emplace(std::move(name), std::move(m));
  }
  if (!tensors.contains("model.dims") || !tensors.contains("history.loss"))
    throw FormatError("checkpoint: missing required tensors");
  std::vector<std::size_t> dims;
  for (double v : tensors["model.dims"].values()) dims.push_back(static_cast<std::size_t>(v));
  std::vector<DenseLayer> layers;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const auto w = tensors.find("layer" + std::to_string(l) + ".weight");
    const auto b = tensors.find("layer" + std::to_string(l) + ".bias");
    if (w == tensors.end() || b == tensors.end()) throw FormatError("checkpoint: missing layer " + std::to_string(l));
    layers.push_back({w->second, b->second});
  }
  ck.model = Mlp::from_layers(std::move(dims), std::move(layers));
  const auto& h = tensors["history.loss"].storage();
  ck.loss_history.assign(h.begin(), h.end());
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open '" + path + "' for writing");
  save_checkpoint(os, ck);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint '" + path + "'");
  return load_checkpoint(is);
}

}  // namespace condcl

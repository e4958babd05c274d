#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "condcl/config.hpp"
#include "condcl/csv.hpp"
#include "condcl/dataeval.hpp"
#include "condcl/encoder.hpp"
#include "condcl/errors.hpp"
#include "condcl/fixture.hpp"
#include "condcl/gradcheck.hpp"
#include "condcl/losses.hpp"
#include "condcl/parallel.hpp"
#include "condcl/synthlab.hpp"

namespace condcl {

enum ExitCode : int { kExitOk = 0, kExitCheckFailed = 1, kExitUsage = 2 };

/// Everything a command produces, held in memory until the run directory is
/// committed. files maps a relative name to its bytes.
struct CommandOutput {
  int exit_code = kExitOk;
  std::map<std::string, std::string> files;
  std::string log;

  void note(const std::string& line) { log += line + "\n"; }
};

using CommandFn = std::function<CommandOutput(const RunConfig&)>;

// ---------------------------------------------------------------------------
// Data

struct DataSplit {
  Dataset train;
  Dataset test;
};

namespace detail {

inline std::vector<std::string> cifar_train_files(const std::filesystem::path& dir) {
  std::vector<std::string> out;
  for (int k = 1; k <= 5; ++k) out.push_back((dir / ("data_batch_" + std::to_string(k) + ".bin")).string());
  return out;
}

inline std::optional<std::filesystem::path> find_cifar_dir(const std::string& root) {
  if (root.empty()) return std::nullopt;
  for (const auto& dir : {std::filesystem::path(root), std::filesystem::path(root) / "cifar-10-batches-bin"}) {
    bool all = std::filesystem::exists(dir / "test_batch.bin");
    for (const auto& f : cifar_train_files(dir)) all = all && std::filesystem::exists(f);
    if (all) return dir;
  }
  return std::nullopt;
}

inline Dataset random_subset(const Dataset& d, std::size_t n, Rng rng) {
  std::vector<std::size_t> idx(d.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  shuffle(std::span<std::size_t>(idx), rng);
  idx.resize(std::min(n, idx.size()));
  return d.subset(idx);
}

}  // namespace detail

/// True when data.root (or $CONDCL_DATA_DIR) holds the CIFAR-10 binary batches.
inline bool cifar10_available(const std::string& root) { return detail::find_cifar_dir(root).has_value(); }

/// Train/test split described by the [data] section. The draw depends on
/// data.seed only, so every training seed sees the same data.
inline DataSplit load_data(const RunConfig& rc) {
  const std::string source = rc.get("data.source");
  const Rng root(rc.get_u64("data.seed"));
  const std::size_t n_train = rc.get_size("data.n_train"), n_test = rc.get_size("data.n_test");
  if (n_train < 2 || n_test < 1) throw ConfigError("data: need n_train >= 2 and n_test >= 1");
  DataSplit s;
  if (source == "synthetic") {
    SyntheticModel m = default_class_model();
    m.kappa = rc.get_double("data.kappa");
    SyntheticDatasetOptions opt;
    opt.meta_jitter = rc.get_double("data.meta_jitter");
    try {
      m.validate();
    } catch (const InvalidArgument& e) {
      throw ConfigError(std::string("data: ") + e.what());
    }
    Rng r_train = root.split(0), r_test = root.split(1);
    s.train = make_synthetic_dataset(m, n_train, rc.get_size("data.nuisance_dim"), r_train, opt);
    s.test = make_synthetic_dataset(m, n_test, rc.get_size("data.nuisance_dim"), r_test, opt);
    return s;
  }
  if (source == "cifar10") {
    const auto dir = detail::find_cifar_dir(rc.get("data.root"));
    if (!dir)
      throw ConfigError("data: CIFAR-10 binary batches not found under '" + rc.get("data.root") +
                        "' (set data.root or CONDCL_DATA_DIR)");
    const std::size_t side = rc.get_size("data.side");
    if (side == 0 || kCifarSide % side != 0) throw ConfigError("data.side must divide 32");
    const Dataset train_all = load_cifar10_binary(detail::cifar_train_files(*dir));
    const Dataset test_all = load_cifar10_binary({(*dir / "test_batch.bin").string()});
    s.train = downsample_gray(detail::random_subset(train_all, n_train, root.split(0)), side);
    s.test = downsample_gray(detail::random_subset(test_all, n_test, root.split(1)), side);
    return s;
  }
  throw ConfigError("data.source must be synthetic or cifar10, got '" + source + "'");
}

// ---------------------------------------------------------------------------
// gradcheck

inline CommandOutput cmd_gradcheck(const RunConfig& rc) {
  CommandOutput out;
  GradcheckOptions opt;
  opt.loss = rc.loss();
  opt.step = rc.get_double("experiment.step");
  opt.sigma = rc.has("kernel.sigma") ? rc.get_double("kernel.sigma") : 2.0;
  opt.include_references = rc.get_bool("experiment.include_references");
  opt.threads = std::max<std::size_t>(1, rc.get_size("experiment.threads"));
  if (!(opt.sigma > 0.0)) throw ConfigError("kernel.sigma must be positive");
  if (!(opt.step >= 1e-8 && opt.step <= 1e-3)) throw ConfigError("experiment.step must lie in [1e-8, 1e-3]");
  const double threshold = rc.get_double("experiment.threshold");
  const double enc_threshold = rc.get_double("experiment.encoder_threshold");
  const auto seeds = rc.seeds();

  auto reports = check_all(seeds, rc.get_shape_list("experiment.sizes"), threshold, opt);
  for (auto seed : seeds) reports.push_back(check_encoder(seed, 6, {5, 8, 4}, enc_threshold, opt));

  std::ostringstream csv_text;
  CsvWriter csv(csv_text, {"op_name", "n", "d", "seed", "max_abs_err", "max_rel_err", "worst_row", "worst_col",
                           "passed"});
  std::size_t failed = 0;
  double worst = 0.0;
  for (const auto& r : reports) {
    csv.row(r.op_name, r.n, r.d, r.seed, r.max_abs_err, r.max_rel_err, r.worst_index.first, r.worst_index.second,
            r.passed ? "true" : "false");
    failed += r.passed ? 0 : 1;
    if (std::isfinite(r.max_rel_err)) worst = std::max(worst, r.max_rel_err);
  }
  out.files["gradcheck.csv"] = csv_text.str();
  out.note("gradcheck: " + std::to_string(reports.size()) + " reports, " + std::to_string(failed) +
           " failed, worst relative error " + format_double(worst));
  out.exit_code = failed == 0 && !reports.empty() ? kExitOk : kExitCheckFailed;
  return out;
}

// ---------------------------------------------------------------------------
// decompose

struct DecomposeRow {
  std::uint64_t seed = 0;
  std::size_t n = 0;
  std::size_t d = 0;
  double tau = 0.0;
  double lhs = 0.0;
  double rhs = 0.0;
  double abs_gap = 0.0;
  double grad_gap = 0.0;
};

/// yaware_infonce against conditional_alignment + global_uniformity on one
/// random batch.
inline DecomposeRow decompose_batch(std::uint64_t seed, std::size_t n, std::size_t d, double tau,
                                    const KernelConfig& kcfg, Rng& rng) {
  Matrix a = random_sphere(n, d, rng);
  Matrix c = random_sphere(n, d, rng);
  MetaBatch meta(n);
  for (auto& r : meta) {
    r.continuous = {rng.uniform(0.0, 10.0)};
    r.categorical = {static_cast<int>(rng.below(3))};
  }
  const Batch b = Batch::make(std::move(a), std::move(c), weight_matrix(meta, kcfg), kcfg.sup_norm);
  LossConfig lc;
  lc.tau = tau;
  const LossResult lhs = yaware_infonce(b, lc);
  const LossResult al = conditional_alignment(b, lc);
  const LossResult gu = global_uniformity(b, lc);
  const LossResult rhs = detail::combine(al, 1.0, gu, 1.0);
  DecomposeRow row{seed, n, d, tau, lhs.value, rhs.value, std::abs(lhs.value - rhs.value), 0.0};
  row.grad_gap = std::max(max_abs_diff(lhs.grad_anchor, rhs.grad_anchor),
                          max_abs_diff(lhs.grad_candidate, rhs.grad_candidate));
  return row;
}

inline CommandOutput cmd_decompose(const RunConfig& rc) {
  CommandOutput out;
  const KernelConfig kcfg = rc.kernel();
  const std::size_t batches = rc.get_size("experiment.batches");
  const auto ns = rc.get_size_list("experiment.batch_n");
  const auto ds = rc.get_size_list("experiment.batch_d");
  const auto taus = rc.get_double_list("experiment.batch_tau");
  if (ns.empty() || ds.empty() || taus.empty()) throw ConfigError("decompose: empty batch_n, batch_d or batch_tau");
  for (auto n : ns)
    if (n == 0) throw ConfigError("experiment.batch_n entries must be >= 1");
  for (auto d : ds)
    if (d == 0) throw ConfigError("experiment.batch_d entries must be >= 1");
  for (double t : taus)
    if (!(t > 0.0) || !std::isfinite(t)) throw ConfigError("experiment.batch_tau entries must be > 0");
  const double max_gap = rc.get_double("experiment.max_gap");
  const double max_grad_gap = rc.get_double("experiment.max_grad_gap");
  const auto seeds = rc.seeds();

  std::vector<DecomposeRow> rows(seeds.size() * batches);
  parallel_for(rows.size(), std::max<std::size_t>(1, rc.get_size("experiment.threads")), [&](std::size_t job) {
    const std::uint64_t seed = seeds[job / batches];
    const std::size_t b = job % batches;
    // cycle N fastest, then d, then tau, so any 45 consecutive batches cover the grid
    const std::size_t n = ns[b % ns.size()];
    const std::size_t d = ds[(b / ns.size()) % ds.size()];
    const double tau = taus[(b / (ns.size() * ds.size())) % taus.size()];
    Rng rng = Rng(seed).split(b);
    rows[job] = decompose_batch(seed, n, d, tau, kcfg, rng);
  });

  std::ostringstream text;
  CsvWriter csv(text, {"seed", "N", "d", "tau", "lhs", "rhs", "abs_gap", "grad_gap"});
  double worst = 0.0, worst_grad = 0.0;
  for (const auto& r : rows) {
    csv.row(r.seed, r.n, r.d, r.tau, r.lhs, r.rhs, r.abs_gap, r.grad_gap);
    worst = std::max(worst, std::isfinite(r.abs_gap) ? r.abs_gap : INFINITY);
    worst_grad = std::max(worst_grad, std::isfinite(r.grad_gap) ? r.grad_gap : INFINITY);
  }
  out.files["decompose.csv"] = text.str();
  out.note("decompose: " + std::to_string(rows.size()) + " batches, max value gap " + format_double(worst) +
           ", max gradient gap " + format_double(worst_grad));
  out.exit_code = (!rows.empty() && worst < max_gap && worst_grad < max_grad_gap) ? kExitOk : kExitCheckFailed;
  return out;
}

// ---------------------------------------------------------------------------
// converge

inline CommandOutput cmd_converge(const RunConfig& rc) {
  CommandOutput out;
  SyntheticModel m = default_synthetic_model();
  m.kappa = rc.get_double("experiment.model_kappa");
  m.dim = rc.get_size("experiment.model_dim");
  try {
    m.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("converge model: ") + e.what());
  }
  const std::uint64_t seed = rc.seeds().front();
  const Rng root(seed);
  FrozenEncoder enc;
  const std::string enc_name = rc.get("experiment.encoder");
  if (enc_name == "random-mlp") {
    Rng er = root.split(2);
    enc = FrozenEncoder::random_mlp({m.dim, 16, m.dim}, er);
  } else if (enc_name != "identity") {
    throw ConfigError("experiment.encoder must be identity or random-mlp");
  }
  const auto sizes = rc.get_size_list("experiment.batch_sizes");
  const std::size_t reps = rc.get_size("experiment.reps");
  for (std::size_t k = 0; k < sizes.size(); ++k)
    if (sizes[k] < 2 || (k > 0 && sizes[k] <= sizes[k - 1]))
      throw ConfigError("experiment.batch_sizes must ascend and be >= 2");
  if (sizes.empty() || reps == 0) throw ConfigError("converge: need batch sizes and reps >= 1");
  ConvergenceOptions opt;
  opt.limit_samples = rc.get_size("experiment.limit_samples");
  if (opt.limit_samples < 1000) throw ConfigError("experiment.limit_samples must be >= 1000");
  opt.threads = std::max<std::size_t>(1, rc.get_size("experiment.threads"));
  Rng rng = root.split(1);
  const ConvergenceTable t = convergence_experiment(m, enc, rc.kernel(), rc.loss(), sizes, reps, rng, opt);

  std::ostringstream rows_text;
  CsvWriter rows(rows_text, {"N", "rep", "loss_value", "limit_align", "limit_unif", "abs_gap"});
  for (const auto& r : t.rows) rows.row(r.n, r.rep, r.loss_value, t.limit.align.mean, t.limit.unif.mean, r.abs_gap);
  out.files["converge.csv"] = rows_text.str();

  std::ostringstream sum_text;
  CsvWriter sum(sum_text, {"N", "mean_gap", "stderr_gap"});
  for (const auto& s : t.summary) sum.row(s.n, s.mean_gap, s.stderr_gap);
  out.files["converge_summary.csv"] = sum_text.str();

  std::ostringstream lim_text;
  CsvWriter lim(lim_text, {"term", "estimate", "stderr"});
  lim.row("align", t.limit.align.mean, t.limit.align.stderr_);
  lim.row("unif", t.limit.unif.mean, t.limit.unif.stderr_);
  lim.row("loss", t.limit_loss, std::hypot(t.limit.align.stderr_, t.limit.unif.stderr_));
  lim.row("loglog_slope", t.loglog_slope, std::optional<double>{});
  out.files["converge_limit.csv"] = lim_text.str();

  bool decreasing = true;
  for (std::size_t k = 1; k < t.summary.size(); ++k)
    decreasing = decreasing && t.summary[k].mean_gap < t.summary[k - 1].mean_gap;
  const double lo = rc.get_double("experiment.slope_min"), hi = rc.get_double("experiment.slope_max");
  const bool slope_ok = t.loglog_slope && *t.loglog_slope >= lo && *t.loglog_slope <= hi;
  out.note("converge: limit loss " + format_double(t.limit_loss) + ", slope " + format_double(t.loglog_slope) +
           ", gaps strictly decreasing: " + (decreasing ? "yes" : "no"));
  out.exit_code = decreasing && slope_ok ? kExitOk : kExitCheckFailed;
  return out;
}

// ---------------------------------------------------------------------------
// train / probe

inline std::string history_csv(const std::vector<HistoryRow>& history) {
  std::ostringstream text;
  CsvWriter csv(text, {"step", "epoch", "loss", "align_term", "unif_term", "lr"});
  for (const auto& h : history) csv.row(h.step, h.epoch, h.loss, h.align_term, h.unif_term, h.lr);
  return text.str();
}

inline std::string checkpoint_bytes(const Checkpoint& ck) {
  std::ostringstream os(std::ios::binary);
  save_checkpoint(os, ck);
  return os.str();
}

inline CommandOutput cmd_train(const RunConfig& rc) {
  CommandOutput out;
  const TrainConfig cfg = rc.train(rc.seeds().front());
  const DataSplit data = load_data(rc);
  const TrainResult res = train(cfg, data.train);
  out.files["checkpoint.ccl"] = checkpoint_bytes(res.checkpoint);
  out.files["history.csv"] = history_csv(res.history);
  out.note("train: " + std::string(to_string(cfg.loss_kind)) + ", " + std::to_string(res.history.size()) +
           " steps, final loss " + format_double(res.history.empty() ? NAN : res.history.back().loss));
  return out;
}

struct ProbeOutcome {
  ProbeResult probe;
  double knn_top1 = 0.0;
  RepresentationMetrics metrics;
};

inline ProbeOptions probe_options(const RunConfig& rc) {
  ProbeOptions p;
  p.epochs = rc.get_size("experiment.probe_epochs");
  p.learning_rate = rc.get_double("experiment.probe_lr");
  return p;
}

/// Linear probe, 5-NN accuracy and the loss-term metrics of one encoder on
/// the test split.
inline ProbeOutcome evaluate_encoder(const Mlp& model, const DataSplit& data, const RunConfig& rc) {
  ProbeOutcome o;
  const Matrix ftr = forward(model, data.train.inputs).first;
  const Matrix fte = forward(model, data.test.inputs).first;
  o.probe = linear_probe(ftr, data.train.labels, fte, data.test.labels, probe_options(rc));
  o.knn_top1 = knn_accuracy(ftr, data.train.labels, fte, data.test.labels, 5);
  o.metrics = representation_metrics(fte, data.test.meta, rc.kernel(), rc.loss());
  return o;
}

inline CommandOutput cmd_probe(const RunConfig& rc) {
  CommandOutput out;
  const DataSplit data = load_data(rc);
  Checkpoint ck;
  if (rc.has("experiment.checkpoint")) {
    ck = load_checkpoint(rc.get("experiment.checkpoint"));
    if (ck.model.dims().front() != data.train.inputs.cols())
      throw ConfigError("probe: checkpoint input width " + std::to_string(ck.model.dims().front()) +
                        " does not match the data (" + std::to_string(data.train.inputs.cols()) + ")");
  } else {
    const TrainResult res = train(rc.train(rc.seeds().front()), data.train);
    ck = res.checkpoint;
    out.files["history.csv"] = history_csv(res.history);
  }
  const Checkpoint init = initial_checkpoint(ck.config, data.train.inputs.cols());

  std::ostringstream probe_text, class_text;
  CsvWriter probe(probe_text, {"model", "top1", "knn_top1", "n_train", "n_test", "probe_epochs"});
  CsvWriter per_class(class_text, {"model", "class", "count", "accuracy"});
  for (const auto& [name, model] : {std::pair<std::string, const Mlp*>{"trained", &ck.model},
                                    std::pair<std::string, const Mlp*>{"random-init", &init.model}}) {
    const ProbeOutcome o = evaluate_encoder(*model, data, rc);
    probe.row(name, o.probe.top1_accuracy, o.knn_top1, o.probe.n_train, o.probe.n_test, o.probe.probe_epochs);
    for (std::size_t c = 0; c < o.probe.per_class_accuracy.size(); ++c)
      per_class.row(name, c, o.probe.per_class_count[c], o.probe.per_class_accuracy[c]);
    out.note("probe: " + name + " top-1 " + format_double(o.probe.top1_accuracy));
  }
  out.files["probe.csv"] = probe_text.str();
  out.files["probe_per_class.csv"] = class_text.str();
  if (rc.get_bool("experiment.export_features")) {
    std::ostringstream f;
    write_features_csv(f, extract_features(ck, data.test), data.test.labels, data.test.meta);
    out.files["features.csv"] = f.str();
  }
  return out;
}

// ---------------------------------------------------------------------------
// compare

struct CompareCell {
  std::string kind;  // a loss kind, or "random-init"
  std::optional<double> lambda;
  std::uint64_t seed = 0;
};

struct CompareResult {
  ProbeOutcome final;
  std::vector<std::pair<std::size_t, double>> curve;  // (epoch, probe top-1)
};

inline bool lambda_matters(LossKind k) { return k == LossKind::align_global || k == LossKind::align_cond; }

/// Cells in output order: per kind (and lambda, for swept kinds), per seed;
/// random-init cells last.
inline std::vector<CompareCell> compare_cells(const RunConfig& rc) {
  const auto seeds = rc.seeds();
  const auto sweep = rc.get_list("experiment.sweep_kinds");
  std::vector<CompareCell> cells;
  for (const auto& name : rc.get_list("experiment.kinds")) {
    const LossKind k = parse_loss_kind(name);
    std::vector<std::optional<double>> lambdas;
    if (!lambda_matters(k)) lambdas.push_back(std::nullopt);
    else if (std::ranges::find(sweep, name) != sweep.end())
      for (double l : rc.get_double_list("experiment.lambdas")) lambdas.push_back(l);
    else lambdas.push_back(rc.get_double("loss.lambda"));
    for (const auto& l : lambdas)
      for (auto s : seeds) cells.push_back({std::string(to_string(k)), l, s});
  }
  for (auto s : seeds) cells.push_back({"random-init", std::nullopt, s});
  return cells;
}

namespace detail {

inline double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

inline std::optional<double> stderr_of(const std::vector<double>& v) {
  if (v.size() < 2) return std::nullopt;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
}

inline std::string series_name(const CompareCell& c) {
  return c.lambda ? c.kind + "@" + format_double(*c.lambda) : c.kind;
}

}  // namespace detail

inline double median(std::vector<double> v) {
  if (v.empty()) throw InvalidArgument("median of nothing");
  std::ranges::sort(v);
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

struct CompareRun {
  std::vector<CompareCell> cells;
  std::vector<CompareResult> results;  // parallel to cells
};

/// Trains and probes every cell; cells run in parallel, results keep cell
/// order.
inline CompareRun compare_run(const RunConfig& rc, const DataSplit& data) {
  CompareRun run;
  run.cells = compare_cells(rc);
  const auto& cells = run.cells;
  const std::size_t eval_every = rc.get_size("experiment.eval_every");
  // validate every cell's config before spending time on any of them
  std::vector<TrainConfig> configs(cells.size());
  for (std::size_t k = 0; k < cells.size(); ++k) {
    TrainConfig t = rc.train(cells[k].seed);
    if (cells[k].kind != "random-init") {
      t.loss_kind = parse_loss_kind(cells[k].kind);
      if (cells[k].lambda) t.lambda = *cells[k].lambda;
    }
    try {
      t.validate();
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
    configs[k] = t;
  }

  run.results.resize(cells.size());
  parallel_for(cells.size(), std::max<std::size_t>(1, rc.get_size("experiment.threads")), [&](std::size_t k) {
    const TrainConfig& t = configs[k];
    CompareResult& r = run.results[k];
    if (cells[k].kind == "random-init") {
      r.final = evaluate_encoder(initial_checkpoint(t, data.train.inputs.cols()).model, data, rc);
      return;
    }
    EpochCallback cb;
    if (eval_every > 0)
      cb = [&](std::size_t epoch, const Mlp& model) {
        if (epoch % eval_every != 0 || epoch == t.epochs) return;
        const Matrix ftr = forward(model, data.train.inputs).first;
        const Matrix fte = forward(model, data.test.inputs).first;
        r.curve.emplace_back(epoch,
                             linear_probe(ftr, data.train.labels, fte, data.test.labels, probe_options(rc)).top1_accuracy);
      };
    const TrainResult res = train(t, data.train, cb);
    r.final = evaluate_encoder(res.checkpoint.model, data, rc);
    r.curve.emplace_back(t.epochs, r.final.probe.top1_accuracy);
  });
  return run;
}

/// compare.csv, compare_summary.csv and the two plot-data files.
inline CommandOutput compare_output(const CompareRun& run) {
  CommandOutput out;
  const auto& cells = run.cells;
  const auto& results = run.results;

  std::ostringstream cmp_text;
  CsvWriter cmp(cmp_text, {"loss_kind", "lambda", "seed", "top1", "knn_top1", "align_score", "global_unif_score",
                           "cond_unif_score"});
  for (std::size_t k = 0; k < cells.size(); ++k) {
    const auto& m = results[k].final.metrics;
    cmp.row(cells[k].kind, cells[k].lambda, cells[k].seed, results[k].final.probe.top1_accuracy,
            results[k].final.knn_top1, m.align_score, m.global_unif_score, m.cond_unif_score);
  }
  out.files["compare.csv"] = cmp_text.str();

  // series in first-appearance order
  std::vector<std::string> series;
  std::map<std::string, std::vector<std::size_t>> members;
  for (std::size_t k = 0; k < cells.size(); ++k) {
    const std::string s = detail::series_name(cells[k]);
    if (!members.contains(s)) series.push_back(s);
    members[s].push_back(k);
  }

  std::ostringstream sum_text;
  CsvWriter sum(sum_text, {"series", "n_seeds", "median_top1", "mean_top1", "stderr_top1"});
  std::ostringstream epoch_text;
  CsvWriter ep(epoch_text, {"series", "x", "y", "stderr"});
  for (const auto& s : series) {
    std::vector<double> top1;
    std::map<std::size_t, std::vector<double>> by_epoch;
    for (auto k : members[s]) {
      top1.push_back(results[k].final.probe.top1_accuracy);
      for (const auto& [e, acc] : results[k].curve) by_epoch[e].push_back(acc);
    }
    sum.row(s, top1.size(), median(top1), detail::mean_of(top1), detail::stderr_of(top1));
    out.note("compare: " + s + " median top-1 " + format_double(median(top1)));
    for (const auto& [e, accs] : by_epoch) ep.row(s, e, detail::mean_of(accs), detail::stderr_of(accs));
  }
  out.files["compare_summary.csv"] = sum_text.str();
  out.files["acc_vs_epoch.csv"] = epoch_text.str();

  std::ostringstream lam_text;
  CsvWriter lam(lam_text, {"series", "x", "y", "stderr"});
  std::map<std::string, std::map<double, std::vector<double>>> by_lambda;
  std::vector<std::string> lam_kinds;
  for (std::size_t k = 0; k < cells.size(); ++k) {
    if (!cells[k].lambda) continue;
    if (!by_lambda.contains(cells[k].kind)) lam_kinds.push_back(cells[k].kind);
    by_lambda[cells[k].kind][*cells[k].lambda].push_back(results[k].final.probe.top1_accuracy);
  }
  for (const auto& kind : lam_kinds)
    for (const auto& [l, accs] : by_lambda[kind]) lam.row(kind, l, detail::mean_of(accs), detail::stderr_of(accs));
  out.files["acc_vs_lambda.csv"] = lam_text.str();
  return out;
}

inline CommandOutput cmd_compare(const RunConfig& rc) { return compare_output(compare_run(rc, load_data(rc))); }

// ---------------------------------------------------------------------------
// fixture

inline CommandOutput cmd_fixture(const RunConfig& rc) {
  CommandOutput out;
  const auto entries = generate_fixture(50, rc.seeds().front());
  std::ostringstream os(std::ios::binary);
  write_fixture(os, entries);
  out.files["parity_fixture.cclf"] = os.str();
  out.note("fixture: " + std::to_string(entries.size()) + " entries");
  return out;
}

inline const std::map<std::string, CommandFn>& command_table() {
  static const std::map<std::string, CommandFn> table{
      {"gradcheck", cmd_gradcheck}, {"decompose", cmd_decompose}, {"converge", cmd_converge},
      {"train", cmd_train},         {"probe", cmd_probe},         {"compare", cmd_compare},
      {"fixture", cmd_fixture},
  };
  return table;
}

// ---------------------------------------------------------------------------
// Run directory

inline std::string default_run_dir(std::uint64_t seed) {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
  std::string base = std::string("runs/") + stamp + "-seed" + std::to_string(seed);
  std::string dir = base;
  for (int k = 1; std::filesystem::exists(dir); ++k) dir = base + "-" + std::to_string(k);
  return dir;
}

/// Writes config.ini, log.txt and every output file into a sibling temp
/// directory, then renames it to dir. Fails if dir exists.
inline void commit_run_dir(const std::filesystem::path& dir, const RunConfig& rc, const CommandOutput& out) {
  namespace fs = std::filesystem;
  if (fs::exists(dir)) throw ConfigError("output directory '" + dir.string() + "' already exists");
  const fs::path parent = dir.has_parent_path() ? dir.parent_path() : fs::path(".");
  fs::create_directories(parent);
  const fs::path tmp = parent / ("." + dir.filename().string() + ".tmp-" + std::to_string(::getpid()));
  fs::remove_all(tmp);
  fs::create_directory(tmp);
  try {
    auto put = [&](const std::string& name, const std::string& bytes) {
      std::ofstream os(tmp / name, std::ios::binary);
      os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
      if (!os) throw FormatError("cannot write '" + (tmp / name).string() + "'");
    };
    put("config.ini", rc.to_ini());
    put("log.txt", out.log);
    for (const auto& [name, bytes] : out.files) put(name, bytes);
    fs::rename(tmp, dir);
  } catch (...) {
    std::error_code ec;
    fs::remove_all(tmp, ec);
    throw;
  }
}

}  // namespace condcl

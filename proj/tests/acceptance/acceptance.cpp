// Acceptance gate. One criterion per invocation:
//   acceptance <criterion>
// prints a single PASS/FAIL/SKIP line and exits 0 (pass), 1 (fail) or
// 77 (skipped because an external dataset is absent).

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>

#include "../stats_util.hpp"
#include "condcl/commands.hpp"

namespace condcl {
namespace {

constexpr int kSkip = 77;

struct Verdict {
  bool passed = false;
  std::string detail;
  bool skipped = false;
};

RunConfig shipped(const std::string& name, std::map<std::string, std::string> overrides = {}) {
  return RunConfig::from_file(std::string(CONDCL_CONFIG_DIR) + "/" + name + ".ini", overrides);
}

std::string num(double v, const char* fmt = "%.3g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, fmt, v);
  return buf;
}

std::string within(double seconds, double budget) {
  return "runtime " + num(seconds, "%.1f") + " s (budget " + num(budget, "%.0f") + " s)";
}

// ---------------------------------------------------------------------------

Verdict decomposition(double& budget) {
  budget = 10;
  const RunConfig rc = shipped("decompose");
  const auto out = cmd_decompose(rc);
  const std::size_t batches = rc.get_size("experiment.batches") * rc.seeds().size();
  std::string log = out.log.substr(0, out.log.find('\n'));
  return {out.exit_code == kExitOk && batches >= 100, log + " (limits 1e-12 / 1e-10, >= 100 batches)"};
}

Verdict gradient_oracle(double& budget) {
  budget = 60;
  const auto out = cmd_gradcheck(shipped("gradcheck"));
  double worst_loss = 0.0, worst_enc = 0.0;
  std::size_t n = 0;
  std::istringstream is(out.files.at("gradcheck.csv"));
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    ++n;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
    double& worst = cells[0].rfind("encoder", 0) == 0 ? worst_enc : worst_loss;
    worst = std::max(worst, std::stod(cells[5]));
  }
  return {out.exit_code == kExitOk, std::to_string(n) + " checks; worst loss rel err " + num(worst_loss) +
                                        " (< 1e-6), worst encoder rel err " + num(worst_enc) + " (< 1e-5)"};
}

Verdict degenerate_equivalences(double& budget) {
  budget = 10;
  double worst_supcon = 0.0, worst_infonce = 0.0, worst_cond = 0.0;
  auto rel = [](double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300}); };
  Rng root(2024);
  std::size_t cases = 0;
  for (std::size_t n : {2u, 3u, 8u, 64u, 256u})
    for (std::size_t d : {2u, 16u, 64u})
      for (double tau : {0.05, 0.1, 1.0}) {
        Rng rng = root.split(cases++);
        LossConfig lc;
        lc.tau = tau;
        const Matrix a = random_sphere(n, d, rng), c = random_sphere(n, d, rng);

        // delta kernel on class labels against SupCon
        std::vector<int> labels(n);
        MetaBatch cat(n);
        for (std::size_t i = 0; i < n; ++i) {
          labels[i] = static_cast<int>(rng.below(4));
          cat[i].categorical = {labels[i]};
        }
        const Batch bd = Batch::make(a, c, weight_matrix(cat, KernelConfig::make(KernelFamily::categorical)));
        Matrix stacked(2 * n, d);
        for (std::size_t i = 0; i < n; ++i) {
          std::ranges::copy(a.row(i), stacked.row(i).begin());
          std::ranges::copy(c.row(i), stacked.row(n + i).begin());
        }
        worst_supcon = std::max(worst_supcon,
                                rel(yaware_infonce(bd, lc).value, supcon_reference(stacked, labels, lc).value));

        // identity-positive weights against InfoNCE
        const Batch bi = Batch::make(a, c, identity_weights(n));
        worst_infonce = std::max(worst_infonce, rel(yaware_infonce(bi, lc).value, infonce_reference(bi, lc).value));

        // sigma -> 0 with distinct labels: uniform over off-diagonal pairs
        MetaBatch distinct(n);
        for (std::size_t i = 0; i < n; ++i) distinct[i].continuous = {0.01 * static_cast<double>(i)};
        const Batch bs = Batch::make(a, c, weight_matrix(distinct, KernelConfig::make(KernelFamily::rbf, 1e-9)));
        std::vector<double> off;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < n; ++j)
            if (i != j) off.push_back(dot(a.row(i), c.row(j)) / tau);
        const double closed = logsumexp(off) - std::log(static_cast<double>(n * (n - 1)));
        worst_cond = std::max(worst_cond, rel(conditional_uniformity(bs, lc).value, closed));
      }
  return {worst_supcon < 1e-9 && worst_infonce < 1e-12 && worst_cond < 1e-9,
          std::to_string(cases) + " batches; rel err supcon " + num(worst_supcon) + " (< 1e-9), infonce " +
              num(worst_infonce) + " (< 1e-12), cond_unif closed form " + num(worst_cond) + " (< 1e-9)"};
}

Verdict limit_convergence(double& budget) {
  budget = 600;
  const RunConfig rc = shipped("converge");
  const auto out = cmd_converge(rc);
  std::string gaps;
  std::istringstream is(out.files.at("converge_summary.csv"));
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    const auto c1 = line.find(','), c2 = line.find(',', c1 + 1);
    gaps += (gaps.empty() ? "" : " > ") + line.substr(0, c1) + ":" + num(std::stod(line.substr(c1 + 1, c2 - c1 - 1)));
  }
  // term,estimate,stderr
  std::map<std::string, std::pair<std::string, std::string>> limit;
  std::istringstream ls(out.files.at("converge_limit.csv"));
  std::getline(ls, line);
  while (std::getline(ls, line)) {
    const auto c1 = line.find(','), c2 = line.find(',', c1 + 1);
    limit[line.substr(0, c1)] = {line.substr(c1 + 1, c2 - c1 - 1), line.substr(c2 + 1)};
  }
  const auto& [loss, loss_err] = limit.at("loss");
  const std::string& slope = limit.at("loglog_slope").first;
  return {out.exit_code == kExitOk,
          "reps " + rc.get("experiment.reps") + ", limit (" + rc.get("experiment.limit_samples") + " samples) " +
              num(std::stod(loss), "%.5f") + " +- " + num(std::stod(loss_err), "%.1e") + "; mean gaps " + gaps +
              "; slope " + (slope.empty() ? std::string("n/a") : num(std::stod(slope), "%.3f")) +
              " (in [-0.7, -0.3])"};
}

Verdict sampler_exactness(double& budget) {
  budget = 60;
  const auto [po, pe] = test::sampler_joint_counts(true, 12, 100000);
  const auto [no, ne] = test::sampler_joint_counts(false, 13, 100000);
  bool zero_cells_ok = true;
  for (std::size_t k = 0; k < pe.size(); ++k) {
    if (pe[k] == 0.0 && po[k] != 0.0) zero_cells_ok = false;
    if (ne[k] == 0.0 && no[k] != 0.0) zero_cells_ok = false;
  }
  const double p_pos = test::chi_square_p(po, pe), p_neg = test::chi_square_p(no, ne);

  // every non-degenerate row of (M - w)/(M - Z) averages to exactly 1
  double worst = 0.0;
  std::size_t batches = 0;
  Rng root(77);
  for (std::size_t n : {2u, 8u, 64u, 256u})
    for (double sigma : {0.1, 1.0, 3.0, 30.0})
      for (int rep = 0; rep < 4; ++rep) {
        Rng rng = root.split(batches++);
        MetaBatch meta(n);
        for (auto& r : meta) r.continuous = {rng.uniform(0.0, 10.0)};
        const WeightMatrix w = weight_matrix(meta, KernelConfig::make(KernelFamily::rbf, sigma));
        const Matrix v = conditional_uniformity_weights(w, 1.0, 1e-12);
        for (std::size_t i = 0; i < n; ++i) {
          if (1.0 - w.z_hat[i] < 1e-12) continue;
          double s = 0.0;
          for (double x : v.row(i)) s += x;
          worst = std::max(worst, std::abs(s / static_cast<double>(n) - 1.0));
        }
      }
  return {p_pos > 0.01 && p_neg > 0.01 && zero_cells_ok && worst < 1e-12,
          "chi2 p positive " + num(p_pos) + ", negative " + num(p_neg) + " (> 0.01, 1e5 draws each); max |row mean - 1| " +
              num(worst) + " over " + std::to_string(batches) + " batches (< 1e-12)"};
}

Verdict synthetic_training(double& budget) {
  const RunConfig rc = shipped("compare_synthetic", {{"experiment.kinds", "align+cond_unif"},
                                                     {"experiment.sweep_kinds", ""},
                                                     {"experiment.eval_every", "0"}});
  budget = 300.0 * static_cast<double>(rc.seeds().size());
  const DataSplit data = load_data(rc);
  const double knn_raw = knn_accuracy(data.train.inputs, data.train.labels, data.test.inputs, data.test.labels, 5);
  const CompareRun run = compare_run(rc, data);
  std::vector<double> trained, random;
  for (std::size_t k = 0; k < run.cells.size(); ++k)
    (run.cells[k].kind == "random-init" ? random : trained).push_back(run.results[k].final.probe.top1_accuracy);
  const double mt = median(trained), mr = median(random);
  return {trained.size() == 5 && mt - mr >= 0.15,
          std::to_string(trained.size()) + " seeds; median top-1 align+cond_unif " + num(mt, "%.3f") +
              " vs random-init " + num(mr, "%.3f") + ", gain " + num(100 * (mt - mr), "%.1f") +
              " points (>= 15); raw-input 5-NN oracle " + num(knn_raw, "%.3f")};
}

Verdict cifar_directional(double& budget) {
  budget = 1800;
  const RunConfig rc = shipped("cifar_compare");
  if (!cifar10_available(rc.get("data.root")))
    return {false, "CIFAR-10 binary batches not found (set CONDCL_DATA_DIR); criterion not evaluated", true};
  const DataSplit data = load_data(rc);
  const CompareRun run = compare_run(rc, data);
  const double lambda = rc.get_double("loss.lambda");
  std::map<std::string, std::vector<double>> acc;
  for (std::size_t k = 0; k < run.cells.size(); ++k) {
    const auto& c = run.cells[k];
    if (c.lambda && *c.lambda != lambda) continue;
    acc[c.kind].push_back(run.results[k].final.probe.top1_accuracy);
  }
  const double random = median(acc.at("random-init"));
  bool all_beat = true;
  std::string detail = "median top-1 random-init " + num(random, "%.3f");
  for (const auto& [kind, v] : acc) {
    if (kind == "random-init") continue;
    all_beat = all_beat && median(v) >= random + 0.05;
    detail += ", " + kind + " " + num(median(v), "%.3f");
  }
  const double cond = median(acc.at("align+cond_unif")), glob = median(acc.at("align+global_unif"));
  const bool ordered = cond >= glob - 0.01;
  detail += std::string("; (a) every variant >= random + 5 points: ") + (all_beat ? "yes" : "no") +
            "; (b) cond >= global - 1 point: " + (ordered ? "yes" : "no");

  CommandOutput out = compare_output(run);
  const std::string dir = "cifar-compare-" + default_run_dir(rc.seeds().front()).substr(5);
  commit_run_dir(dir, rc, out);
  detail += "; tables in " + dir;
  return {all_beat && ordered, detail};
}

Verdict determinism(double& budget) {
  budget = 300;
  // each acceptance command at reduced size, run twice (compare also with a
  // different thread count); every CSV must match byte for byte
  const std::map<std::string, std::function<CommandOutput(std::size_t threads)>> runs{
      {"decompose", [](std::size_t t) {
         return cmd_decompose(shipped("decompose", {{"experiment.threads", std::to_string(t)}}));
       }},
      {"gradcheck", [](std::size_t t) {
         return cmd_gradcheck(shipped("gradcheck", {{"experiment.sizes", "2x2,8x8,32x64"},
                                                    {"experiment.threads", std::to_string(t)}}));
       }},
      {"converge", [](std::size_t t) {
         return cmd_converge(shipped("converge", {{"experiment.reps", "4"},
                                                  {"experiment.limit_samples", "20000"},
                                                  {"experiment.batch_sizes", "64,256"},
                                                  {"experiment.threads", std::to_string(t)}}));
       }},
      {"compare", [](std::size_t t) {
         return cmd_compare(shipped("compare_synthetic", {{"experiment.seeds", "0,1"},
                                                          {"experiment.kinds", "supcon,align+cond_unif"},
                                                          {"experiment.lambdas", "0,1"},
                                                          {"train.epochs", "3"},
                                                          {"data.n_train", "400"},
                                                          {"data.n_test", "200"},
                                                          {"experiment.eval_every", "1"},
                                                          {"experiment.probe_epochs", "100"},
                                                          {"experiment.threads", std::to_string(t)}}));
       }},
      {"probe", [](std::size_t t) {
         return cmd_probe(shipped("probe", {{"train.epochs", "3"},
                                            {"data.n_train", "400"},
                                            {"data.n_test", "200"},
                                            {"experiment.export_features", "true"},
                                            {"experiment.threads", std::to_string(t)}}));
       }},
  };
  std::size_t files = 0;
  std::string mismatched;
  for (const auto& [name, fn] : runs) {
    const CommandOutput a = fn(1), b = fn(1), c = fn(2);
    for (const auto& [file, bytes] : a.files) {
      ++files;
      if (b.files.at(file) != bytes || c.files.at(file) != bytes) mismatched += " " + name + "/" + file;
    }
  }
  return {mismatched.empty(), std::to_string(files) + " output files from " + std::to_string(runs.size()) +
                                  " commands identical across reruns and thread counts" +
                                  (mismatched.empty() ? "" : "; MISMATCH:" + mismatched)};
}

const std::map<std::string, std::function<Verdict(double&)>>& criteria() {
  static const std::map<std::string, std::function<Verdict(double&)>> table{
      {"decomposition", decomposition},
      {"gradient_oracle", gradient_oracle},
      {"degenerate_equivalences", degenerate_equivalences},
      {"limit_convergence", limit_convergence},
      {"sampler_exactness", sampler_exactness},
      {"synthetic_training", synthetic_training},
      {"cifar_directional", cifar_directional},
      {"determinism", determinism},
  };
  return table;
}

int run_one(const std::string& name) {
  const auto it = criteria().find(name);
  if (it == criteria().end()) {
    std::cerr << "unknown criterion '" << name << "'\n";
    return 2;
  }
  const auto t0 = std::chrono::steady_clock::now();
  double budget = 0.0;
  Verdict v;
  try {
    v = it->second(budget);
  } catch (const std::exception& e) {
    v = {false, std::string("error: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (v.skipped) {
    std::cout << "SKIP " << name << ": " << v.detail << "\n";
    return kSkip;
  }
  const bool in_time = budget <= 0.0 || secs <= budget;
  const bool ok = v.passed && in_time;
  std::cout << (ok ? "PASS " : "FAIL ") << name << ": " << v.detail << "; " << within(secs, budget)
            << (in_time ? "" : " OVER BUDGET") << "\n";
  return ok ? 0 : 1;
}

}  // namespace
}  // namespace condcl

int main(int argc, char** argv) {
  if (argc == 2 && std::string(argv[1]) == "--list") {
    for (const auto& [name, fn] : condcl::criteria()) std::cout << name << "\n";
    return 0;
  }
  if (argc == 2 && std::string(argv[1]) != "all") return condcl::run_one(argv[1]);
  int status = 0;
  for (const auto& [name, fn] : condcl::criteria()) {
    const int rc = condcl::run_one(name);
    if (rc == 1 || rc == 2) status = 1;
  }
  return status;
}

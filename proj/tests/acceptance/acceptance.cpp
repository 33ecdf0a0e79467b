// Acceptance run: one PASS/FAIL line per criterion, then a summary.
//
//   acceptance [output-dir]
//
// Training artifacts (histories, reports, checkpoints) go to output-dir,
// "acceptance_out" by default.
#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "choir/audit.hpp"
#include "choir/corpus.hpp"
#include "choir/metrics.hpp"
#include "choir/parallel.hpp"
#include "choir/selfcheck.hpp"
#include "choir/training.hpp"

namespace fs = std::filesystem;
using namespace choir;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

struct Outcome {
  int criterion;
  bool passed;
  std::string detail;
};

std::vector<Outcome> outcomes;

void report(int criterion, bool passed, const std::string& detail) {
  outcomes.push_back({criterion, passed, detail});
  std::cout << "criterion " << criterion << ": " << (passed ? "PASS" : "FAIL") << "  " << detail << std::endl;
}

// Training profile for the desk corpus runs.
constexpr std::size_t kTrainPoints = 256;
constexpr std::size_t kEpochs = 300;
constexpr std::size_t kEvalInterval = 25;
constexpr std::size_t kSeeds = 3;

struct Run {
  std::string label;
  std::uint64_t seed = 0;
  TrainResult result;
  EvalReport report;
  double seconds = 0.0;
};

Run train_and_evaluate(const Dataset& data, const std::string& label, std::uint64_t seed, PairMode mode,
                       bool use_residual, const fs::path& out) {
  TrainConfig cfg;
  cfg.seed = seed;
  cfg.mode = mode;
  cfg.points = kTrainPoints;
  cfg.epochs = kEpochs;
  cfg.eval_interval = kEvalInterval;
  cfg.model.use_residual = use_residual;
  cfg.model.precision = Dtype::f32;

  Run run;
  run.label = label;
  run.seed = seed;
  const auto t0 = Clock::now();
  const auto [train_set, val_set] = split_by_instance(data, cfg.val_fraction);
  run.result = train(train_set, val_set, cfg, [&](const HistoryRow& row) {
    if (row.evaluated()) {
      std::cerr << "  [" << label << " seed " << seed << "] epoch " << row.epoch << " loss " << row.loss
                << " stability " << row.val_stability_deg << " consistency " << row.val_consistency_deg << '\n';
    }
  });

  EvalConfig ec;
  ec.points = kTrainPoints;
  ec.seed = 1000 + seed;
  ec.threads = thread_budget();
  run.report = evaluate(val_set, run.result.model, ec);
  run.seconds = seconds_since(t0);

  const fs::path dir = out / (label + "_seed" + std::to_string(seed));
  fs::create_directories(dir);
  run.result.model.save(dir / "checkpoint.ckpt");
  std::ofstream(dir / "history.csv") << [&] {
    std::ostringstream s;
    write_history(s, run.result.history);
    return s.str();
  }();
  std::ofstream csv(dir / "report.csv");
  write_report_csv(csv, run.report);
  std::cerr << "  [" << label << " seed " << seed << "] selected epoch " << run.result.selected_epoch
            << ", mean stability " << run.report.mean_stability() << ", mean consistency "
            << run.report.mean_consistency() << ", " << fmt("%.0f", run.seconds) << " s\n";
  return run;
}

double mean_of(const std::vector<Run>& runs, const std::function<double(const EvalReport&)>& f) {
  double s = 0.0;
  for (const auto& r : runs) s += f(r.report);
  return s / static_cast<double>(runs.size());
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path out = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_out");
  fs::create_directories(out);
  const auto start = Clock::now();

  selfcheck::Options opts;

  {
    const auto t0 = Clock::now();
    const auto c = selfcheck::equivariance(opts);
    const double t = seconds_since(t0);
    report(1, c.passed && t < 120.0,
           "max angle " + fmt("%.3g", c.value) + " rad over " + std::to_string(opts.trials) + " trials (< 1e-6), " +
               fmt("%.1f", t) + " s (< 120 s)");
  }
  {
    const auto c = selfcheck::residual_invariance(opts);
    report(2, c.passed, "max angle " + fmt("%.3g", c.value) + " rad over " + std::to_string(opts.trials) +
                            " trials (< 1e-6)");
  }
  {
    const auto t0 = Clock::now();
    const auto checks = selfcheck::gradients(opts);
    const double t = seconds_since(t0);
    double worst = 0.0;
    std::string worst_name;
    bool ok = true;
    for (const auto& c : checks) {
      ok = ok && c.passed;
      if (c.value >= worst) {
        worst = c.value;
        worst_name = c.name;
      }
    }
    report(3, ok && t < 600.0,
           std::to_string(checks.size()) + " gradchecks, worst " + fmt("%.3g", worst) + " (" + worst_name +
               ", < 1e-3), " + fmt("%.1f", t) + " s (< 600 s)");
  }
  {
    const auto checks = selfcheck::rotation_mean(opts);
    report(4, checks[0].passed && checks[1].passed,
           "max angle to brute force " + fmt("%.3g", checks[0].value) + " deg (< 0.1), max |det - 1| " +
               fmt("%.3g", checks[1].value) + " (< 1e-9)");
  }

  std::cerr << "generating the desk corpus\n";
  const Dataset desk = generate_synthetic_corpus(default_corpus_spec(3, 64, 1024, 0));

  {
    AuditOptions ao;
    ao.k = 20;
    ao.points = 1024;
    ao.trials = 10;
    ao.threads = thread_budget();
    const AuditTable table = audit_dataset(desk, ao);
    std::size_t ok = 0;
    for (const auto& c : table.clouds) ok += c.double_mean <= c.single_mean;
    const double fraction = static_cast<double>(ok) / static_cast<double>(table.clouds.size());
    std::ofstream a(out / "knn_audit.csv");
    write_audit_table(a, table);
    report(6, fraction >= 0.9,
           "double <= single on " + std::to_string(ok) + " of " + std::to_string(table.clouds.size()) +
               " clouds (" + fmt("%.1f", 100.0 * fraction) + "%, >= 90%)");
  }

  const auto train_start = Clock::now();
  std::vector<Run> full, ablation, same;
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    full.push_back(train_and_evaluate(desk, "cross", seed, PairMode::cross_instance, true, out));
    ablation.push_back(train_and_evaluate(desk, "no_residual", seed, PairMode::cross_instance, false, out));
  }
  const double criterion7_seconds = seconds_since(train_start);

  {
    // Stability of the seed 0 model under both kNN regimes.
    const Run& run = full.front();
    const auto [train_set, val_set] = split_by_instance(desk, 0.2);
    EvalConfig ec;
    ec.points = kTrainPoints;
    ec.seed = 77;
    ec.threads = thread_budget();
    ec.knn_mode = KnnMode::frozen;
    const EvalReport frozen = evaluate(val_set, run.result.model, ec);
    ec.knn_mode = KnnMode::adaptive;
    const EvalReport adaptive = evaluate(val_set, run.result.model, ec);
    double worst_frozen = 0.0, worst_adaptive = 0.0;
    for (const auto& c : frozen.classes) worst_frozen = std::max(worst_frozen, c.mean_stability_deg);
    for (const auto& c : adaptive.classes) worst_adaptive = std::max(worst_adaptive, c.mean_stability_deg);
    report(5, worst_frozen < 0.1 && worst_adaptive < 2.0,
           "K=10 worst class stability frozen " + fmt("%.4f", worst_frozen) + " deg (< 0.1), adaptive single " +
               fmt("%.4f", worst_adaptive) + " deg (< 2)");
  }

  {
    bool per_class = true;
    double worst_cons = 0.0, worst_stab = 0.0;
    for (const auto& r : full) {
      for (const auto& c : r.report.classes) {
        per_class = per_class && c.consistency_deg < 15.0 && c.mean_stability_deg < 1.0;
        worst_cons = std::max(worst_cons, c.consistency_deg);
        worst_stab = std::max(worst_stab, c.mean_stability_deg);
      }
    }
    std::size_t worse = 0;
    std::ostringstream seeds;
    for (std::size_t s = 0; s < kSeeds; ++s) {
      const double a = full[s].report.mean_consistency(), b = ablation[s].report.mean_consistency();
      worse += b > a;
      seeds << (s ? ", " : "") << fmt("%.2f", a) << " vs " << fmt("%.2f", b);
    }
    report(7, per_class && worse >= 2 && criterion7_seconds < 7200.0,
           "worst class consistency " + fmt("%.2f", worst_cons) + " deg (< 15), worst class stability " +
               fmt("%.4f", worst_stab) + " deg (< 1); ablation worse on " + std::to_string(worse) +
               " of 3 seeds (>= 2) [" + seeds.str() + "]; " + fmt("%.0f", criterion7_seconds) + " s (< 7200 s)");
  }

  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    same.push_back(train_and_evaluate(desk, "same_instance", seed, PairMode::same_instance, true, out));
  }
  {
    auto stab = [](const EvalReport& r) { return r.mean_stability(); };
    auto cons = [](const EvalReport& r) { return r.mean_consistency(); };
    const double cross_stab = mean_of(full, stab), same_stab = mean_of(same, stab);
    const double cross_cons = mean_of(full, cons), same_cons = mean_of(same, cons);
    report(8, same_stab <= cross_stab && same_cons >= cross_cons,
           "same-instance stability " + fmt("%.4f", same_stab) + " vs cross " + fmt("%.4f", cross_stab) +
               " deg (<=), consistency " + fmt("%.2f", same_cons) + " vs cross " + fmt("%.2f", cross_cons) +
               " deg (>=)");
  }

  {
    const auto c = selfcheck::loss_forms(opts);
    report(9, c.passed, "max |full - simplified| " + fmt("%.3g", c.value) + " over " +
                            std::to_string(opts.loss_pairs) + " pairs (< 1e-9)");
  }
  {
    const auto c = selfcheck::loss_gauge(opts);
    report(10, c.passed, "max |loss change| under a common Q " + fmt("%.3g", c.value) + " (< 1e-12)");
  }

  std::sort(outcomes.begin(), outcomes.end(), [](const auto& a, const auto& b) { return a.criterion < b.criterion; });
  std::size_t passed = 0;
  std::cout << "\nsummary\n";
  for (const auto& o : outcomes) {
    passed += o.passed;
    std::cout << "criterion " << o.criterion << ": " << (o.passed ? "PASS" : "FAIL") << '\n';
  }
  std::cout << passed << " of " << outcomes.size() << " criteria passed in " << fmt("%.0f", seconds_since(start))
            << " s" << std::endl;
  return passed == outcomes.size() ? 0 : 1;
}

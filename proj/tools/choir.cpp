#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "choir/audit.hpp"
#include "choir/corpus.hpp"
#include "choir/error.hpp"
#include "choir/metrics.hpp"
#include "choir/run_metadata.hpp"
#include "choir/selfcheck.hpp"
#include "choir/training.hpp"

namespace fs = std::filesystem;
using namespace choir;

namespace {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3, kSelfcheck = 4 };

// Thrown for argument combinations CLI11 cannot express.
struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

void log(const std::string& msg) { std::cerr << "choir: " << msg << '\n'; }

void prepare_output_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw DataError(dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir) && !force) {
      throw DataError("output directory " + dir.string() + " is not empty (pass --force to overwrite)");
    }
  }
  fs::create_directories(dir);
}

template <typename Fn>
void write_file(const fs::path& path, Fn&& fn) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  fn(out);
  out.flush();
  if (!out) throw DataError("failed writing " + path.string());
}

std::string precision_name(Dtype d) { return d == Dtype::f32 ? "single" : "double"; }

Dtype parse_precision(const std::string& s) { return s == "single" ? Dtype::f32 : Dtype::f64; }

const std::vector<std::string> kPrecisions{"single", "double"};
const std::vector<std::string> kKnnModes{"adaptive", "frozen"};
const std::vector<std::string> kPairModes{"cross-instance", "same-instance", "mixed"};

struct Context {
  RunMetadata meta;
};

// ---------------------------------------------------------------- gen-data

struct GenDataArgs {
  fs::path out;
  std::size_t classes = 3;
  std::size_t instances = 64;
  std::size_t points = 1024;
  std::uint64_t seed = 0;
  std::string format = "binary";
  bool force = false;
};

int cmd_gen_data(const GenDataArgs& a, Context& ctx) {
  prepare_output_dir(a.out, a.force);
  const Dataset data = generate_synthetic_corpus(default_corpus_spec(a.classes, a.instances, a.points, a.seed));
  const auto manifest = save_corpus(data, a.out, a.format == "xyz" ? CloudFormat::xyz_text : CloudFormat::choir_binary);
  ctx.meta.seed = a.seed;
  ctx.meta.config = {{"classes", std::to_string(a.classes)},
                     {"instances", std::to_string(a.instances)},
                     {"points", std::to_string(a.points)},
                     {"format", a.format}};
  ctx.meta.write(a.out / "run_metadata.json");
  log("wrote " + std::to_string(data.clouds.size()) + " clouds and " + manifest.string());
  return kOk;
}

// ------------------------------------------------------------------- train

struct TrainArgs {
  fs::path data;
  fs::path out;
  fs::path config;
  bool force = false;
  bool no_residual = false;
};

int cmd_train(const TrainArgs& a, const std::vector<std::pair<std::string, CLI::Option*>>& flags, Context& ctx) {
  TrainConfig cfg;
  if (!a.config.empty()) apply_config(cfg, read_config_file(a.config));
  for (const auto& [key, opt] : flags) {
    if (opt->count() > 0) {
      try {
        set_config_value(cfg, key, opt->as<std::string>());
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
    }
  }
  if (a.no_residual) cfg.model.use_residual = false;

  const Dataset data = load_corpus(a.data);
  prepare_output_dir(a.out, a.force);
  ctx.meta.config = config_entries(cfg);
  ctx.meta.seed = cfg.seed;
  ctx.meta.precision = precision_name(cfg.model.precision);
  ctx.meta.knn_mode = knn_mode_name(cfg.model.knn_mode);
  write_file(a.out / "config.txt", [&](std::ostream& o) { write_config(o, cfg); });

  TrainResult result;
  try {
    result = train(data, cfg, [](const HistoryRow& row) {
      std::string line = "epoch " + std::to_string(row.epoch) + " loss " + std::to_string(row.loss);
      if (row.evaluated()) {
        line += " val_stability " + std::to_string(row.val_stability_deg) + " val_consistency " +
                std::to_string(row.val_consistency_deg);
      }
      log(line);
    });
  } catch (const TrainingDiverged& e) {
    log(e.what());
    log("replay with: " + ctx.meta.command_line + "  (same --seed " + std::to_string(cfg.seed) +
        "; the failing batch is epoch " + std::to_string(e.epoch) + ")");
    throw;
  }
  result.model.save(a.out / "checkpoint.ckpt");
  write_file(a.out / "history.csv", [&](std::ostream& o) { write_history(o, result.history); });
  ctx.meta.config["selected_epoch"] = std::to_string(result.selected_epoch);
  ctx.meta.write(a.out / "run_metadata.json");
  log("selected epoch " + std::to_string(result.selected_epoch) + "; wrote " + (a.out / "checkpoint.ckpt").string());
  return kOk;
}

// -------------------------------------------------------------------- eval

struct EvalArgs {
  fs::path checkpoint;
  fs::path data;
  fs::path out;
  std::size_t rotations = 10;
  std::uint64_t seed = 0;
  std::string knn_mode;
  std::string precision;
  std::string perturb = "none";
  std::size_t points = 0;
  std::string split = "validation";
  double val_fraction = 0.2;
  bool rotated_consistency = false;
  bool force = false;
};

int cmd_eval(const EvalArgs& a, Context& ctx) {
  auto model = CharacteristicOrientationPredictor::load(a.checkpoint);
  if (model.config().corpus_version != kCloudVersion) {
    throw DataError("checkpoint was trained on corpus version " + std::to_string(model.config().corpus_version) +
                    " but this corpus is version " + std::to_string(kCloudVersion));
  }
  if (!a.precision.empty()) model.mutable_config().precision = parse_precision(a.precision);
  EvalConfig cfg;
  cfg.rotations = a.rotations;
  cfg.seed = a.seed;
  if (!a.knn_mode.empty()) cfg.knn_mode = parse_knn_mode(a.knn_mode);
  try {
    cfg.perturbation = parse_perturbation(a.perturb);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  cfg.points = a.points;
  cfg.rotated_consistency = a.rotated_consistency;
  if (cfg.rotations < 2) throw UsageError("--K must be at least 2");

  Dataset data = load_corpus(a.data);
  if (a.split == "validation") data = split_by_instance(data, a.val_fraction).second;
  prepare_output_dir(a.out, a.force);

  EvalReport report = evaluate(data, model, cfg);
  report.metadata["checkpoint"] = a.checkpoint.string();
  report.metadata["split"] = a.split;
  report.metadata["code_version"] = ctx.meta.code_version;
  report.metadata["command_line"] = ctx.meta.command_line;
  report.metadata["started"] = ctx.meta.started;

  ctx.meta.seed = a.seed;
  ctx.meta.precision = precision_name(model.config().precision);
  ctx.meta.knn_mode = report.metadata["knn_mode"];
  ctx.meta.config = report.metadata;
  write_file(a.out / "report.csv", [&](std::ostream& o) { write_report_csv(o, report); });
  write_file(a.out / "report.json", [&](std::ostream& o) { write_report_json(o, report); });
  ctx.meta.write(a.out / "run_metadata.json");
  for (const auto& w : report.warnings) log("warning: " + w);
  for (const auto& c : report.classes) {
    std::cout << c.class_id << ": stability " << c.mean_stability_deg << " deg, consistency " << c.consistency_deg
              << " deg\n";
  }
  return kOk;
}

// ------------------------------------------------------------ canonicalize

struct CanonArgs {
  std::vector<fs::path> inputs;
  fs::path checkpoint;
  fs::path out;
  std::size_t points = 0;
  std::uint64_t seed = 0;
  std::string knn_mode;
  bool force = false;
};

int cmd_canonicalize(const CanonArgs& a, Context& ctx) {
  CharacteristicOrientationPredictor model;
  if (a.checkpoint.empty()) {
    PredictorConfig config;
    if (!a.knn_mode.empty()) config.knn_mode = parse_knn_mode(a.knn_mode);
    std::mt19937_64 rng(a.seed);
    model = CharacteristicOrientationPredictor(config, rng);
    log("no checkpoint given; using untrained weights from seed " + std::to_string(a.seed));
  } else {
    model = CharacteristicOrientationPredictor::load(a.checkpoint);
    if (!a.knn_mode.empty()) model.mutable_config().knn_mode = parse_knn_mode(a.knn_mode);
  }
  prepare_output_dir(a.out, a.force);
  std::size_t failures = 0, written = 0;
  for (std::size_t i = 0; i < a.inputs.size(); ++i) {
    const fs::path& in = a.inputs[i];
    try {
      const CloudFormat format = format_from_path(in);
      PointCloud pc = center(load_cloud(in, format));
      if (a.points && pc.size() != a.points) {
        std::mt19937_64 rng(a.seed + i);
        pc = center(resample(pc, a.points, rng));
      }
      const Rotation r = model.predict(pc);
      PointCloud canonical = apply_rotation(pc, r.transposed());
      canonical.instance_id = pc.instance_id;
      save_cloud(a.out / in.filename(), canonical, format);
      ++written;
      std::cout << in.string();
      for (int row = 0; row < 3; ++row) {
        for (int col = 0; col < 3; ++col) std::cout << (row || col ? ' ' : '\t') << r(row, col);
      }
      std::cout << '\n';
    } catch (const std::exception& e) {
      ++failures;
      log("skipping " + in.string() + ": " + e.what());
    }
  }
  ctx.meta.seed = a.seed;
  ctx.meta.precision = precision_name(model.config().precision);
  ctx.meta.knn_mode = knn_mode_name(model.config().knn_mode);
  ctx.meta.config = {{"checkpoint", a.checkpoint.string()},
                     {"inputs", std::to_string(a.inputs.size())},
                     {"written", std::to_string(written)},
                     {"points", std::to_string(a.points)}};
  ctx.meta.write(a.out / "run_metadata.json");
  if (failures) {
    log(std::to_string(failures) + " of " + std::to_string(a.inputs.size()) + " inputs failed");
    return kData;
  }
  return kOk;
}

// --------------------------------------------------------------- knn-audit

struct AuditArgs {
  fs::path data;
  std::vector<fs::path> inputs;
  fs::path out;
  fs::path per_cloud;
  std::string knn_mode = "adaptive";
  AuditOptions opts;
};

int cmd_knn_audit(const AuditArgs& a, Context& ctx) {
  Dataset data;
  if (!a.data.empty()) data = load_corpus(a.data);
  for (const auto& in : a.inputs) {
    PointCloud pc = center(load_cloud(in));
    pc.class_id = pc.instance_id;
    data.clouds.push_back(std::move(pc));
  }
  if (data.clouds.empty()) throw UsageError("knn-audit needs --data or input files");
  AuditOptions opts = a.opts;
  opts.frozen = a.knn_mode == "frozen";
  const AuditTable table = audit_dataset(data, opts);
  auto emit = [&](std::ostream& o) {
    o << "# k: " << opts.k << "\n# points: " << opts.points << "\n# edges: " << table.edges
      << "\n# trials: " << opts.trials << "\n# seed: " << opts.seed << "\n# knn_mode: " << a.knn_mode
      << "\n# code_version: " << ctx.meta.code_version << '\n';
    write_audit_table(o, table);
  };
  if (a.out.empty()) {
    emit(std::cout);
  } else {
    write_file(a.out, emit);
  }
  if (!a.per_cloud.empty()) write_file(a.per_cloud, [&](std::ostream& o) { write_audit_clouds(o, table); });
  return kOk;
}

// --------------------------------------------------------------- selfcheck

int cmd_selfcheck(const selfcheck::Options& opts) {
  const auto checks = selfcheck::run_all(opts);
  selfcheck::print_table(std::cout, checks);
  const bool ok = std::all_of(checks.begin(), checks.end(), [](const auto& c) { return c.passed; });
  std::cout << (ok ? "all checks passed\n" : "some checks FAILED\n");
  return ok ? kOk : kSelfcheck;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Characteristic orientation prediction for point clouds"};
  app.require_subcommand(1);
  app.set_version_flag("--version", code_version());
  Context ctx{RunMetadata::from_args(argc, argv)};

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate the synthetic corpus and its manifest");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--classes", gen.classes, "Number of shape classes")->capture_default_str();
  gen_cmd->add_option("--instances", gen.instances, "Instances per class")->capture_default_str();
  gen_cmd->add_option("--n", gen.points, "Points per cloud")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed)->capture_default_str();
  gen_cmd->add_option("--format", gen.format)->check(CLI::IsMember({"binary", "xyz"}))->capture_default_str();
  gen_cmd->add_flag("--force", gen.force, "Write into a non-empty directory");

  TrainArgs tr;
  std::vector<std::pair<std::string, CLI::Option*>> train_flags;
  auto* train_cmd = app.add_subcommand("train", "Train a predictor on a corpus manifest");
  train_cmd->add_option("--data", tr.data, "Corpus manifest.csv")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--out", tr.out, "Output directory")->required();
  train_cmd->add_option("--config", tr.config, "key = value config file")->check(CLI::ExistingFile);
  train_cmd->add_flag("--no-residual", tr.no_residual, "Train h alone");
  train_cmd->add_flag("--force", tr.force, "Write into a non-empty directory");
  {
    const std::map<std::string, std::string> aliases{{"points", "--n"}, {"eval_rotations", "--K"}};
    for (const auto& [key, value] : config_entries(TrainConfig{})) {
      std::string name = "--" + key;
      std::replace(name.begin(), name.end(), '_', '-');
      if (auto it = aliases.find(key); it != aliases.end()) name += "," + it->second;
      CLI::Option* opt = train_cmd->add_option(name)->description("Config key " + key + " (default " + value + ")");
      if (key == "precision") opt->check(CLI::IsMember(kPrecisions));
      if (key == "knn_mode") opt->check(CLI::IsMember(kKnnModes));
      if (key == "mode") opt->check(CLI::IsMember(kPairModes));
      train_flags.emplace_back(key, opt);
    }
  }

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate stability and consistency");
  eval_cmd->add_option("--checkpoint", ev.checkpoint)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", ev.data, "Corpus manifest.csv")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--out", ev.out, "Output directory for report.csv and report.json")->required();
  eval_cmd->add_option("--K", ev.rotations, "Rotations per instance")->capture_default_str();
  eval_cmd->add_option("--seed", ev.seed)->capture_default_str();
  eval_cmd->add_option("--knn-mode", ev.knn_mode, "Override the checkpoint's kNN mode")->check(CLI::IsMember(kKnnModes));
  eval_cmd->add_option("--precision", ev.precision, "Override the checkpoint's kNN precision")
      ->check(CLI::IsMember(kPrecisions));
  eval_cmd->add_option("--perturb", ev.perturb, "none, gaussian:SIGMA or resample:N")->capture_default_str();
  eval_cmd->add_option("--n", ev.points, "Resample clouds to this size (0 keeps them)")->capture_default_str();
  eval_cmd->add_option("--split", ev.split)->check(CLI::IsMember({"validation", "all"}))->capture_default_str();
  eval_cmd->add_option("--val-fraction", ev.val_fraction)->capture_default_str();
  eval_cmd->add_flag("--rotated-consistency", ev.rotated_consistency, "Use f(P R) R^T for consistency");
  eval_cmd->add_flag("--force", ev.force, "Write into a non-empty directory");

  CanonArgs ca;
  auto* canon_cmd = app.add_subcommand("canonicalize", "Rotate clouds into the predicted canonical frame");
  canon_cmd->add_option("inputs", ca.inputs, "Cloud files (.xyz, .txt, .cpts, .bin)")->required();
  canon_cmd->add_option("--checkpoint", ca.checkpoint, "Trained checkpoint (untrained weights if omitted)")
      ->check(CLI::ExistingFile);
  canon_cmd->add_option("--out", ca.out, "Output directory")->required();
  canon_cmd->add_option("--n", ca.points, "Resample to this size first (0 keeps it)")->capture_default_str();
  canon_cmd->add_option("--seed", ca.seed)->capture_default_str();
  canon_cmd->add_option("--knn-mode", ca.knn_mode)->check(CLI::IsMember(kKnnModes));
  canon_cmd->add_flag("--force", ca.force, "Write into a non-empty directory");

  AuditArgs au;
  auto* audit_cmd = app.add_subcommand("knn-audit", "Count kNN edges that change under rotation");
  audit_cmd->add_option("--data", au.data, "Corpus manifest.csv")->check(CLI::ExistingFile);
  audit_cmd->add_option("inputs", au.inputs, "Cloud files");
  audit_cmd->add_option("--k", au.opts.k)->capture_default_str();
  audit_cmd->add_option("--n", au.opts.points)->capture_default_str();
  audit_cmd->add_option("--trials", au.opts.trials)->capture_default_str();
  audit_cmd->add_option("--seed", au.opts.seed)->capture_default_str();
  audit_cmd->add_option("--knn-mode", au.knn_mode)->check(CLI::IsMember(kKnnModes))->capture_default_str();
  audit_cmd->add_option("--out", au.out, "Table file (stdout if omitted)");
  audit_cmd->add_option("--per-cloud", au.per_cloud, "Per-cloud breakdown file");

  selfcheck::Options sc;
  auto* self_cmd = app.add_subcommand("selfcheck", "Run the equivariance, gradient and oracle diagnostics");
  self_cmd->add_option("--seed", sc.seed)->capture_default_str();
  self_cmd->add_option("--trials", sc.trials, "Cloud/rotation trials")->capture_default_str();
  self_cmd->add_option("--n", sc.points, "Cloud size")->capture_default_str();
  self_cmd->add_option("--gradcheck-draws", sc.gradcheck_points)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen, ctx);
    if (*train_cmd) return cmd_train(tr, train_flags, ctx);
    if (*eval_cmd) return cmd_eval(ev, ctx);
    if (*canon_cmd) return cmd_canonicalize(ca, ctx);
    if (*audit_cmd) return cmd_knn_audit(au, ctx);
    if (*self_cmd) return cmd_selfcheck(sc);
  } catch (const UsageError& e) {
    log(std::string("usage: ") + e.what());
    return kUsage;
  } catch (const NumericalError& e) {
    log(std::string("numerical failure: ") + e.what());
    return kNumerical;
  } catch (const DataError& e) {
    log(std::string("data error: ") + e.what());
    return kData;
  } catch (const ShapeError& e) {
    log(std::string("data error: ") + e.what());
    return kData;
  } catch (const std::invalid_argument& e) {
    log(std::string("usage: ") + e.what());
    return kUsage;
  } catch (const std::exception& e) {
    log(std::string("error: ") + e.what());
    return kData;
  }
  return kUsage;
}

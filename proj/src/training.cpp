#include "choir/training.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "choir/ops.hpp"
#include "choir/parallel.hpp"

namespace choir {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_as(const std::string& key, const std::string& text) {
  T value{};
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw std::invalid_argument("bad value \"" + text + "\" for " + key);
  }
  return value;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw std::invalid_argument("bad value \"" + text + "\" for " + key + " (expected true or false)");
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(parse_as<std::size_t>(key, trim(item)));
  if (out.empty()) throw std::invalid_argument("empty list for " + key);
  return out;
}

std::string num(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

Dtype parse_precision(const std::string& text) {
  if (text == "single") return Dtype::f32;
  if (text == "double") return Dtype::f64;
  throw std::invalid_argument("unknown precision \"" + text + "\" (expected single or double)");
}

vnn::Aggregation parse_aggregation(const std::string& text) {
  if (text == "mean") return vnn::Aggregation::mean;
  if (text == "max") return vnn::Aggregation::max;
  throw std::invalid_argument("unknown aggregation \"" + text + "\" (expected mean or max)");
}

PointCloud to_size(const PointCloud& pc, std::size_t n, std::mt19937_64& rng) {
  if (pc.size() == n) return pc;
  return center(resample(pc, n, rng));
}

}  // namespace

std::string pair_mode_name(PairMode mode) {
  switch (mode) {
    case PairMode::cross_instance:
      return "cross-instance";
    case PairMode::same_instance:
      return "same-instance";
    case PairMode::mixed:
      return "mixed";
  }
  return "cross-instance";
}

PairMode parse_pair_mode(const std::string& text) {
  if (text == "cross-instance") return PairMode::cross_instance;
  if (text == "same-instance") return PairMode::same_instance;
  if (text == "mixed") return PairMode::mixed;
  throw std::invalid_argument("unknown pair mode \"" + text + "\" (expected cross-instance, same-instance or mixed)");
}

std::map<std::string, std::string> config_entries(const TrainConfig& cfg) {
  const auto& m = cfg.model;
  std::string widths;
  for (std::size_t i = 0; i < m.hypothesizer.widths.size(); ++i) {
    if (i) widths += ',';
    widths += std::to_string(m.hypothesizer.widths[i]);
  }
  return {
      {"mode", pair_mode_name(cfg.mode)},
      {"patch_removal", cfg.augment.patch_removal ? "true" : "false"},
      {"patch_size", std::to_string(cfg.augment.patch_size)},
      {"resample", cfg.augment.resample ? "true" : "false"},
      {"cross_probability", num(cfg.cross_probability)},
      {"learning_rate", num(cfg.adam.learning_rate)},
      {"beta1", num(cfg.adam.beta1)},
      {"beta2", num(cfg.adam.beta2)},
      {"epsilon", num(cfg.adam.epsilon)},
      {"epochs", std::to_string(cfg.epochs)},
      {"batch_size", std::to_string(cfg.batch_size)},
      {"steps_per_epoch", std::to_string(cfg.steps_per_epoch)},
      {"eval_interval", std::to_string(cfg.eval_interval)},
      {"points", std::to_string(cfg.points)},
      {"val_fraction", num(cfg.val_fraction)},
      {"eval_rotations", std::to_string(cfg.validation.rotations)},
      {"eval_points", std::to_string(cfg.validation.points)},
      {"eval_seed", std::to_string(cfg.validation.seed)},
      {"knn_mode", knn_mode_name(m.knn_mode)},
      {"precision", m.precision == Dtype::f32 ? "single" : "double"},
      {"use_residual", m.use_residual ? "true" : "false"},
      {"aggregation", m.hypothesizer.aggregation == vnn::Aggregation::max ? "max" : "mean"},
      {"widths", widths},
      {"channels", std::to_string(m.hypothesizer.channels)},
      {"k", std::to_string(m.hypothesizer.k)},
      {"residual_hidden", std::to_string(m.residual.hidden)},
      {"residual_blocks", std::to_string(m.residual.blocks)},
      {"residual_k", std::to_string(m.residual.k)},
      {"position_hidden", std::to_string(m.residual.position_hidden)},
      {"seed", std::to_string(cfg.seed)},
      {"threads", std::to_string(cfg.threads)},
  };
}

void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
  auto& m = cfg.model;
  auto size = [&] { return parse_as<std::size_t>(key, value); };
  auto real = [&] { return parse_as<double>(key, value); };
  if (key == "mode") cfg.mode = parse_pair_mode(value);
  else if (key == "patch_removal") cfg.augment.patch_removal = parse_bool(key, value);
  else if (key == "patch_size") cfg.augment.patch_size = size();
  else if (key == "resample") cfg.augment.resample = parse_bool(key, value);
  else if (key == "cross_probability") cfg.cross_probability = real();
  else if (key == "learning_rate") cfg.adam.learning_rate = real();
  else if (key == "beta1") cfg.adam.beta1 = real();
  else if (key == "beta2") cfg.adam.beta2 = real();
  else if (key == "epsilon") cfg.adam.epsilon = real();
  else if (key == "epochs") cfg.epochs = size();
  else if (key == "batch_size") cfg.batch_size = size();
  else if (key == "steps_per_epoch") cfg.steps_per_epoch = size();
  else if (key == "eval_interval") cfg.eval_interval = size();
  else if (key == "points") cfg.points = size();
  else if (key == "val_fraction") cfg.val_fraction = real();
  else if (key == "eval_rotations") cfg.validation.rotations = size();
  else if (key == "eval_points") cfg.validation.points = size();
  else if (key == "eval_seed") cfg.validation.seed = parse_as<std::uint64_t>(key, value);
  else if (key == "knn_mode") m.knn_mode = parse_knn_mode(value);
  else if (key == "precision") m.precision = parse_precision(value);
  else if (key == "use_residual") m.use_residual = parse_bool(key, value);
  else if (key == "aggregation") m.hypothesizer.aggregation = parse_aggregation(value);
  else if (key == "widths") m.hypothesizer.widths = parse_list(key, value);
  else if (key == "channels") m.hypothesizer.channels = size();
  else if (key == "k") m.hypothesizer.k = size();
  else if (key == "residual_hidden") m.residual.hidden = size();
  else if (key == "residual_blocks") m.residual.blocks = size();
  else if (key == "residual_k") m.residual.k = size();
  else if (key == "position_hidden") m.residual.position_hidden = size();
  else if (key == "seed") cfg.seed = parse_as<std::uint64_t>(key, value);
  else if (key == "threads") cfg.threads = size();
  else throw std::invalid_argument("unknown config key \"" + key + "\"");
}

std::map<std::string, std::string> read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config " + path.string());
  std::map<std::string, std::string> out;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw DataError(path.string() + ": line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw DataError(path.string() + ": line " + std::to_string(lineno) + ": empty key");
    TrainConfig probe;
    try {
      set_config_value(probe, key, trim(line.substr(eq + 1)));
    } catch (const std::invalid_argument& e) {
      throw DataError(path.string() + ": line " + std::to_string(lineno) + ": " + e.what());
    }
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

void apply_config(TrainConfig& cfg, const std::map<std::string, std::string>& entries) {
  for (const auto& [key, value] : entries) set_config_value(cfg, key, value);
}

void write_config(std::ostream& out, const TrainConfig& cfg) {
  for (const auto& [key, value] : config_entries(cfg)) out << key << " = " << value << '\n';
}

TrainingPair sample_pair(const Dataset& data, const TrainConfig& cfg, std::mt19937_64& rng) {
  const auto classes = data.class_ids();
  if (classes.empty()) throw DataError("cannot sample a pair from an empty dataset");
  const auto& class_id = classes[std::uniform_int_distribution<std::size_t>(0, classes.size() - 1)(rng)];
  const auto idx = data.indices_of(class_id);

  bool cross = cfg.mode == PairMode::cross_instance;
  if (cfg.mode == PairMode::mixed) cross = std::bernoulli_distribution(cfg.cross_probability)(rng);

  TrainingPair pair;
  if (cross) {
    if (idx.size() < 2) throw DataError("class " + class_id + " has a single instance; cannot form a cross-instance pair");
    std::uniform_int_distribution<std::size_t> pick(0, idx.size() - 1);
    const std::size_t a = pick(rng);
    std::size_t b = pick(rng);
    while (b == a) b = pick(rng);
    pair.source1 = to_size(data.clouds[idx[a]], cfg.points, rng);
    pair.source2 = to_size(data.clouds[idx[b]], cfg.points, rng);
  } else {
    PointCloud base = data.clouds[idx[std::uniform_int_distribution<std::size_t>(0, idx.size() - 1)(rng)]];
    if (!cfg.augment.resample) base = to_size(base, cfg.points, rng);
    auto augment = [&] {
      PointCloud c = base;
      if (cfg.augment.patch_removal) c = knn_patch_removal(c, cfg.augment.patch_size, rng);
      if (cfg.augment.resample) c = center(resample(c, cfg.points, rng));
      return c;
    };
    pair.source1 = augment();
    pair.source2 = augment();
  }
  pair.r1 = so3::sample_uniform(rng);
  pair.r2 = so3::sample_uniform(rng);
  pair.p1 = apply_rotation(pair.source1, pair.r1, cfg.model.precision);
  pair.p2 = apply_rotation(pair.source2, pair.r2, cfg.model.precision);
  return pair;
}

Tensor pair_loss(const Tensor& f1, const Tensor& f2, const Tensor& r1, const Tensor& r2) {
  const Tensor diff = ops::sub(ops::matmul(ops::transpose(f1), f2), ops::matmul(ops::transpose(r1), r2));
  return ops::sum_all(ops::mul(diff, diff));
}

bool HistoryRow::evaluated() const { return std::isfinite(val_stability_deg) && std::isfinite(val_consistency_deg); }

std::size_t select_checkpoint(const History& history) {
  const HistoryRow* best = nullptr;
  for (const auto& row : history) {
    if (!row.evaluated()) continue;
    const double sum = row.val_stability_deg + row.val_consistency_deg;
    if (!best || sum < best->val_stability_deg + best->val_consistency_deg) best = &row;
  }
  if (!best) throw std::invalid_argument("no evaluated checkpoint to select from");
  return best->epoch;
}

void write_history(std::ostream& out, const History& history) {
  auto cell = [](double v) { return std::isfinite(v) ? num(v) : std::string(); };
  out << "epoch,loss,val_stability_deg,val_consistency_deg,selected_flag\n";
  for (const auto& row : history) {
    out << row.epoch << ',' << num(row.loss) << ',' << cell(row.val_stability_deg) << ','
        << cell(row.val_consistency_deg) << ',' << (row.selected ? 1 : 0) << '\n';
  }
}

History read_history(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || trim(line) != "epoch,loss,val_stability_deg,val_consistency_deg,selected_flag") {
    throw DataError("history: unexpected header");
  }
  History out;
  for (std::size_t lineno = 2; std::getline(in, line); ++lineno) {
    if (trim(line).empty()) continue;
    std::vector<std::string> cells;
    std::stringstream row(trim(line));
    std::string c;
    while (std::getline(row, c, ',')) cells.push_back(c);
    if (cells.size() == 4) cells.emplace_back();
    if (cells.size() != 5) throw DataError("history: line " + std::to_string(lineno) + ": expected 5 fields");
    try {
      HistoryRow r;
      r.epoch = parse_as<std::size_t>("epoch", cells[0]);
      r.loss = parse_as<double>("loss", cells[1]);
      if (!cells[2].empty()) r.val_stability_deg = parse_as<double>("val_stability_deg", cells[2]);
      if (!cells[3].empty()) r.val_consistency_deg = parse_as<double>("val_consistency_deg", cells[3]);
      r.selected = parse_bool("selected_flag", cells[4]);
      out.push_back(r);
    } catch (const std::invalid_argument& e) {
      throw DataError("history: line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

TrainingDiverged::TrainingDiverged(std::size_t epoch_, std::uint64_t batch_seed_, std::vector<std::string> pairs_)
    : NumericalError([&] {
        std::string msg = "non-finite loss at epoch " + std::to_string(epoch_) + ", batch seed " +
                          std::to_string(batch_seed_) + ", pairs";
        for (const auto& p : pairs_) msg += " " + p;
        return msg;
      }()),
      epoch(epoch_),
      batch_seed(batch_seed_),
      pairs(std::move(pairs_)) {}

TrainResult train(const Dataset& data, const TrainConfig& cfg, const ProgressFn& progress) {
  auto [train_set, val_set] = split_by_instance(data, cfg.val_fraction);
  return train(train_set, val_set, cfg, progress);
}

TrainResult train(const Dataset& train_set, const Dataset& val_set, const TrainConfig& cfg,
                  const ProgressFn& progress) {
  if (cfg.batch_size == 0 || cfg.steps_per_epoch == 0 || cfg.epochs == 0) {
    throw std::invalid_argument("epochs, batch_size and steps_per_epoch must be positive");
  }
  if (cfg.eval_interval == 0) throw std::invalid_argument("eval_interval must be positive");
  if (train_set.clouds.empty()) throw DataError("training set is empty");
  if (val_set.clouds.empty()) throw DataError("validation set is empty");

  std::mt19937_64 init_rng(derive_seed(cfg.seed, 0));
  CharacteristicOrientationPredictor model(cfg.model, init_rng);
  std::vector<Tensor> params;
  for (auto& p : model.parameters()) params.push_back(p.value);
  Adam adam(params, cfg.adam);

  EvalConfig val_cfg = cfg.validation;
  if (val_cfg.points == 0) val_cfg.points = cfg.points;
  if (val_cfg.threads == 0) val_cfg.threads = cfg.threads;
  const std::size_t threads = thread_budget(cfg.threads);

  TrainResult result;
  double best_sum = std::numeric_limits<double>::infinity();
  const double inv_batch = 1.0 / static_cast<double>(cfg.batch_size);

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (std::size_t step = 0; step < cfg.steps_per_epoch; ++step) {
      const std::uint64_t batch_seed = derive_seed(cfg.seed, 1, epoch, step);
      std::vector<double> losses(cfg.batch_size);
      std::vector<std::string> ids(cfg.batch_size);
      std::vector<std::vector<std::vector<double>>> grads(cfg.batch_size);

      parallel_for(cfg.batch_size, threads, [&](std::size_t b) {
        std::mt19937_64 rng(derive_seed(batch_seed, b));
        const TrainingPair pair = sample_pair(train_set, cfg, rng);
        ids[b] = pair.source1.instance_id + "/" + pair.source2.instance_id;
        const auto local = model.clone();
        Tape tape;
        TapeScope scope(tape);
        Tensor loss;
        try {
          Prediction a, c;
          if (cfg.model.knn_mode == KnnMode::frozen) {
            const KnnGraph g1 = local.encoder_graph(pair.source1);
            const KnnGraph g2 = local.encoder_graph(pair.source2);
            a = local.forward(to_tensor(pair.p1), &g1);
            c = local.forward(to_tensor(pair.p2), &g2);
          } else {
            a = local.forward(to_tensor(pair.p1));
            c = local.forward(to_tensor(pair.p2));
          }
          loss = pair_loss(a.orientation, c.orientation, so3::to_tensor(pair.r1), so3::to_tensor(pair.r2));
        } catch (const NumericalError&) {
          losses[b] = std::numeric_limits<double>::quiet_NaN();
          return;
        }
        losses[b] = loss.item();
        if (!std::isfinite(losses[b])) return;
        tape.backward(ops::scale(loss, inv_batch));
        for (auto& p : local.parameters()) {
          auto g = p.value.grad();
          grads[b].emplace_back(g.begin(), g.end());
        }
      });

      for (std::size_t b = 0; b < cfg.batch_size; ++b) {
        if (!std::isfinite(losses[b])) throw TrainingDiverged(epoch, batch_seed, ids);
      }
      for (std::size_t b = 0; b < cfg.batch_size; ++b) {
        for (std::size_t p = 0; p < params.size(); ++p) {
          auto dst = params[p].mutable_grad();
          const auto& src = grads[b][p];
          if (src.empty()) continue;
          for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
        }
        epoch_loss += losses[b];
      }
      adam.step();
      adam.zero_grad();
    }

    HistoryRow row;
    row.epoch = epoch;
    row.loss = epoch_loss / static_cast<double>(cfg.batch_size * cfg.steps_per_epoch);
    if (epoch % cfg.eval_interval == 0 || epoch == cfg.epochs) {
      const EvalReport report = evaluate(val_set, model, val_cfg);
      row.val_stability_deg = report.mean_stability();
      row.val_consistency_deg = report.mean_consistency();
      const double sum = row.val_stability_deg + row.val_consistency_deg;
      if (sum < best_sum) {
        best_sum = sum;
        result.model = model.clone();
        result.selected_epoch = epoch;
      }
    }
    result.history.push_back(row);
    if (progress) progress(row);
  }
  if (result.selected_epoch == 0) {
    result.model = model.clone();
    result.selected_epoch = cfg.epochs;
  }
  for (auto& row : result.history) row.selected = row.epoch == result.selected_epoch;
  return result;
}

}  // namespace choir

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <limits>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "choir/corpus.hpp"
#include "choir/error.hpp"
#include "choir/metrics.hpp"
#include "choir/optim.hpp"
#include "choir/residual.hpp"

namespace choir {

enum class PairMode { cross_instance, same_instance, mixed };

std::string pair_mode_name(PairMode mode);
PairMode parse_pair_mode(const std::string& text);

struct AugmentConfig {
  bool patch_removal = true;
  std::size_t patch_size = 64;
  bool resample = true;
};

struct TrainConfig {
  PairMode mode = PairMode::cross_instance;
  AugmentConfig augment;
  double cross_probability = 0.5;  // mixed mode
  AdamConfig adam;
  std::size_t epochs = 300;
  std::size_t batch_size = 8;       // pairs per optimizer step
  std::size_t steps_per_epoch = 1;
  std::size_t eval_interval = 10;   // epochs between validation runs
  std::size_t points = 1024;        // points per training cloud
  double val_fraction = 0.2;
  EvalConfig validation;            // K, points and threads for validation runs
  PredictorConfig model;
  std::uint64_t seed = 0;
  std::size_t threads = 0;          // 0 uses thread_budget()
};

// Flat key = value view of every TrainConfig field, and its inverse.
std::map<std::string, std::string> config_entries(const TrainConfig& cfg);
void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value);

// Reads "key = value" lines; '#' starts a comment. Unknown keys and bad
// values throw DataError naming the line.
std::map<std::string, std::string> read_config_file(const std::filesystem::path& path);
void apply_config(TrainConfig& cfg, const std::map<std::string, std::string>& entries);
void write_config(std::ostream& out, const TrainConfig& cfg);

struct TrainingPair {
  PointCloud source1, source2;  // aligned, augmented clouds
  PointCloud p1, p2;            // source * r
  Rotation r1, r2;
};

// Draws a pair from the training clouds in `data` (all of them).
TrainingPair sample_pair(const Dataset& data, const TrainConfig& cfg, std::mt19937_64& rng);

// ||f1^T f2 - r1^T r2||_F^2 on [3, 3] tensors.
Tensor pair_loss(const Tensor& f1, const Tensor& f2, const Tensor& r1, const Tensor& r2);

struct HistoryRow {
  std::size_t epoch = 0;
  double loss = 0.0;
  double val_stability_deg = std::numeric_limits<double>::quiet_NaN();    // NaN when not evaluated
  double val_consistency_deg = std::numeric_limits<double>::quiet_NaN();
  bool selected = false;

  bool evaluated() const;
};

using History = std::vector<HistoryRow>;

// Epoch of the evaluated row with the least stability + consistency; the
// earliest wins ties.
std::size_t select_checkpoint(const History& history);

void write_history(std::ostream& out, const History& history);
History read_history(std::istream& in);

class TrainingDiverged : public NumericalError {
 public:
  TrainingDiverged(std::size_t epoch, std::uint64_t batch_seed, std::vector<std::string> pairs);
  std::size_t epoch;
  std::uint64_t batch_seed;
  std::vector<std::string> pairs;
};

struct TrainResult {
  CharacteristicOrientationPredictor model;  // the selected checkpoint
  History history;
  std::size_t selected_epoch = 0;
};

using ProgressFn = std::function<void(const HistoryRow&)>;

// Splits `data` by instance and trains on the training part.
TrainResult train(const Dataset& data, const TrainConfig& cfg, const ProgressFn& progress = {});
TrainResult train(const Dataset& train_set, const Dataset& val_set, const TrainConfig& cfg,
                  const ProgressFn& progress = {});

}  // namespace choir

#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "choir/corpus.hpp"
#include "choir/pointcloud.hpp"
#include "choir/residual.hpp"
#include "choir/so3.hpp"

namespace choir {

struct Perturbation {
  enum class Kind { none, resample, gaussian };
  Kind kind = Kind::none;
  double magnitude = 0.0;  // point count for resample, sigma for gaussian

  PointCloud apply(const PointCloud& pc, std::mt19937_64& rng) const;
  std::string str() const;
};

// "none", "resample:512", "gaussian:0.01".
Perturbation parse_perturbation(const std::string& text);

struct EvalConfig {
  std::size_t rotations = 10;  // K
  std::uint64_t seed = 0;
  std::optional<KnnMode> knn_mode;  // overrides the model's mode when set
  Perturbation perturbation;
  std::size_t points = 0;            // resample every cloud to this size first; 0 keeps it
  bool rotated_consistency = false;  // f(P R) R^T instead of f(P)
  std::size_t threads = 1;
};

struct MetricValue {
  double degrees = 0.0;
  bool degenerate_mean = false;
};

// Root mean squared angle, in degrees, between each rotation and their
// chordal mean.
MetricValue angular_spread(std::span<const Rotation> rotations);

// Spread of the net rotations R_i f(P R_i)^T over K random R_i.
MetricValue stability(const PointCloud& pc, const CharacteristicOrientationPredictor& model, const EvalConfig& cfg,
                      std::mt19937_64& rng);

// Spread of f(P_j) over the instances of one class.
MetricValue consistency(std::span<const PointCloud> instances, const CharacteristicOrientationPredictor& model,
                        const EvalConfig& cfg, std::mt19937_64& rng);

struct InstanceResult {
  std::string instance_id;
  double stability_deg = 0.0;
};

struct ClassResult {
  std::string class_id;
  double mean_stability_deg = 0.0;
  double consistency_deg = 0.0;
  bool degenerate_mean = false;
  std::vector<InstanceResult> instances;
};

struct EvalReport {
  std::vector<ClassResult> classes;
  std::vector<std::string> warnings;
  std::map<std::string, std::string> metadata;

  double mean_stability() const;
  double mean_consistency() const;
  const ClassResult* find(const std::string& class_id) const;
};

EvalReport evaluate(const Dataset& data, const CharacteristicOrientationPredictor& model, const EvalConfig& cfg);

void write_report_csv(std::ostream& out, const EvalReport& report);
void write_report_json(std::ostream& out, const EvalReport& report);
EvalReport read_report_json(std::istream& in);

}  // namespace choir

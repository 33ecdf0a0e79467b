#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "choir/pointcloud.hpp"

namespace choir {

// Surface primitive. For cylinders extent = (radius, half length, unused) and
// axis selects the coordinate axis of the cylinder.
struct Part {
  enum class Kind { box, cylinder };
  Kind kind = Kind::box;
  Vec3 center{};
  Vec3 extent{};
  int axis = 2;

  double area() const;
};

// Passing an rng jitters scale, aspect and part offsets; nullptr gives the
// family template.
struct ShapeFamily {
  std::string name;
  std::function<std::vector<Part>(std::mt19937_64*)> parts;
};

std::vector<ShapeFamily> builtin_families();
// A mug whose handle is symmetric under a half turn; used to exercise the
// symmetry rejection.
ShapeFamily symmetric_mug_family();

// Area-weighted uniform surface samples of the union of parts.
PointCloud sample_parts(const std::vector<Part>& parts, std::size_t n, std::mt19937_64& rng);

inline constexpr double kSymmetryChamferThreshold = 1e-3;

struct SymmetryReport {
  bool symmetric = false;
  double min_chamfer = 0.0;
  Rotation worst;  // the candidate achieving min_chamfer
};

// Tests the family template against the 23 nontrivial cube rotations and the
// 2-, 3-, 4-, 5- and 6-fold turns about its principal and coordinate axes.
SymmetryReport symmetry_check(const ShapeFamily& family, std::size_t template_points = 2048,
                              std::uint64_t seed = 7);

struct SyntheticCorpus {
  std::vector<ShapeFamily> classes;
  std::size_t instances_per_class = 64;
  std::size_t points = 1024;
  std::uint64_t seed = 0;
};

// The first `num_classes` built-in families.
SyntheticCorpus default_corpus_spec(std::size_t num_classes = 3, std::size_t instances = 64,
                                    std::size_t points = 1024, std::uint64_t seed = 0);

struct Dataset {
  std::vector<PointCloud> clouds;

  std::vector<std::string> class_ids() const;  // in first-appearance order
  std::vector<std::size_t> indices_of(const std::string& class_id) const;
};

// Throws DataError when a family fails the symmetry check.
Dataset generate_synthetic_corpus(const SyntheticCorpus& spec);

// Holds out the last ceil(fraction * n) instances of every class.
std::pair<Dataset, Dataset> split_by_instance(const Dataset& data, double val_fraction);

// Writes one file per cloud plus manifest.csv into dir.
std::filesystem::path save_corpus(const Dataset& data, const std::filesystem::path& dir, CloudFormat format);
Dataset load_corpus(const std::filesystem::path& manifest);

}  // namespace choir

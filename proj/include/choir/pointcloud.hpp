#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

#include "choir/so3.hpp"
#include "choir/tensor.hpp"

namespace choir {

// N x 3 coordinates. Operations return new clouds and never mutate inputs.
struct PointCloud {
  std::vector<Vec3> points;
  std::string instance_id;
  std::string class_id;

  std::size_t size() const { return points.size(); }
};

Vec3 centroid(const PointCloud& pc);
PointCloud center(const PointCloud& pc);

// n points chosen uniformly; with replacement only when n exceeds the size.
PointCloud resample(const PointCloud& pc, std::size_t n, std::mt19937_64& rng);

// Drops a random seed point together with its patch_size - 1 nearest
// neighbours, then re-centers.
PointCloud knn_patch_removal(const PointCloud& pc, std::size_t patch_size, std::mt19937_64& rng);

// Adds i.i.d. N(0, sigma^2) to every coordinate, then re-centers.
PointCloud gaussian_noise(const PointCloud& pc, double sigma, std::mt19937_64& rng);

// points <- points * r (row vectors). With Dtype::f32 the inputs and every
// product are rounded to single precision, emulating float32 storage.
PointCloud apply_rotation(const PointCloud& pc, const Rotation& r, Dtype precision = Dtype::f64);

// [N, 3] tensor view of the coordinates (copy).
Tensor to_tensor(const PointCloud& pc);
PointCloud from_tensor(const Tensor& t);

// Max over points of the Euclidean distance between corresponding rows.
double max_point_distance(const PointCloud& a, const PointCloud& b);

// Symmetric mean squared nearest-neighbour distance.
double chamfer_distance(const PointCloud& a, const PointCloud& b);

// ---- file formats ----

enum class CloudFormat { xyz_text, choir_binary };

inline constexpr char kCloudMagic[] = "CHOIRPTS";
inline constexpr std::uint32_t kCloudVersion = 1;

// ".xyz" and ".txt" are text; ".cpts" and ".bin" are binary.
CloudFormat format_from_path(const std::filesystem::path& path);
std::string format_name(CloudFormat format);

// Text: one "x y z" point per line, '#' comment lines and blank lines ignored.
// Errors cite the 1-based line number. Loaded clouds are not centered.
PointCloud read_xyz(std::istream& in);
void write_xyz(std::ostream& out, const PointCloud& pc);
PointCloud read_cloud_binary(std::istream& in);
void write_cloud_binary(std::ostream& out, const PointCloud& pc);

PointCloud load_cloud(const std::filesystem::path& path, CloudFormat format);
PointCloud load_cloud(const std::filesystem::path& path);
void save_cloud(const std::filesystem::path& path, const PointCloud& pc, CloudFormat format);

// ---- corpus manifest ----

struct ManifestRecord {
  std::string path;  // relative to the manifest's directory unless absolute
  std::string class_id;
  std::string instance_id;
};

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records);

}  // namespace choir

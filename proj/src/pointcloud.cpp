#include "choir/pointcloud.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "choir/binary_io.hpp"

namespace choir {

Vec3 centroid(const PointCloud& pc) {
  if (pc.points.empty()) throw std::invalid_argument("centroid of an empty cloud");
  Vec3 c{0, 0, 0};
  for (const auto& p : pc.points) {
    for (int a = 0; a < 3; ++a) c[a] += p[a];
  }
  for (auto& v : c) v /= static_cast<double>(pc.points.size());
  return c;
}

PointCloud center(const PointCloud& pc) {
  const Vec3 c = centroid(pc);
  PointCloud out = pc;
  for (auto& p : out.points) {
    for (int a = 0; a < 3; ++a) p[a] -= c[a];
  }
  return out;
}

PointCloud resample(const PointCloud& pc, std::size_t n, std::mt19937_64& rng) {
  if (n == 0) throw std::invalid_argument("resample: target size must be positive");
  if (pc.points.empty()) throw std::invalid_argument("resample: empty source cloud");
  PointCloud out;
  out.instance_id = pc.instance_id;
  out.class_id = pc.class_id;
  out.points.reserve(n);
  if (n > pc.size()) {
    std::uniform_int_distribution<std::size_t> pick(0, pc.size() - 1);
    for (std::size_t i = 0; i < n; ++i) out.points.push_back(pc.points[pick(rng)]);
  } else {
    // Partial Fisher-Yates.
    std::vector<std::size_t> order(pc.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = 0; i < n; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, order.size() - 1);
      std::swap(order[i], order[pick(rng)]);
      out.points.push_back(pc.points[order[i]]);
    }
  }
  return out;
}

PointCloud knn_patch_removal(const PointCloud& pc, std::size_t patch_size, std::mt19937_64& rng) {
  if (patch_size >= pc.size()) {
    throw std::invalid_argument("knn_patch_removal: patch size " + std::to_string(patch_size) +
                                " must be smaller than the cloud (" + std::to_string(pc.size()) + ")");
  }
  std::uniform_int_distribution<std::size_t> pick(0, pc.size() - 1);
  const std::size_t seed = pick(rng);
  const Vec3& s = pc.points[seed];
  std::vector<std::pair<double, std::size_t>> dist;
  dist.reserve(pc.size());
  for (std::size_t i = 0; i < pc.size(); ++i) {
    const auto& p = pc.points[i];
    const double dx = p[0] - s[0], dy = p[1] - s[1], dz = p[2] - s[2];
    dist.emplace_back(dx * dx + dy * dy + dz * dz, i);
  }
  std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(patch_size), dist.end());
  std::vector<bool> removed(pc.size(), false);
  for (std::size_t i = 0; i < patch_size; ++i) removed[dist[i].second] = true;
  removed[seed] = true;  // the seed is its own nearest point, even with duplicates
  PointCloud out;
  out.instance_id = pc.instance_id;
  out.class_id = pc.class_id;
  for (std::size_t i = 0; i < pc.size(); ++i) {
    if (!removed[i]) out.points.push_back(pc.points[i]);
  }
  // Duplicates of the seed can displace it from the first patch_size slots.
  while (out.points.size() > pc.size() - patch_size) out.points.pop_back();
  return center(out);
}

PointCloud gaussian_noise(const PointCloud& pc, double sigma, std::mt19937_64& rng) {
  if (!(sigma >= 0.0)) throw std::invalid_argument("gaussian_noise: sigma must be non-negative");
  if (sigma == 0.0) return pc;
  std::normal_distribution<double> noise(0.0, sigma);
  PointCloud out = pc;
  for (auto& p : out.points) {
    for (auto& v : p) v += noise(rng);
  }
  return center(out);
}

PointCloud apply_rotation(const PointCloud& pc, const Rotation& r, Dtype precision) {
  PointCloud out = pc;
  const Mat3& m = r.matrix();
  if (precision == Dtype::f64) {
    for (auto& p : out.points) {
      const Vec3 q = p;
      for (int c = 0; c < 3; ++c) p[c] = q[0] * m(0, c) + q[1] * m(1, c) + q[2] * m(2, c);
    }
  } else {
    float mf[9];
    for (std::size_t i = 0; i < 9; ++i) mf[i] = static_cast<float>(m.m[i]);
    for (auto& p : out.points) {
      const float x = static_cast<float>(p[0]), y = static_cast<float>(p[1]), z = static_cast<float>(p[2]);
      for (int c = 0; c < 3; ++c) {
        const float v = x * mf[c] + y * mf[3 + c] + z * mf[6 + c];
        p[c] = static_cast<double>(v);
      }
    }
  }
  return out;
}

Tensor to_tensor(const PointCloud& pc) {
  std::vector<double> values;
  values.reserve(pc.size() * 3);
  for (const auto& p : pc.points) values.insert(values.end(), p.begin(), p.end());
  return Tensor({pc.size(), 3}, std::move(values));
}

PointCloud from_tensor(const Tensor& t) {
  if (t.rank() != 2 || t.dim(1) != 3) throw ShapeError("expected [Nx3] points, got " + shape_str(t.shape()));
  PointCloud pc;
  const auto d = t.data();
  for (std::size_t i = 0; i < t.dim(0); ++i) pc.points.push_back({d[3 * i], d[3 * i + 1], d[3 * i + 2]});
  return pc;
}

double max_point_distance(const PointCloud& a, const PointCloud& b) {
  if (a.size() != b.size()) throw std::invalid_argument("max_point_distance: size mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double dx = a.points[i][0] - b.points[i][0];
    const double dy = a.points[i][1] - b.points[i][1];
    const double dz = a.points[i][2] - b.points[i][2];
    m = std::max(m, std::sqrt(dx * dx + dy * dy + dz * dz));
  }
  return m;
}

namespace {

double mean_nn_sq(const PointCloud& from, const PointCloud& to) {
  // Sweep outwards from the x-sorted position, stopping once the x gap alone
  // exceeds the best distance found.
  std::vector<Vec3> sorted = to.points;
  std::sort(sorted.begin(), sorted.end(), [](const Vec3& a, const Vec3& b) { return a[0] < b[0]; });
  double total = 0.0;
  for (const auto& p : from.points) {
    const auto mid = std::lower_bound(sorted.begin(), sorted.end(), p[0],
                                      [](const Vec3& q, double x) { return q[0] < x; });
    double best = INFINITY;
    const auto visit = [&](const Vec3& q) {
      const double dx = p[0] - q[0];
      if (dx * dx >= best) return false;
      const double dy = p[1] - q[1], dz = p[2] - q[2];
      best = std::min(best, dx * dx + dy * dy + dz * dz);
      return true;
    };
    for (auto it = mid; it != sorted.end() && visit(*it); ++it) {
    }
    for (auto it = mid; it != sorted.begin() && visit(*(it - 1)); --it) {
    }
    total += best;
  }
  return total / static_cast<double>(from.size());
}

}  // namespace

double chamfer_distance(const PointCloud& a, const PointCloud& b) {
  if (a.points.empty() || b.points.empty()) throw std::invalid_argument("chamfer_distance: empty cloud");
  return 0.5 * (mean_nn_sq(a, b) + mean_nn_sq(b, a));
}

// ---- file formats ----

CloudFormat format_from_path(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".xyz" || ext == ".txt") return CloudFormat::xyz_text;
  if (ext == ".cpts" || ext == ".bin") return CloudFormat::choir_binary;
  throw DataError("cannot infer point-cloud format from extension \"" + ext + "\" of " + path.string());
}

std::string format_name(CloudFormat format) {
  return format == CloudFormat::xyz_text ? "xyz-text" : "choir-binary";
}

PointCloud read_xyz(std::istream& in) {
  PointCloud pc;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::size_t start = line.find_first_not_of(" \t\r");
    if (start == std::string::npos || line[start] == '#') continue;
    Vec3 p{};
    const char* cur = line.data() + start;
    const char* end = line.data() + line.size();
    for (int a = 0; a < 3; ++a) {
      while (cur < end && (*cur == ' ' || *cur == '\t')) ++cur;
      const char* token_end = cur;
      while (token_end < end && *token_end != ' ' && *token_end != '\t' && *token_end != '\r') ++token_end;
      auto [ptr, ec] = std::from_chars(cur, token_end, p[static_cast<std::size_t>(a)]);
      if (cur == token_end || ec != std::errc() || ptr != token_end ||
          !std::isfinite(p[static_cast<std::size_t>(a)])) {
        throw DataError("xyz line " + std::to_string(line_no) + ": expected three reals, got \"" + line + "\"");
      }
      cur = token_end;
    }
    while (cur < end && (*cur == ' ' || *cur == '\t' || *cur == '\r')) ++cur;
    if (cur != end) {
      throw DataError("xyz line " + std::to_string(line_no) + ": trailing tokens in \"" + line + "\"");
    }
    pc.points.push_back(p);
  }
  if (pc.points.empty()) throw DataError("xyz input contains no points");
  return pc;
}

void write_xyz(std::ostream& out, const PointCloud& pc) {
  char buf[32];
  for (const auto& p : pc.points) {
    for (int a = 0; a < 3; ++a) {
      auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), p[static_cast<std::size_t>(a)]);
      out.write(buf, ptr - buf);
      out.put(a < 2 ? ' ' : '\n');
    }
  }
}

PointCloud read_cloud_binary(std::istream& in) {
  binary_io::expect_magic(in, kCloudMagic);
  const auto version = binary_io::get<std::uint32_t>(in, "cloud version");
  if (version != kCloudVersion) {
    throw DataError("point-cloud version " + std::to_string(version) + " unsupported");
  }
  const auto n = binary_io::get<std::uint64_t>(in, "point count");
  PointCloud pc;
  pc.points.resize(n);
  for (auto& p : pc.points) {
    for (auto& v : p) v = binary_io::get<double>(in, "coordinates");
  }
  return pc;
}

void write_cloud_binary(std::ostream& out, const PointCloud& pc) {
  out.write(kCloudMagic, sizeof(kCloudMagic) - 1);
  binary_io::put<std::uint32_t>(out, kCloudVersion);
  binary_io::put<std::uint64_t>(out, pc.size());
  for (const auto& p : pc.points) {
    for (double v : p) binary_io::put<double>(out, v);
  }
}

PointCloud load_cloud(const std::filesystem::path& path, CloudFormat format) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  PointCloud pc = format == CloudFormat::xyz_text ? read_xyz(in) : read_cloud_binary(in);
  pc.instance_id = path.stem().string();
  return pc;
}

PointCloud load_cloud(const std::filesystem::path& path) { return load_cloud(path, format_from_path(path)); }

void save_cloud(const std::filesystem::path& path, const PointCloud& pc, CloudFormat format) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  if (format == CloudFormat::xyz_text) {
    write_xyz(out, pc);
  } else {
    write_cloud_binary(out, pc);
  }
  if (!out) throw DataError("failed writing " + path.string());
}

// ---- manifest ----

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError("manifest " + path.string() + " is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "path,class_id,instance_id") {
    throw DataError("manifest " + path.string() + ": unexpected header \"" + line + "\"");
  }
  std::vector<ManifestRecord> records;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 3) {
      throw DataError("manifest line " + std::to_string(line_no) + ": expected 3 fields");
    }
    records.push_back({fields[0], fields[1], fields[2]});
  }
  return records;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out << "path,class_id,instance_id\n";
  for (const auto& r : records) {
    for (const auto* f : {&r.path, &r.class_id, &r.instance_id}) {
      if (f->find(',') != std::string::npos || f->find('\n') != std::string::npos) {
        throw DataError("manifest field contains a separator: " + *f);
      }
    }
    out << r.path << ',' << r.class_id << ',' << r.instance_id << '\n';
  }
}

}  // namespace choir

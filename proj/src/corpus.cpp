#include "choir/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <numbers>
#include <stdexcept>

namespace choir {

namespace {

constexpr double kPi = std::numbers::pi;

// Multiplies by a factor in [1 - rel, 1 + rel] when jittering.
double jit(std::mt19937_64* rng, double value, double rel) {
  if (rng == nullptr) return value;
  std::uniform_real_distribution<double> u(-rel, rel);
  return value * (1.0 + u(*rng));
}

// Adds an offset in [-abs, abs] when jittering.
double shift(std::mt19937_64* rng, double value, double abs) {
  if (rng == nullptr) return value;
  std::uniform_real_distribution<double> u(-abs, abs);
  return value + u(*rng);
}

Part box(Vec3 c, Vec3 half) { return {Part::Kind::box, c, half, 2}; }
Part cylinder(Vec3 c, double radius, double half_length, int axis) {
  return {Part::Kind::cylinder, c, {radius, half_length, 0.0}, axis};
}

std::vector<Part> airplane(std::mt19937_64* rng) {
  const double len = jit(rng, 0.85, 0.12);
  const double r = jit(rng, 0.11, 0.15);
  const double span = jit(rng, 0.75, 0.15);
  const double chord = jit(rng, 0.16, 0.15);
  const double wing_x = shift(rng, 0.12, 0.05);
  const double tail_x = -len + jit(rng, 0.12, 0.2);
  const double fin_h = jit(rng, 0.2, 0.15);
  return {
      cylinder({0, 0, 0}, r, len, 0),
      box({wing_x, 0, 0.6 * r}, {chord, span, 0.018}),
      box({tail_x, 0, r + fin_h}, {jit(rng, 0.09, 0.2), 0.015, fin_h}),
      box({tail_x, 0, shift(rng, 0.02, 0.02)}, {jit(rng, 0.07, 0.2), jit(rng, 0.28, 0.2), 0.012}),
  };
}

std::vector<Part> chair(std::mt19937_64* rng) {
  const double w = jit(rng, 0.32, 0.12);
  const double d = jit(rng, 0.30, 0.12);
  const double leg = jit(rng, 0.26, 0.15);
  const double back = jit(rng, 0.34, 0.15);
  const double t = jit(rng, 0.04, 0.2);
  std::vector<Part> parts{
      box({0, 0, 0}, {w, d, t}),
      box({-w + 0.025, 0, t + back}, {0.025, d, back}),
  };
  for (double sx : {-1.0, 1.0}) {
    for (double sy : {-1.0, 1.0}) {
      parts.push_back(box({sx * (w - 0.04), sy * (d - 0.04), -t - leg}, {0.025, 0.025, leg}));
    }
  }
  return parts;
}

std::vector<Part> bracket(std::mt19937_64* rng) {
  const double a = jit(rng, 0.55, 0.12);
  const double b = jit(rng, 0.22, 0.15);
  const double w = jit(rng, 0.25, 0.12);
  const double t = jit(rng, 0.035, 0.15);
  return {
      box({0, 0, 0}, {a, w, t}),
      box({a - t, 0, t + b}, {t, w, b}),
      cylinder({shift(rng, -0.25, 0.06), shift(rng, 0.0, 0.04), t + 0.04}, jit(rng, 0.1, 0.15), 0.04, 2),
  };
}

std::vector<Part> lamp(std::mt19937_64* rng) {
  const double pole = jit(rng, 0.35, 0.12);
  const double arm = jit(rng, 0.2, 0.15);
  return {
      cylinder({0, 0, -pole - 0.03}, jit(rng, 0.16, 0.12), 0.03, 2),
      cylinder({0, 0, 0}, 0.025, pole, 2),
      box({arm, 0, pole}, {arm, 0.03, 0.03}),
      cylinder({2 * arm, 0, pole - jit(rng, 0.12, 0.2)}, jit(rng, 0.16, 0.15), 0.12, 2),
  };
}

std::vector<Part> mug(std::mt19937_64* rng) {
  const double r = jit(rng, 0.3, 0.1);
  return {
      cylinder({0, 0, 0}, r, 0.38, 2),
      box({r + 0.08, 0, 0.22}, {0.08, 0.03, 0.03}),
      box({r + 0.08, 0, -0.22}, {0.08, 0.03, 0.03}),
      box({r + 0.16, 0, 0}, {0.03, 0.03, 0.25}),
  };
}

Vec3 sample_box(const Part& p, std::mt19937_64& rng) {
  const auto& h = p.extent;
  const double faces[3] = {h[1] * h[2], h[0] * h[2], h[0] * h[1]};  // normal along x, y, z
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double total = faces[0] + faces[1] + faces[2];
  double pick = u(rng) * total;
  int normal = 0;
  while (normal < 2 && pick > faces[normal]) pick -= faces[normal++];
  Vec3 q;
  for (int a = 0; a < 3; ++a) q[a] = (2.0 * u(rng) - 1.0) * h[a];
  q[normal] = (u(rng) < 0.5 ? -1.0 : 1.0) * h[normal];
  for (int a = 0; a < 3; ++a) q[a] += p.center[a];
  return q;
}

Vec3 sample_cylinder(const Part& p, std::mt19937_64& rng) {
  const double r = p.extent[0], hl = p.extent[1];
  const double side = 2.0 * kPi * r * 2.0 * hl;
  const double caps = 2.0 * kPi * r * r;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double theta = 2.0 * kPi * u(rng);
  double radial, along;
  if (u(rng) * (side + caps) < side) {
    radial = r;
    along = (2.0 * u(rng) - 1.0) * hl;
  } else {
    radial = r * std::sqrt(u(rng));
    along = (u(rng) < 0.5 ? -1.0 : 1.0) * hl;
  }
  const int a0 = p.axis, a1 = (p.axis + 1) % 3, a2 = (p.axis + 2) % 3;
  Vec3 q;
  q[a0] = along;
  q[a1] = radial * std::cos(theta);
  q[a2] = radial * std::sin(theta);
  for (int a = 0; a < 3; ++a) q[a] += p.center[a];
  return q;
}

std::vector<Rotation> cube_rotations() {
  std::vector<Rotation> out;
  const int perms[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
  for (const auto& perm : perms) {
    for (int signs = 0; signs < 8; ++signs) {
      Mat3 m;
      for (int r = 0; r < 3; ++r) m(r, perm[r]) = (signs >> r) & 1 ? -1.0 : 1.0;
      if (m.det() > 0 && max_abs(m - Mat3::identity()) > 0.5) out.push_back(Rotation::unchecked(m));
    }
  }
  return out;
}

SymmetryReport cached_symmetry_check(const ShapeFamily& family) {
  static std::mutex mutex;
  static std::map<std::string, SymmetryReport> cache;
  std::lock_guard<std::mutex> lock(mutex);
  auto it = cache.find(family.name);
  if (it == cache.end()) it = cache.emplace(family.name, symmetry_check(family)).first;
  return it->second;
}

}  // namespace

double Part::area() const {
  if (kind == Kind::box) {
    const auto& h = extent;
    return 8.0 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2]);
  }
  return 2.0 * kPi * extent[0] * 2.0 * extent[1] + 2.0 * kPi * extent[0] * extent[0];
}

std::vector<ShapeFamily> builtin_families() {
  return {{"airplane", airplane}, {"chair", chair}, {"bracket", bracket}, {"lamp", lamp}};
}

ShapeFamily symmetric_mug_family() { return {"mug", mug}; }

PointCloud sample_parts(const std::vector<Part>& parts, std::size_t n, std::mt19937_64& rng) {
  if (parts.empty()) throw std::invalid_argument("sample_parts: no parts");
  std::vector<double> areas;
  for (const auto& p : parts) areas.push_back(p.area());
  std::discrete_distribution<std::size_t> pick(areas.begin(), areas.end());
  PointCloud pc;
  pc.points.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Part& p = parts[pick(rng)];
    pc.points.push_back(p.kind == Part::Kind::box ? sample_box(p, rng) : sample_cylinder(p, rng));
  }
  return pc;
}

SymmetryReport symmetry_check(const ShapeFamily& family, std::size_t template_points, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const PointCloud tmpl = center(sample_parts(family.parts(nullptr), template_points, rng));

  Mat3 cov;
  for (const auto& p : tmpl.points) {
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) cov(r, c) += p[r] * p[c];
    }
  }
  const so3::Svd principal = so3::svd(cov);

  std::vector<Rotation> candidates = cube_rotations();
  std::vector<Vec3> axes;
  for (int c = 0; c < 3; ++c) {
    axes.push_back({principal.v(0, c), principal.v(1, c), principal.v(2, c)});
    Vec3 e{};
    e[c] = 1.0;
    axes.push_back(e);
  }
  for (const auto& axis : axes) {
    for (int order = 2; order <= 6; ++order) {
      for (int step = 1; step < order; ++step) {
        candidates.push_back(so3::from_axis_angle(axis, 2.0 * kPi * step / order));
      }
    }
  }

  SymmetryReport report;
  report.min_chamfer = INFINITY;
  for (const auto& r : candidates) {
    const double d = chamfer_distance(tmpl, apply_rotation(tmpl, r));
    if (d < report.min_chamfer) {
      report.min_chamfer = d;
      report.worst = r;
    }
  }
  report.symmetric = report.min_chamfer < kSymmetryChamferThreshold;
  return report;
}

SyntheticCorpus default_corpus_spec(std::size_t num_classes, std::size_t instances, std::size_t points,
                                    std::uint64_t seed) {
  auto families = builtin_families();
  if (num_classes > families.size()) {
    throw std::invalid_argument("at most " + std::to_string(families.size()) + " built-in classes");
  }
  families.resize(num_classes);
  return {std::move(families), instances, points, seed};
}

std::vector<std::string> Dataset::class_ids() const {
  std::vector<std::string> ids;
  for (const auto& c : clouds) {
    if (std::find(ids.begin(), ids.end(), c.class_id) == ids.end()) ids.push_back(c.class_id);
  }
  return ids;
}

std::vector<std::size_t> Dataset::indices_of(const std::string& class_id) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    if (clouds[i].class_id == class_id) out.push_back(i);
  }
  return out;
}

Dataset generate_synthetic_corpus(const SyntheticCorpus& spec) {
  if (spec.classes.size() < 2) throw std::invalid_argument("synthetic corpus needs at least 2 classes");
  if (spec.instances_per_class < 8) throw std::invalid_argument("synthetic corpus needs at least 8 instances per class");
  if (spec.points == 0) throw std::invalid_argument("synthetic corpus needs a positive point count");
  for (const auto& family : spec.classes) {
    const auto report = cached_symmetry_check(family);
    if (report.symmetric) {
      throw DataError("shape family \"" + family.name + "\" has a rotational self-symmetry (Chamfer " +
                      std::to_string(report.min_chamfer) + ")");
    }
  }
  Dataset data;
  std::mt19937_64 rng(spec.seed);
  for (const auto& family : spec.classes) {
    for (std::size_t i = 0; i < spec.instances_per_class; ++i) {
      PointCloud pc = center(sample_parts(family.parts(&rng), spec.points, rng));
      pc.class_id = family.name;
      char id[32];
      std::snprintf(id, sizeof(id), "_%03zu", i);
      pc.instance_id = family.name + id;
      data.clouds.push_back(std::move(pc));
    }
  }
  return data;
}

std::pair<Dataset, Dataset> split_by_instance(const Dataset& data, double val_fraction) {
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw std::invalid_argument("val_fraction must be in [0, 1)");
  Dataset train, val;
  for (const auto& cls : data.class_ids()) {
    const auto idx = data.indices_of(cls);
    const auto n_val = static_cast<std::size_t>(std::ceil(val_fraction * static_cast<double>(idx.size())));
    for (std::size_t j = 0; j < idx.size(); ++j) {
      (j + n_val >= idx.size() ? val : train).clouds.push_back(data.clouds[idx[j]]);
    }
  }
  return {std::move(train), std::move(val)};
}

std::filesystem::path save_corpus(const Dataset& data, const std::filesystem::path& dir, CloudFormat format) {
  std::filesystem::create_directories(dir);
  const char* ext = format == CloudFormat::xyz_text ? ".xyz" : ".cpts";
  std::vector<ManifestRecord> records;
  for (const auto& pc : data.clouds) {
    const std::string file = pc.instance_id + ext;
    save_cloud(dir / file, pc, format);
    records.push_back({file, pc.class_id, pc.instance_id});
  }
  const auto manifest = dir / "manifest.csv";
  write_manifest(manifest, records);
  return manifest;
}

Dataset load_corpus(const std::filesystem::path& manifest) {
  const auto records = read_manifest(manifest);
  if (records.empty()) throw DataError("manifest " + manifest.string() + " lists no clouds");
  Dataset data;
  for (const auto& r : records) {
    std::filesystem::path p(r.path);
    if (p.is_relative()) p = manifest.parent_path() / p;
    PointCloud pc = load_cloud(p);
    pc.class_id = r.class_id;
    pc.instance_id = r.instance_id;
    data.clouds.push_back(std::move(pc));
  }
  return data;
}

}  // namespace choir

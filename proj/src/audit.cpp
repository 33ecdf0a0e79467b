#include "choir/audit.hpp"

#include <charconv>
#include <ostream>
#include <random>

#include "choir/parallel.hpp"

namespace choir {

namespace {

std::string num(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace

AuditTable audit_dataset(const Dataset& data, const AuditOptions& opts) {
  AuditTable table;
  table.edges = opts.points * opts.k;
  table.clouds.resize(data.clouds.size());
  parallel_for(data.clouds.size(), thread_budget(opts.threads), [&](std::size_t i) {
    const PointCloud& src = data.clouds[i];
    PointCloud pc = src;
    if (pc.size() != opts.points) {
      std::mt19937_64 rng(derive_seed(opts.seed, 0, i));
      pc = center(resample(src, opts.points, rng));
    }
    const std::uint64_t seed = derive_seed(opts.seed, 1, i);
    std::mt19937_64 a(seed), b(seed);
    auto& row = table.clouds[i];
    row.instance_id = src.instance_id;
    row.class_id = src.class_id;
    row.single_mean = knn_rotation_audit(pc, opts.k, Dtype::f32, opts.trials, a, opts.frozen).mean_mismatches;
    row.double_mean = knn_rotation_audit(pc, opts.k, Dtype::f64, opts.trials, b, opts.frozen).mean_mismatches;
  });
  for (const auto& class_id : data.class_ids()) {
    const auto idx = data.indices_of(class_id);
    double s = 0.0, d = 0.0;
    for (auto i : idx) {
      s += table.clouds[i].single_mean;
      d += table.clouds[i].double_mean;
    }
    table.classes.push_back(class_id);
    table.single_mean.push_back(s / static_cast<double>(idx.size()));
    table.double_mean.push_back(d / static_cast<double>(idx.size()));
  }
  return table;
}

void write_audit_table(std::ostream& out, const AuditTable& table) {
  out << "precision";
  for (const auto& c : table.classes) out << ',' << c;
  out << "\nsingle";
  for (double v : table.single_mean) out << ',' << num(v);
  out << "\ndouble";
  for (double v : table.double_mean) out << ',' << num(v);
  out << '\n';
}

void write_audit_clouds(std::ostream& out, const AuditTable& table) {
  out << "instance_id,class_id,single_mean,double_mean\n";
  for (const auto& c : table.clouds) {
    out << c.instance_id << ',' << c.class_id << ',' << num(c.single_mean) << ',' << num(c.double_mean) << '\n';
  }
}

}  // namespace choir

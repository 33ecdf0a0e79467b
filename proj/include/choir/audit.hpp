#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "choir/corpus.hpp"
#include "choir/knn.hpp"

namespace choir {

struct AuditOptions {
  std::size_t k = kDefaultK;
  std::size_t points = 1024;  // clouds of another size are resampled first
  std::size_t trials = 10;
  std::uint64_t seed = 0;
  bool frozen = false;
  std::size_t threads = 1;
};

struct CloudAudit {
  std::string instance_id;
  std::string class_id;
  double single_mean = 0.0;  // wrong edges per trial
  double double_mean = 0.0;
};

struct AuditTable {
  std::size_t edges = 0;  // per cloud
  std::vector<std::string> classes;
  std::vector<double> single_mean;  // per class
  std::vector<double> double_mean;
  std::vector<CloudAudit> clouds;
};

// Both precisions see the same rotations for a given cloud.
AuditTable audit_dataset(const Dataset& data, const AuditOptions& opts);

// Rows "single" and "double", one column per class.
void write_audit_table(std::ostream& out, const AuditTable& table);
void write_audit_clouds(std::ostream& out, const AuditTable& table);

}  // namespace choir

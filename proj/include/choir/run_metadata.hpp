#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace choir {

std::string code_version();

// UTC, ISO 8601 with seconds.
std::string timestamp_now();

struct RunMetadata {
  std::string command_line;
  std::map<std::string, std::string> config;
  std::uint64_t seed = 0;
  std::string precision = "double";
  std::string knn_mode = "adaptive";
  std::string code_version = choir::code_version();
  std::string started = timestamp_now();
  std::string finished;

  static RunMetadata from_args(int argc, const char* const* argv);
  std::string to_json() const;
  static RunMetadata from_json(const std::string& text);
  // Stamps `finished` and writes the JSON document.
  void write(const std::filesystem::path& path);
};

}  // namespace choir

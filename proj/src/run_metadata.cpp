#include "choir/run_metadata.hpp"

#include <chrono>
#include <ctime>
#include <fstream>

#include <json.hpp>

#include "choir/error.hpp"

#ifndef CHOIR_VERSION
#define CHOIR_VERSION "0.0.0"
#endif

namespace choir {

std::string code_version() { return CHOIR_VERSION; }

std::string timestamp_now() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm utc{};
  gmtime_r(&now, &utc);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &utc);
  return buf;
}

RunMetadata RunMetadata::from_args(int argc, const char* const* argv) {
  RunMetadata m;
  for (int i = 0; i < argc; ++i) {
    if (i) m.command_line += ' ';
    m.command_line += argv[i];
  }
  return m;
}

std::string RunMetadata::to_json() const {
  nlohmann::json j;
  j["command_line"] = command_line;
  j["config"] = config;
  j["seed"] = seed;
  j["precision"] = precision;
  j["knn_mode"] = knn_mode;
  j["code_version"] = code_version;
  j["started"] = started;
  j["finished"] = finished;
  return j.dump(2);
}

RunMetadata RunMetadata::from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    RunMetadata m;
    m.command_line = j.at("command_line").get<std::string>();
    m.config = j.at("config").get<std::map<std::string, std::string>>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.precision = j.at("precision").get<std::string>();
    m.knn_mode = j.at("knn_mode").get<std::string>();
    m.code_version = j.at("code_version").get<std::string>();
    m.started = j.at("started").get<std::string>();
    m.finished = j.at("finished").get<std::string>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed run metadata: ") + e.what());
  }
}

void RunMetadata::write(const std::filesystem::path& path) {
  finished = timestamp_now();
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << to_json() << '\n';
  if (!out) throw DataError("failed writing " + path.string());
}

}  // namespace choir

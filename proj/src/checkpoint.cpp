#include "choir/checkpoint.hpp"

#include <fstream>
#include <limits>

#include "choir/binary_io.hpp"

namespace choir {

using binary_io::get;
using binary_io::put;

void write_checkpoint(std::ostream& out, const std::vector<NamedTensor>& entries) {
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic) - 1);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (e.name.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw DataError("checkpoint entry name too long: " + e.name.substr(0, 64));
    }
    put<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(e.value.rank()));
    for (auto extent : e.value.shape()) put<std::uint64_t>(out, extent);
    for (double v : e.value.data()) put<double>(out, v);
  }
  if (!out) throw DataError("failed writing checkpoint");
}

std::vector<NamedTensor> read_checkpoint(std::istream& in) {
  binary_io::expect_magic(in, kCheckpointMagic);
  const auto version = get<std::uint32_t>(in, "checkpoint version");
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint version " + std::to_string(version) + " unsupported (this build reads " +
                    std::to_string(kCheckpointVersion) + ")");
  }
  const auto count = get<std::uint32_t>(in, "entry count");
  std::vector<NamedTensor> entries;
  entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get<std::uint16_t>(in, "name length");
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw DataError("truncated file while reading entry name");
    const auto rank = get<std::uint8_t>(in, "rank");
    Shape shape(rank);
    for (auto& extent : shape) extent = get<std::uint64_t>(in, "extent");
    const std::size_t n = shape_numel(shape);
    std::vector<double> values(n);
    for (auto& v : values) v = get<double>(in, "values");
    entries.push_back({std::move(name), Tensor(std::move(shape), std::move(values))});
  }
  return entries;
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& entries) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  write_checkpoint(out, entries);
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  return read_checkpoint(in);
}

const Tensor& find_entry(const std::vector<NamedTensor>& entries, const std::string& name) {
  for (const auto& e : entries) {
    if (e.name == name) return e.value;
  }
  throw DataError("checkpoint has no entry named " + name);
}

}  // namespace choir

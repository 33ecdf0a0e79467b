#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "choir/tensor.hpp"

namespace choir {

inline constexpr char kCheckpointMagic[] = "CHOIRCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor value;
};

// Layout: magic, u32 version, u32 count, then per entry u16 name length,
// name bytes, u8 rank, u64 extents, f64 values. All little-endian.
void write_checkpoint(std::ostream& out, const std::vector<NamedTensor>& entries);
std::vector<NamedTensor> read_checkpoint(std::istream& in);

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& entries);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

// Throws DataError when `name` is missing.
const Tensor& find_entry(const std::vector<NamedTensor>& entries, const std::string& name);

}  // namespace choir

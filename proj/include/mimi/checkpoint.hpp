#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string_view>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mimi/tensor.hpp"

namespace mimi {

/// Malformed or truncated input. offset is the byte position where parsing
/// stopped.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Container layout (little endian):
//   "MIMT" | u32 version | u32 count |
//   count x { u32 name_len | name | u32 rank | rank x u64 dim | f32 data }
void write_tensors(std::ostream& out, const NamedTensors& tensors);
NamedTensors read_tensors(std::istream& in);

void save_tensors(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors load_tensors(const std::filesystem::path& path);

const Tensor* find_tensor(const NamedTensors& tensors, std::string_view name);

}  // namespace mimi

#pragma once

// File layout shared by datasets and checkpoints:
//
//   8 bytes   magic "VARANBIN"
//   8 bytes   manifest length L, unsigned little-endian
//   L bytes   JSON manifest; its "arrays" member lists {name, dtype, shape}
//   payload   the arrays back to back in manifest order, little-endian,
//             dtype "f64" (IEEE double) or "i32" (two's complement)

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "varan/tensor.hpp"

namespace varan {

class CorruptFileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatVersionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Container {
  /// Free-form metadata; "arrays" is reserved.
  nlohmann::ordered_json meta;
  std::vector<std::pair<std::string, Tensor>> f64;
  std::vector<std::pair<std::string, std::vector<std::int32_t>>> i32;

  const Tensor& tensor(const std::string& name) const;
  const std::vector<std::int32_t>& ints(const std::string& name) const;
};

/// Arrays are written f64 first, then i32, each in insertion order.
void write_container(const std::filesystem::path& path, const Container& c);
/// Throws CorruptFileError for a bad magic, a truncated or oversized payload,
/// or a manifest that disagrees with the bytes.
Container read_container(const std::filesystem::path& path);

}  // namespace varan

#include "varan/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace varan {

namespace {

constexpr char kMagic[8] = {'V', 'A', 'R', 'A', 'N', 'B', 'I', 'N'};

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

Shape parse_shape(const nlohmann::ordered_json& j) {
  Shape s;
  for (const auto& e : j) {
    const auto v = e.get<std::int64_t>();
    if (v <= 0) throw CorruptFileError("manifest declares a non-positive extent");
    s.push_back(static_cast<std::size_t>(v));
  }
  return s;
}

}  // namespace

const Tensor& Container::tensor(const std::string& name) const {
  for (const auto& [n, t] : f64)
    if (n == name) return t;
  throw CorruptFileError("missing array '" + name + "'");
}

const std::vector<std::int32_t>& Container::ints(const std::string& name) const {
  for (const auto& [n, v] : i32)
    if (n == name) return v;
  throw CorruptFileError("missing array '" + name + "'");
}

void write_container(const std::filesystem::path& path, const Container& c) {
  nlohmann::ordered_json manifest = c.meta;
  auto arrays = nlohmann::ordered_json::array();
  for (const auto& [name, t] : c.f64) arrays.push_back({{"name", name}, {"dtype", "f64"}, {"shape", t.shape()}});
  for (const auto& [name, v] : c.i32) {
    arrays.push_back({{"name", name}, {"dtype", "i32"}, {"shape", Shape{v.size()}}});
  }
  manifest["arrays"] = arrays;
  const std::string text = manifest.dump();

  std::string out(kMagic, sizeof kMagic);
  put_u64(out, text.size());
  out += text;
  for (const auto& [name, t] : c.f64) {
    for (double d : t.data()) put_u64(out, std::bit_cast<std::uint64_t>(d));
  }
  for (const auto& [name, v] : c.i32) {
    for (std::int32_t x : v) {
      const auto u = static_cast<std::uint32_t>(x);
      for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
    }
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());

  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw CorruptFileError(path.string() + ": not a varan container");
  }
  const std::uint64_t mlen = get_u64(p + 8);
  if (mlen > bytes.size() - 16) throw CorruptFileError(path.string() + ": truncated manifest");

  Container c;
  nlohmann::ordered_json manifest;
  try {
    manifest = nlohmann::ordered_json::parse(bytes.substr(16, mlen));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFileError(path.string() + ": unreadable manifest (" + e.what() + ")");
  }
  if (!manifest.is_object() || !manifest.contains("arrays") || !manifest["arrays"].is_array()) {
    throw CorruptFileError(path.string() + ": manifest has no array table");
  }

  std::size_t pos = 16 + mlen;
  try {
    for (const auto& entry : manifest["arrays"]) {
      const auto name = entry.at("name").get<std::string>();
      const auto dtype = entry.at("dtype").get<std::string>();
      const Shape shape = parse_shape(entry.at("shape"));
      const std::size_t count = shape_numel(shape);
      const std::size_t width = dtype == "f64" ? 8 : dtype == "i32" ? 4 : 0;
      if (width == 0) throw CorruptFileError(path.string() + ": unknown dtype '" + dtype + "'");
      if (count > (bytes.size() - pos) / width) {
        throw CorruptFileError(path.string() + ": payload shorter than manifest declares (array '" + name + "')");
      }
      if (width == 8) {
        std::vector<double> data(count);
        for (std::size_t i = 0; i < count; ++i) data[i] = std::bit_cast<double>(get_u64(p + pos + 8 * i));
        c.f64.emplace_back(name, Tensor(shape, std::move(data)));
      } else {
        std::vector<std::int32_t> data(count);
        for (std::size_t i = 0; i < count; ++i) {
          std::uint32_t u = 0;
          for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(p[pos + 4 * i + b]) << (8 * b);
          data[i] = static_cast<std::int32_t>(u);
        }
        c.i32.emplace_back(name, std::move(data));
      }
      pos += count * width;
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFileError(path.string() + ": malformed array table (" + e.what() + ")");
  }
  if (pos != bytes.size()) throw CorruptFileError(path.string() + ": trailing bytes after declared arrays");

  manifest.erase("arrays");
  c.meta = std::move(manifest);
  return c;
}

}  // namespace varan

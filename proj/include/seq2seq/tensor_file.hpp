#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "seq2seq/common.hpp"

namespace seq2seq {

/// One tensor of a checkpoint: values are stored little-endian as 32-bit
/// floats regardless of the in-memory scalar type.
struct NamedTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<float> data;
};

/// Container format shared by model and optimizer checkpoints:
///   line   "seq2seq-tensors v1"
///   lines  "key=value" headers
///   line   "tensors=<count>"
///   then per tensor a line "tensor <name> <rank> <dims...>" followed by the
///   raw little-endian float32 payload.
struct TensorFile {
  std::vector<std::pair<std::string, std::string>> header;
  std::vector<NamedTensor> tensors;
};

namespace detail {

inline void put_f32_le(std::ostream& os, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  const unsigned char b[4] = {static_cast<unsigned char>(bits & 0xff),
                              static_cast<unsigned char>((bits >> 8) & 0xff),
                              static_cast<unsigned char>((bits >> 16) & 0xff),
                              static_cast<unsigned char>((bits >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline float get_f32_le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  const std::uint32_t bits = static_cast<std::uint32_t>(b[0]) |
                             (static_cast<std::uint32_t>(b[1]) << 8) |
                             (static_cast<std::uint32_t>(b[2]) << 16) |
                             (static_cast<std::uint32_t>(b[3]) << 24);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace detail

inline void write_tensor_file(const std::filesystem::path& path, const TensorFile& file) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FileError("cannot write tensor file: " + path.string());
  os << "seq2seq-tensors v1\n";
  for (const auto& [k, v] : file.header) os << k << "=" << v << "\n";
  os << "tensors=" << file.tensors.size() << "\n";
  for (const NamedTensor& t : file.tensors) {
    os << "tensor " << t.name << " " << t.shape.size();
    std::size_t numel = 1;
    for (std::size_t d : t.shape) {
      os << " " << d;
      numel *= d;
    }
    os << "\n";
    if (numel != t.data.size())
      throw std::logic_error("tensor " + t.name + ": shape/data size mismatch");
    for (float v : t.data) detail::put_f32_le(os, v);
  }
}

inline TensorFile read_tensor_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FileError("cannot read tensor file: " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != "seq2seq-tensors v1")
    throw FileError("bad tensor file magic in " + path.string());
  TensorFile file;
  std::size_t tensor_count = 0;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FileError("bad tensor file header line: " + line);
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    if (key == "tensors") {
      tensor_count = std::stoull(val);
      break;
    }
    file.header.emplace_back(key, val);
  }
  for (std::size_t i = 0; i < tensor_count; ++i) {
    if (!std::getline(is, line)) throw FileError("truncated tensor file: " + path.string());
    std::istringstream hdr(line);
    std::string tag;
    NamedTensor t;
    std::size_t rank = 0;
    if (!(hdr >> tag >> t.name >> rank) || tag != "tensor")
      throw FileError("bad tensor record header: " + line);
    std::size_t numel = 1;
    for (std::size_t d = 0; d < rank; ++d) {
      std::size_t dim = 0;
      if (!(hdr >> dim)) throw FileError("bad tensor shape in: " + line);
      t.shape.push_back(dim);
      numel *= dim;
    }
    t.data.resize(numel);
    for (std::size_t k = 0; k < numel; ++k) t.data[k] = detail::get_f32_le(is);
    if (!is) throw FileError("truncated tensor payload in " + path.string());
    file.tensors.push_back(std::move(t));
  }
  return file;
}

}  // namespace seq2seq

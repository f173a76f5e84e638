#pragma once

// Checkpoint container:
//   "DPKE" | u32 version | repeated { u16 name_len | name | u8 rank | u32 dims[rank] | f64 data[] }
// All integers and floats little-endian; tensors stored column-major.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>

#include "dpke/detector.hpp"

namespace dpke {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename T>
void put_le(std::ostream& os, T value) {
  static_assert(std::is_integral_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i)
    os.put(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF));
}

template <typename T>
T get_le(std::istream& is) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    const int c = is.get();
    if (c == EOF) throw CheckpointError("checkpoint truncated");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return static_cast<T>(v);
}

inline void put_f64(std::ostream& os, double d) { put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(d)); }
inline double get_f64(std::istream& is) { return std::bit_cast<double>(get_le<std::uint64_t>(is)); }

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const ModelParams& params) {
  os.write("DPKE", 4);
  detail::put_le<std::uint32_t>(os, kCheckpointVersion);
  for (int id = 0; id < kParamCount; ++id) {
    const std::string name = param_name(id);
    const Matrix& t = params[id];
    detail::put_le<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    if (param_is_bias(id)) {
      detail::put_le<std::uint8_t>(os, 1);
      detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rows()));
    } else {
      detail::put_le<std::uint8_t>(os, 2);
      detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rows()));
      detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.cols()));
    }
    for (Eigen::Index i = 0; i < t.size(); ++i) detail::put_f64(os, t.data()[i]);
  }
}

inline void write_checkpoint(const std::string& path, const ModelParams& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot open " + path + " for writing");
  write_checkpoint(os, params);
  if (!os) throw CheckpointError("write failed: " + path);
}

/// Reads tensors until end of stream and checks them against `arch`.
inline ModelParams read_checkpoint(std::istream& is, const ArchConfig& arch) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "DPKE", 4) != 0)
    throw CheckpointError("bad checkpoint magic");
  const auto version = detail::get_le<std::uint32_t>(is);
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));

  ModelParams params = ModelParams::zeros(arch);
  std::vector<char> seen(kParamCount, 0);
  while (is.peek() != EOF) {
    const auto len = detail::get_le<std::uint16_t>(is);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw CheckpointError("checkpoint truncated in tensor name");
    const auto rank = detail::get_le<std::uint8_t>(is);
    if (rank < 1 || rank > 2) throw CheckpointError("tensor " + name + " has unsupported rank");
    std::uint32_t rows = detail::get_le<std::uint32_t>(is);
    std::uint32_t cols = rank == 2 ? detail::get_le<std::uint32_t>(is) : 1;
    int id = -1;
    for (int i = 0; i < kParamCount; ++i)
      if (name == param_name(i)) id = i;
    if (id < 0) throw CheckpointError("unknown tensor " + name);
    Matrix& t = params[id];
    if (t.rows() != static_cast<Eigen::Index>(rows) || t.cols() != static_cast<Eigen::Index>(cols))
      throw CheckpointError("tensor " + name + " shape does not match the architecture");
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = detail::get_f64(is);
    seen[static_cast<std::size_t>(id)] = 1;
  }
  for (int i = 0; i < kParamCount; ++i)
    if (!seen[static_cast<std::size_t>(i)])
      throw CheckpointError(std::string("checkpoint lacks tensor ") + param_name(i));
  return params;
}

inline ModelParams read_checkpoint(const std::string& path, const ArchConfig& arch) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path);
  return read_checkpoint(is, arch);
}

}  // namespace dpke

#include "rdd/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace rdd {

namespace {

void put_bytes(std::ostream& os, const unsigned char* b, std::size_t n) {
  os.write(reinterpret_cast<const char*>(b), static_cast<std::streamsize>(n));
  if (!os) throw IoError("write failed");
}

void get_bytes(std::istream& is, unsigned char* b, std::size_t n) {
  is.read(reinterpret_cast<char*>(b), static_cast<std::streamsize>(n));
  if (is.gcount() != static_cast<std::streamsize>(n))
    throw IoError("unexpected end of stream");
}

template <typename U>
void put_le(std::ostream& os, U v) {
  unsigned char b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  put_bytes(os, b, sizeof(U));
}

template <typename U>
U get_le(std::istream& is) {
  unsigned char b[sizeof(U)];
  get_bytes(is, b, sizeof(U));
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void write_u8(std::ostream& os, std::uint8_t v) { put_le<std::uint8_t>(os, v); }
void write_u32(std::ostream& os, std::uint32_t v) { put_le<std::uint32_t>(os, v); }
void write_u64(std::ostream& os, std::uint64_t v) { put_le<std::uint64_t>(os, v); }
void write_i32(std::ostream& os, std::int32_t v) { put_le<std::uint32_t>(os, static_cast<std::uint32_t>(v)); }
void write_f32(std::ostream& os, float v) { put_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(v)); }
void write_f64(std::ostream& os, double v) { put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v)); }

void write_magic(std::ostream& os, const char magic[4]) {
  put_bytes(os, reinterpret_cast<const unsigned char*>(magic), 4);
}

std::uint8_t read_u8(std::istream& is) { return get_le<std::uint8_t>(is); }
std::uint32_t read_u32(std::istream& is) { return get_le<std::uint32_t>(is); }
std::uint64_t read_u64(std::istream& is) { return get_le<std::uint64_t>(is); }
std::int32_t read_i32(std::istream& is) { return static_cast<std::int32_t>(get_le<std::uint32_t>(is)); }
float read_f32(std::istream& is) { return std::bit_cast<float>(get_le<std::uint32_t>(is)); }
double read_f64(std::istream& is) { return std::bit_cast<double>(get_le<std::uint64_t>(is)); }

void expect_magic(std::istream& is, const char magic[4], const std::string& what) {
  char got[4];
  is.read(got, 4);
  if (is.gcount() != 4 || std::memcmp(got, magic, 4) != 0)
    throw IoError("bad magic while reading " + what + " (expected " +
                  std::string(magic, 4) + ")");
}

void write_tensor_record(std::ostream& os, const Tensor& t) {
  if (t.rank() > 255) throw IoError("tensor rank too large to serialize");
  write_magic(os, "RDDT");
  write_u8(os, static_cast<std::uint8_t>(t.rank()));
  for (int d : t.shape()) write_u32(os, static_cast<std::uint32_t>(d));
  for (std::size_t i = 0; i < t.size(); ++i) write_f64(os, t.data()[i]);
}

Tensor read_tensor_record(std::istream& is) {
  expect_magic(is, "RDDT", "tensor record");
  const int rank = read_u8(is);
  Shape shape(rank);
  for (int i = 0; i < rank; ++i) {
    std::uint32_t d = read_u32(is);
    if (d > (1u << 30)) throw IoError("implausible tensor dimension " + std::to_string(d));
    shape[i] = static_cast<int>(d);
  }
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = read_f64(is);
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  write_tensor_record(os, t);
  if (!os) throw IoError("failed writing " + path);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  return read_tensor_record(is);
}

}  // namespace rdd

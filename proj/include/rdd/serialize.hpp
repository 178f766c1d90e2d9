// Little-endian binary primitives and the on-disk tensor record.
//
// Tensor record layout:
//   "RDDT"  4-byte magic
//   u8      rank
//   u32[r]  dimensions, little endian
//   f64[n]  row-major payload, little endian
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "rdd/errors.hpp"
#include "rdd/tensor.hpp"

namespace rdd {

void write_u8(std::ostream& os, std::uint8_t v);
void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_i32(std::ostream& os, std::int32_t v);
void write_f32(std::ostream& os, float v);
void write_f64(std::ostream& os, double v);
void write_magic(std::ostream& os, const char magic[4]);

std::uint8_t read_u8(std::istream& is);
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
std::int32_t read_i32(std::istream& is);
float read_f32(std::istream& is);
double read_f64(std::istream& is);
void expect_magic(std::istream& is, const char magic[4], const std::string& what);

void write_tensor_record(std::ostream& os, const Tensor& t);
Tensor read_tensor_record(std::istream& is);

void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

}  // namespace rdd

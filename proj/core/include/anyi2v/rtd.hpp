#pragma once

// RTD1 raw tensor dumps: the 8-byte magic "RTDUMP01", a little-endian u32
// rank, rank u32 dimensions, then little-endian float32 values in row-major
// order.

#include <filesystem>
#include <iosfwd>
#include <string>

#include "anyi2v/tensor.hpp"

namespace anyi2v::rtd {

inline constexpr char kMagic[8] = {'R', 'T', 'D', 'U', 'M', 'P', '0', '1'};

void write(std::ostream& out, const Tensor& t);
Tensor read(std::istream& in);

void save(const std::filesystem::path& path, const Tensor& t);
Tensor load(const std::filesystem::path& path);

}  // namespace anyi2v::rtd

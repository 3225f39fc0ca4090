#pragma once

#include <filesystem>
#include <iosfwd>
#include <vector>

#include "smoothcache/tensor.hpp"

namespace smoothcache::sctd {

// Binary tensor dump:
//   "SCTD" | u32 version (=1) | u32 ndim | ndim x u64 dims | f32 payload
// All integers and floats little-endian. A "sequence" file is several
// records concatenated back to back.

inline constexpr std::uint32_t kVersion = 1;

void write(std::ostream& out, const Tensor& t);
Tensor read(std::istream& in);

void save(const std::filesystem::path& path, const Tensor& t);
Tensor load(const std::filesystem::path& path);

void save_sequence(const std::filesystem::path& path, const std::vector<Tensor>& ts);
std::vector<Tensor> load_sequence(const std::filesystem::path& path);

}  // namespace smoothcache::sctd

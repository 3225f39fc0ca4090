#include "smoothcache/sctd.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>

#include "smoothcache/errors.hpp"

namespace smoothcache::sctd {

namespace {

constexpr std::array<char, 4> kMagic{'S', 'C', 'T', 'D'};
// Guards against allocating absurd buffers from a corrupt header.
constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 32;

template <typename U>
void put_le(std::ostream& out, U v) {
  char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(buf, sizeof(U));
}

template <typename U>
U get_le(std::istream& in) {
  unsigned char buf[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(U))) throw IoError("SCTD: truncated header");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return v;
}

}  // namespace

void write(std::ostream& out, const Tensor& t) {
  out.write(kMagic.data(), kMagic.size());
  put_le<std::uint32_t>(out, kVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.ndim()));
  for (std::size_t d : t.shape()) put_le<std::uint64_t>(out, d);
  for (float v : t.data()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  if (!out) throw IoError("SCTD: write failed");
}

Tensor read(std::istream& in) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), magic.size())) throw IoError("SCTD: truncated header");
  if (magic != kMagic) throw IoError("SCTD: bad magic");
  const auto version = get_le<std::uint32_t>(in);
  if (version != kVersion) throw IoError("SCTD: unsupported version " + std::to_string(version));
  const auto ndim = get_le<std::uint32_t>(in);
  if (ndim == 0 || ndim > 16) throw IoError("SCTD: invalid rank " + std::to_string(ndim));
  Shape shape(ndim);
  std::uint64_t n = 1;
  for (auto& d : shape) {
    const auto v = get_le<std::uint64_t>(in);
    if (v == 0 || v > kMaxElements) throw IoError("SCTD: invalid dimension");
    d = static_cast<std::size_t>(v);
    n *= v;
    if (n > kMaxElements) throw IoError("SCTD: tensor too large");
  }
  std::vector<float> data(static_cast<std::size_t>(n));
  for (auto& v : data) {
    v = std::bit_cast<float>(get_le<std::uint32_t>(in));
    if (!std::isfinite(v)) throw IoError("SCTD: non-finite payload value");
  }
  return Tensor(std::move(shape), std::move(data));
}

void save(const std::filesystem::path& path, const Tensor& t) { save_sequence(path, {t}); }

Tensor load(const std::filesystem::path& path) {
  auto seq = load_sequence(path);
  if (seq.size() != 1) throw IoError("SCTD: expected a single tensor in " + path.string());
  return std::move(seq.front());
}

void save_sequence(const std::filesystem::path& path, const std::vector<Tensor>& ts) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  for (const auto& t : ts) write(out, t);
}

std::vector<Tensor> load_sequence(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  std::vector<Tensor> out;
  while (in.peek() != std::char_traits<char>::eof()) out.push_back(read(in));
  if (out.empty()) throw IoError("SCTD: empty file " + path.string());
  return out;
}

}  // namespace smoothcache::sctd

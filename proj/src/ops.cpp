#include "smoothcache/ops.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <thread>
#include <vector>

#include "smoothcache/errors.hpp"

namespace smoothcache {

namespace {

thread_local std::uint64_t t_macs = 0;
std::atomic<std::size_t> g_kernel_threads{1};

// Below this many MACs, spawning threads costs more than it saves.
constexpr std::uint64_t kParallelMacThreshold = 1u << 18;

void require_rank2(const Tensor& t, const char* what) {
  if (t.ndim() != 2) {
    throw ShapeError(std::string(what) + ": expected rank-2 tensor, got " + shape_to_string(t.shape()));
  }
}

void matmul_rows(const Tensor& a, const Tensor& b, Tensor& c, std::size_t row_begin, std::size_t row_end) {
  const std::size_t k = a.cols();
  const std::size_t n = b.cols();
  const float* ap = a.data().data();
  const float* bp = b.data().data();
  float* cp = c.data().data();
  for (std::size_t i = row_begin; i < row_end; ++i) {
    float* crow = cp + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const float aip = ap[i * k + p];
      const float* brow = bp + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

}  // namespace

void set_kernel_threads(std::size_t n) { g_kernel_threads.store(std::max<std::size_t>(1, n)); }
std::size_t kernel_threads() { return g_kernel_threads.load(); }
std::uint64_t mac_counter() { return t_macs; }

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul lhs");
  require_rank2(b, "matmul rhs");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul inner dimensions differ: " + shape_to_string(a.shape()) + " * " +
                     shape_to_string(b.shape()));
  }
  const std::size_t m = a.rows();
  const std::size_t k = a.cols();
  const std::size_t n = b.cols();
  Tensor c({m, n});
  const std::uint64_t macs = static_cast<std::uint64_t>(m) * k * n;
  t_macs += macs;

  const std::size_t threads = std::min(kernel_threads(), m);
  if (threads <= 1 || macs < kParallelMacThreshold) {
    matmul_rows(a, b, c, 0, m);
    return c;
  }
  std::vector<std::thread> workers;
  workers.reserve(threads - 1);
  const std::size_t chunk = (m + threads - 1) / threads;
  for (std::size_t t = 1; t < threads; ++t) {
    const std::size_t begin = std::min(m, t * chunk);
    const std::size_t end = std::min(m, begin + chunk);
    if (begin < end) workers.emplace_back([&, begin, end] { matmul_rows(a, b, c, begin, end); });
  }
  matmul_rows(a, b, c, 0, std::min(m, chunk));
  for (auto& w : workers) w.join();
  return c;
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  Tensor out({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out.at(j, i) = a.at(i, j);
  return out;
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.ndim()) throw ShapeError("softmax axis out of range");
  const Shape& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];

  Tensor out(s);
  auto in = x.data();
  auto res = out.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      float mx = -std::numeric_limits<float>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, in[base + j * inner]);
      double sum = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const float e = std::exp(in[base + j * inner] - mx);
        res[base + j * inner] = e;
        sum += e;
      }
      const float inv = static_cast<float>(1.0 / sum);
      for (std::size_t j = 0; j < len; ++j) res[base + j * inner] *= inv;
    }
  }
  return out;
}

Tensor layer_norm(const Tensor& x, float eps) {
  const std::size_t d = x.shape().back();
  if (d < 2) throw ShapeError("layer_norm needs a last dimension of at least 2");
  const std::size_t rows = x.numel() / d;
  Tensor out(x.shape());
  auto in = x.data();
  auto res = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = in.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
    for (std::size_t j = 0; j < d; ++j) res[r * d + j] = static_cast<float>((row[j] - mean) * inv);
  }
  return out;
}

float gelu(float x) {
  constexpr float kSqrt2OverPi = 0.7978845608028654f;
  return 0.5f * x * (1.0f + std::tanh(kSqrt2OverPi * (x + 0.044715f * x * x * x)));
}

Tensor gelu(const Tensor& x) {
  Tensor out(x.shape());
  auto in = x.data();
  auto res = out.data();
  for (std::size_t i = 0; i < in.size(); ++i) res[i] = gelu(in[i]);
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shape mismatch " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
  }
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
  return out;
}

Tensor scale(const Tensor& a, float factor) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * factor;
  return out;
}

float rel_l1_error(const Tensor& current, const Tensor& stale) {
  if (current.shape() != stale.shape()) {
    throw ShapeError("rel_l1_error: shape mismatch " + shape_to_string(current.shape()) + " vs " +
                     shape_to_string(stale.shape()));
  }
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < current.numel(); ++i) {
    num += std::fabs(static_cast<double>(current[i]) - static_cast<double>(stale[i]));
    den += std::fabs(static_cast<double>(current[i]));
  }
  if (den == 0.0) throw DegenerateReferenceError("rel_l1_error: reference tensor has zero L1 norm");
  return static_cast<float>(num / den);
}

}  // namespace smoothcache

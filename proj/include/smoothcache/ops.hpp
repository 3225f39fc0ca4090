#pragma once

#include <cstddef>
#include <cstdint>

#include "smoothcache/tensor.hpp"

namespace smoothcache {

/// c = a * b for a [m x k] and b [k x n]. Every output element accumulates
/// p = 0..k-1 in order, so results are bitwise reproducible regardless of the
/// kernel thread count.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor transpose(const Tensor& a);

/// Max-shifted softmax along `axis`.
Tensor softmax(const Tensor& x, std::size_t axis);

/// Affine-free layer norm over the last axis (population variance).
Tensor layer_norm(const Tensor& x, float eps = 1e-5f);

/// tanh-approximation GELU.
Tensor gelu(const Tensor& x);
float gelu(float x);

Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);

/// ||current - stale||_1 / ||current||_1. Throws DegenerateReferenceError when
/// the reference norm is zero.
float rel_l1_error(const Tensor& current, const Tensor& stale);

// Kernel threading. Rows of a matmul are split across threads; the per-element
// reduction order is unchanged, so outputs do not depend on this setting.
void set_kernel_threads(std::size_t n);
std::size_t kernel_threads();

// Every matmul reports m*k*n to the calling thread's MAC counter. This is the
// brute-force instrumentation that the analytic MAC model is checked against.
std::uint64_t mac_counter();

/// Captures the MACs executed on this thread during its lifetime.
class MacScope {
 public:
  MacScope() : start_(mac_counter()) {}
  std::uint64_t elapsed() const { return mac_counter() - start_; }

 private:
  std::uint64_t start_;
};

}  // namespace smoothcache

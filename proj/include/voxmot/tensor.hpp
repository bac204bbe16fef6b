#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "voxmot/common.hpp"
#include "voxmot/rng.hpp"

namespace voxmot {

// Dense row-major tensor. Rank is almost always 1 or 2 here; the flow
// latents are kept as [tokens x channels] matrices.
template <class Real>
struct Tensor {
  std::vector<int> shape;
  std::vector<Real> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(numel_of(shape), Real(0));
  }
  Tensor(std::vector<int> s, std::vector<Real> d) : shape(std::move(s)), data(std::move(d)) {
    if (numel_of(shape) != data.size())
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
  }

  static size_t numel_of(const std::vector<int>& s) {
    size_t n = 1;
    for (int d : s) {
      if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(s));
      n *= static_cast<size_t>(d);
    }
    return n;
  }

  size_t numel() const { return data.size(); }
  int rows() const { return shape.empty() ? 1 : shape[0]; }
  int cols() const {
    if (shape.size() < 2) return shape.empty() ? 1 : 1;
    return shape[1];
  }
  bool is_scalar() const { return numel() == 1; }

  Real& at(int i, int j) { return data[static_cast<size_t>(i) * cols() + j]; }
  const Real& at(int i, int j) const { return data[static_cast<size_t>(i) * cols() + j]; }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int> s, Real v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static Tensor scalar(Real v) { return Tensor({1}, {v}); }
  static Tensor randn(std::vector<int> s, Rng& rng, Real stddev = Real(1)) {
    Tensor t(std::move(s));
    for (auto& x : t.data) x = static_cast<Real>(rng.normal()) * stddev;
    return t;
  }

  bool all_finite() const {
    for (Real v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }
};

// ---- kernels ------------------------------------------------------------
// All loops are written j-innermost over contiguous output so the compiler
// can vectorize without reassociating reductions; accumulation order is
// fixed, which keeps results bit-deterministic run to run.

// c_row[0..n) (+)= a_row[0..k) * B[k x n]
template <class Real>
inline void gemm_row(const Real* a_row, const Real* B, Real* c_row, int k, int n,
                     bool accumulate) {
  if (!accumulate) std::fill(c_row, c_row + n, Real(0));
  for (int p = 0; p < k; ++p) {
    const Real a = a_row[p];
    const Real* b_row = B + static_cast<size_t>(p) * n;
    for (int j = 0; j < n; ++j) c_row[j] += a * b_row[j];
  }
}

// C[m x n] (+)= A[m x k] * B[k x n]
template <class Real>
inline void gemm_nn(const Real* A, const Real* B, Real* C, int m, int k, int n,
                    bool accumulate = false) {
  for (int i = 0; i < m; ++i)
    gemm_row(A + static_cast<size_t>(i) * k, B, C + static_cast<size_t>(i) * n, k, n,
             accumulate);
}

template <class Real>
inline void transpose(const Real* A, Real* AT, int m, int n) {
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) AT[static_cast<size_t>(j) * m + i] = A[static_cast<size_t>(i) * n + j];
}

// C[m x n] (+)= A[m x k] * B^T where B is [n x k]
template <class Real>
inline void gemm_nt(const Real* A, const Real* B, Real* C, int m, int k, int n,
                    bool accumulate = false) {
  std::vector<Real> bt(static_cast<size_t>(k) * n);
  transpose(B, bt.data(), n, k);
  gemm_nn(A, bt.data(), C, m, k, n, accumulate);
}

// C[k x n] (+)= A^T * B where A is [m x k], B is [m x n]
template <class Real>
inline void gemm_tn(const Real* A, const Real* B, Real* C, int m, int k, int n,
                    bool accumulate = false) {
  if (!accumulate) std::fill(C, C + static_cast<size_t>(k) * n, Real(0));
  for (int i = 0; i < m; ++i) {
    const Real* a_row = A + static_cast<size_t>(i) * k;
    const Real* b_row = B + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const Real a = a_row[p];
      Real* c_row = C + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) c_row[j] += a * b_row[j];
    }
  }
}

}  // namespace voxmot

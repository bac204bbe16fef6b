#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "voxmot/common.hpp"
#include "voxmot/rope3d.hpp"
#include "voxmot/tensor.hpp"

namespace voxmot {

// Reverse-mode tape. Nodes are appended in execution order, which is a
// topological order by construction; backward walks the tape once from the
// loss down. One tape per training step, never shared across threads.
//
// Gradients of interior nodes live in per-pass scratch buffers; leaf
// gradients persist across backward() calls and accumulate until
// zero_grads(). Accumulation order is the fixed tape order.
template <class Real>
class Tape {
 public:
  using Ref = int32_t;
  using BackwardFn = std::function<void(Tape&, Ref)>;

  Ref leaf(Tensor<Real> v, bool requires_grad = false) {
    return push("leaf", std::move(v), {}, requires_grad, nullptr);
  }

  const Tensor<Real>& value(Ref r) const { return values_[check_ref(r)]; }
  bool requires_grad(Ref r) const { return nodes_[check_ref(r)].requires_grad; }
  size_t size() const { return nodes_.size(); }

  // ---- elementwise ----

  Ref add(Ref a, Ref b) {
    require_same_shape(a, b, "add");
    Tensor<Real> out = values_[a];
    const auto& vb = values_[b].data;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += vb[i];
    return push("add", std::move(out), {a, b}, any_grad({a, b}),
                [a, b](Tape& t, Ref self) {
                  const auto& g = t.pass_grad(self);
                  t.accumulate(a, g.data.data());
                  t.accumulate(b, g.data.data());
                });
  }

  Ref sub(Ref a, Ref b) {
    require_same_shape(a, b, "sub");
    Tensor<Real> out = values_[a];
    const auto& vb = values_[b].data;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= vb[i];
    return push("sub", std::move(out), {a, b}, any_grad({a, b}),
                [a, b](Tape& t, Ref self) {
                  const auto& g = t.pass_grad(self);
                  t.accumulate(a, g.data.data());
                  if (t.wants_grad(b)) {
                    auto& gb = t.grad_buf(b);
                    for (size_t i = 0; i < g.data.size(); ++i) gb.data[i] -= g.data[i];
                  }
                });
  }

  Ref mul(Ref a, Ref b) {
    require_same_shape(a, b, "mul");
    Tensor<Real> out = values_[a];
    const auto& vb = values_[b].data;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= vb[i];
    return push("mul", std::move(out), {a, b}, any_grad({a, b}),
                [a, b](Tape& t, Ref self) {
                  const auto& g = t.pass_grad(self);
                  const auto& va = t.value(a).data;
                  const auto& vb2 = t.value(b).data;
                  if (t.wants_grad(a)) {
                    auto& ga = t.grad_buf(a);
                    for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * vb2[i];
                  }
                  if (t.wants_grad(b)) {
                    auto& gb = t.grad_buf(b);
                    for (size_t i = 0; i < g.data.size(); ++i) gb.data[i] += g.data[i] * va[i];
                  }
                });
  }

  Ref scale(Ref a, Real c) {
    Tensor<Real> out = values_[a];
    for (auto& x : out.data) x *= c;
    return push("scale", std::move(out), {a}, any_grad({a}),
                [a, c](Tape& t, Ref self) {
                  const auto& g = t.pass_grad(self);
                  if (!t.wants_grad(a)) return;
                  auto& ga = t.grad_buf(a);
                  for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * c;
                });
  }

  // y[i,j] = a[i,j] + row[j]; the only broadcast in the library
  Ref add_row(Ref a, Ref row) {
    const auto& va = values_[a];
    const auto& vr = values_[row];
    if (va.shape.size() != 2 || static_cast<int>(vr.numel()) != va.cols())
      throw ShapeError("add_row: shapes " + shape_str(va.shape) + " and " +
                       shape_str(vr.shape));
    Tensor<Real> out = va;
    const int m = va.rows(), n = va.cols();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) out.data[static_cast<size_t>(i) * n + j] += vr.data[j];
    return push("add_row", std::move(out), {a, row}, any_grad({a, row}),
                [a, row, m, n](Tape& t, Ref self) {
                  const auto& g = t.pass_grad(self);
                  t.accumulate(a, g.data.data());
                  if (t.wants_grad(row)) {
                    auto& gr = t.grad_buf(row);
                    for (int i = 0; i < m; ++i)
                      for (int j = 0; j < n; ++j)
                        gr.data[j] += g.data[static_cast<size_t>(i) * n + j];
                  }
                });
  }

  // repeat a single row m times
  Ref broadcast_row(Ref row, int m) {
    const auto& vr = values_[row];
    const int n = static_cast<int>(vr.numel());
    Tensor<Real> out({m, n});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) out.data[static_cast<size_t>(i) * n + j] = vr.data[j];
    return push("broadcast_row", std::move(out), {row}, any_grad({row}),
                [row, m, n](Tape& t, Ref self) {
                  if (!t.wants_grad(row)) return;
                  const auto& g = t.pass_grad(self);
                  auto& gr = t.grad_buf(row);
                  for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                      gr.data[j] += g.data[static_cast<size_t>(i) * n + j];
                });
  }

  // ---- linear algebra ----

  Ref matmul(Ref a, Ref b) {
    const auto& va = values_[a];
    const auto& vb = values_[b];
    if (va.shape.size() != 2 || vb.shape.size() != 2 || va.cols() != vb.rows())
      throw ShapeError("matmul: inner dimensions do not match for shapes " +
                       shape_str(va.shape) + " and " + shape_str(vb.shape));
    const int m = va.rows(), k = va.cols(), n = vb.cols();
    Tensor<Real> out({m, n});
    // freshly zeroed output: accumulate skips a redundant clearing pass
    gemm_nn(va.data.data(), vb.data.data(), out.data.data(), m, k, n, true);
    return push("matmul", std::move(out), {a, b}, any_grad({a, b}),
                [a, b, m, k, n](Tape& t, Ref self) {
                  const auto& g = t.pass_grad(self);
                  if (t.wants_grad(a)) {  // dA = G * B^T
                    auto& ga = t.grad_buf(a);
                    gemm_nt(g.data.data(), t.value(b).data.data(), ga.data.data(), m, n, k,
                            true);
                  }
                  if (t.wants_grad(b)) {  // dB = A^T * G
                    auto& gb = t.grad_buf(b);
                    gemm_tn(t.value(a).data.data(), g.data.data(), gb.data.data(), m, k, n,
                            true);
                  }
                });
  }

  Ref transpose_op(Ref a) {
    const auto& va = values_[a];
    if (va.shape.size() != 2) throw ShapeError("transpose: need rank 2, got " + shape_str(va.shape));
    const int m = va.rows(), n = va.cols();
    Tensor<Real> out({n, m});
    transpose(va.data.data(), out.data.data(), m, n);
    return push("transpose", std::move(out), {a}, any_grad({a}),
                [a, m, n](Tape& t, Ref self) {
                  if (!t.wants_grad(a)) return;
                  const auto& g = t.pass_grad(self);
                  auto& ga = t.grad_buf(a);
                  for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                      ga.data[static_cast<size_t>(i) * n + j] +=
                          g.data[static_cast<size_t>(j) * m + i];
                });
  }

  // Hard-routed linear map: row i is multiplied by w[expert[i]].
  // Each row goes through exactly one expert; the other expert's weight
  // never sees the row in forward or backward.
  Ref routed_matmul(Ref h, std::vector<uint8_t> expert, Ref w0, Ref w1) {
    const auto& vh = values_[h];
    const auto& v0 = values_[w0];
    const auto& v1 = values_[w1];
    if (v0.shape != v1.shape)
      throw ShapeError("routed_matmul: expert weights must mirror shapes, got " +
                       shape_str(v0.shape) + " vs " + shape_str(v1.shape));
    if (vh.shape.size() != 2 || vh.cols() != v0.rows())
      throw ShapeError("routed_matmul: shapes " + shape_str(vh.shape) + " and " +
                       shape_str(v0.shape));
    if (expert.size() != static_cast<size_t>(vh.rows()))
      throw ShapeError("routed_matmul: one expert id per row required");
    const int m = vh.rows(), k = vh.cols(), n = v0.cols();
    Tensor<Real> out({m, n});
    for (int i = 0; i < m; ++i) {
      const Real* w = (expert[i] == 0 ? v0 : v1).data.data();
      gemm_row(vh.data.data() + static_cast<size_t>(i) * k, w,
               out.data.data() + static_cast<size_t>(i) * n, k, n, true);
    }
    auto ex = std::make_shared<std::vector<uint8_t>>(std::move(expert));
    return push("routed_matmul", std::move(out), {h, w0, w1}, any_grad({h, w0, w1}),
                [h, w0, w1, ex, m, k, n](Tape& t, Ref self) {
                  const auto& g = t.pass_grad(self);
                  const auto& vh2 = t.value(h);
                  if (t.wants_grad(h)) {
                    // dH_i = G_i * W_e^T; transpose both experts once
                    std::vector<Real> wt0(static_cast<size_t>(n) * k),
                        wt1(static_cast<size_t>(n) * k);
                    transpose(t.value(w0).data.data(), wt0.data(), k, n);
                    transpose(t.value(w1).data.data(), wt1.data(), k, n);
                    auto& gh = t.grad_buf(h);
                    for (int i = 0; i < m; ++i) {
                      const Real* wt = ((*ex)[i] == 0 ? wt0 : wt1).data();
                      gemm_row(g.data.data() + static_cast<size_t>(i) * n, wt,
                               gh.data.data() + static_cast<size_t>(i) * k, n, k, true);
                    }
                  }
                  for (int e = 0; e < 2; ++e) {
                    const Ref w = (e == 0 ? w0 : w1);
                    if (!t.wants_grad(w)) continue;
                    bool touched = false;
                    for (int i = 0; i < m; ++i) touched |= ((*ex)[i] == e);
                    if (!touched) continue;  // no rows routed here: leave untouched
                    auto& gw = t.grad_buf(w);
                    for (int i = 0; i < m; ++i) {
                      if ((*ex)[i] != e) continue;
                      // dW_e[p, j] += h[i, p] * g[i, j]
                      const Real* hr = vh2.data.data() + static_cast<size_t>(i) * k;
                      const Real* gr = g.data.data() + static_cast<size_t>(i) * n;
                      for (int p = 0; p < k; ++p) {
                        Real* wrow = gw.data.data() + static_cast<size_t>(p) * n;
                        const Real hv = hr[p];
                        for (int j = 0; j < n; ++j) wrow[j] += hv * gr[j];
                      }
                    }
                  }
                });
  }

  // out row i = (selector[i] == 0 ? a : b) row i
  Ref select_rows(std::vector<uint8_t> selector, Ref a, Ref b) {
    require_same_shape(a, b, "select_rows");
    const auto& va = values_[a];
    if (selector.size() != static_cast<size_t>(va.rows()))
      throw ShapeError("select_rows: one selector entry per row required");
    const int m = va.rows(), n = va.cols();
    Tensor<Real> out({m, n});
    const auto& vb = values_[b];
    for (int i = 0; i < m; ++i)
      std::copy_n((selector[i] == 0 ? va : vb).data.data() + static_cast<size_t>(i) * n, n,
                  out.data.data() + static_cast<size_t>(i) * n);
    auto sel = std::make_shared<std::vector<uint8_t>>(std::move(selector));
    return push("select_rows", std::move(out), {a, b}, any_grad({a, b}),
                [a, b, sel, m, n](Tape& t, Ref self) {
                  const auto& g = t.pass_grad(self);
                  for (int e = 0; e < 2; ++e) {
                    const Ref target = (e == 0 ? a : b);
                    if (!t.wants_grad(target)) continue;
                    bool touched = false;
                    for (int i = 0; i < m; ++i) touched |= ((*sel)[i] == e);
                    if (!touched) continue;
                    auto& gt = t.grad_buf(target);
                    for (int i = 0; i < m; ++i) {
                      if ((*sel)[i] != e) continue;
                      for (int j = 0; j < n; ++j)
                        gt.data[static_cast<size_t>(i) * n + j] +=
                            g.data[static_cast<size_t>(i) * n + j];
                    }
                  }
                });
  }

  // ---- nonlinearities and normalizers ----

  Ref softmax_rows(Ref a) {
    const auto& va = values_[a];
    if (va.shape.size() != 2) throw ShapeError("softmax_rows: need rank 2, got " + shape_str(va.shape));
    const int m = va.rows(), n = va.cols();
    Tensor<Real> out({m, n});
    for (int i = 0; i < m; ++i) {
      const Real* x = va.data.data() + static_cast<size_t>(i) * n;
      Real* y = out.data.data() + static_cast<size_t>(i) * n;
      Real mx = x[0];
      for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
      Real sum = 0;
      for (int j = 0; j < n; ++j) {
        y[j] = std::exp(x[j] - mx);
        sum += y[j];
      }
      const Real inv = Real(1) / sum;
      for (int j = 0; j < n; ++j) y[j] *= inv;
    }
    return push("softmax_rows", std::move(out), {a}, any_grad({a}),
                [a, m, n](Tape& t, Ref self) {
                  if (!t.wants_grad(a)) return;
                  const auto& g = t.pass_grad(self);
                  const auto& y = t.value(self);
                  auto& ga = t.grad_buf(a);
                  for (int i = 0; i < m; ++i) {
                    const Real* gr = g.data.data() + static_cast<size_t>(i) * n;
                    const Real* yr = y.data.data() + static_cast<size_t>(i) * n;
                    Real dot = 0;
                    for (int j = 0; j < n; ++j) dot += gr[j] * yr[j];
                    Real* gar = ga.data.data() + static_cast<size_t>(i) * n;
                    for (int j = 0; j < n; ++j) gar[j] += yr[j] * (gr[j] - dot);
                  }
                });
  }

  // Masked row softmax: invisible keys are excluded from the max and the
  // normalizer and their probability is exactly zero. Every row must have
  // at least one visible key.
  Ref masked_softmax_rows(Ref a, std::shared_ptr<const AttnMask> mask) {
    const auto& va = values_[a];
    if (va.shape.size() != 2 || !mask || mask->n != va.rows() || mask->n != va.cols())
      throw ShapeError("masked_softmax_rows: scores " + shape_str(va.shape) +
                       " do not match mask size " + std::to_string(mask ? mask->n : -1));
    const int m = va.rows(), n = va.cols();
    Tensor<Real> out({m, n});
    for (int i = 0; i < m; ++i) {
      const Real* x = va.data.data() + static_cast<size_t>(i) * n;
      const uint8_t* vis = mask->visible.data() + static_cast<size_t>(i) * n;
      Real* y = out.data.data() + static_cast<size_t>(i) * n;
      Real mx = 0;
      bool any = false;
      for (int j = 0; j < n; ++j)
        if (vis[j]) {
          mx = any ? std::max(mx, x[j]) : x[j];
          any = true;
        }
      if (!any) throw DomainError("masked_softmax_rows: query row " + std::to_string(i) +
                                  " has no visible key");
      Real sum = 0;
      for (int j = 0; j < n; ++j) {
        if (!vis[j]) continue;
        y[j] = std::exp(x[j] - mx);
        sum += y[j];
      }
      const Real inv = Real(1) / sum;
      for (int j = 0; j < n; ++j)
        if (vis[j]) y[j] *= inv;
    }
    return push("masked_softmax_rows", std::move(out), {a}, any_grad({a}),
                [a, m, n](Tape& t, Ref self) {
                  if (!t.wants_grad(a)) return;
                  const auto& g = t.pass_grad(self);
                  const auto& y = t.value(self);
                  auto& ga = t.grad_buf(a);
                  for (int i = 0; i < m; ++i) {
                    const Real* gr = g.data.data() + static_cast<size_t>(i) * n;
                    const Real* yr = y.data.data() + static_cast<size_t>(i) * n;
                    Real dot = 0;
                    for (int j = 0; j < n; ++j) dot += gr[j] * yr[j];
                    Real* gar = ga.data.data() + static_cast<size_t>(i) * n;
                    for (int j = 0; j < n; ++j) gar[j] += yr[j] * (gr[j] - dot);
                  }
                });
  }

  // y[i,j] = x[i,j] / rms(x_i) * gain[j], rms with eps inside the sqrt
  Ref rms_norm(Ref a, Ref gain) {
    const auto& va = values_[a];
    const auto& vg = values_[gain];
    if (va.shape.size() != 2 || static_cast<int>(vg.numel()) != va.cols())
      throw ShapeError("rms_norm: shapes " + shape_str(va.shape) + " and " +
                       shape_str(vg.shape));
    const int m = va.rows(), n = va.cols();
    constexpr double eps = 1e-6;
    Tensor<Real> out({m, n});
    auto inv_rms = std::make_shared<std::vector<Real>>(m);
    for (int i = 0; i < m; ++i) {
      const Real* x = va.data.data() + static_cast<size_t>(i) * n;
      double ss = 0;
      for (int j = 0; j < n; ++j) ss += static_cast<double>(x[j]) * x[j];
      const Real r = static_cast<Real>(1.0 / std::sqrt(ss / n + eps));
      (*inv_rms)[i] = r;
      Real* y = out.data.data() + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) y[j] = x[j] * r * vg.data[j];
    }
    return push("rms_norm", std::move(out), {a, gain}, any_grad({a, gain}),
                [a, gain, inv_rms, m, n](Tape& t, Ref self) {
                  const auto& g = t.pass_grad(self);
                  const auto& x = t.value(a);
                  const auto& gn = t.value(gain);
                  for (int i = 0; i < m; ++i) {
                    const Real r = (*inv_rms)[i];
                    const Real* xr = x.data.data() + static_cast<size_t>(i) * n;
                    const Real* gr = g.data.data() + static_cast<size_t>(i) * n;
                    if (t.wants_grad(a)) {
                      // dx_j = r*g_j*gain_j - (r^3/n) * x_j * sum_k g_k*gain_k*x_k
                      Real dot = 0;
                      for (int j = 0; j < n; ++j) dot += gr[j] * gn.data[j] * xr[j];
                      const Real coef = r * r * r * dot / static_cast<Real>(n);
                      auto& ga = t.grad_buf(a);
                      Real* gar = ga.data.data() + static_cast<size_t>(i) * n;
                      for (int j = 0; j < n; ++j)
                        gar[j] += r * gr[j] * gn.data[j] - coef * xr[j];
                    }
                    if (t.wants_grad(gain)) {
                      auto& gg = t.grad_buf(gain);
                      for (int j = 0; j < n; ++j) gg.data[j] += gr[j] * xr[j] * r;
                    }
                  }
                });
  }

  Ref gelu(Ref a) {
    const auto& va = values_[a];
    Tensor<Real> out = va;
    for (auto& x : out.data) {
      const double xd = static_cast<double>(x);
      x = static_cast<Real>(0.5 * xd * (1.0 + std::erf(xd * 0.7071067811865475244)));
    }
    return push("gelu", std::move(out), {a}, any_grad({a}),
                [a](Tape& t, Ref self) {
                  if (!t.wants_grad(a)) return;
                  const auto& g = t.pass_grad(self);
                  const auto& x = t.value(a);
                  auto& ga = t.grad_buf(a);
                  for (size_t i = 0; i < g.data.size(); ++i) {
                    const double xd = static_cast<double>(x.data[i]);
                    const double cdf = 0.5 * (1.0 + std::erf(xd * 0.7071067811865475244));
                    const double pdf = std::exp(-0.5 * xd * xd) * 0.3989422804014326779;
                    ga.data[i] += g.data[i] * static_cast<Real>(cdf + xd * pdf);
                  }
                });
  }

  // rotate each row of x by its position triple (see rope3d.hpp); the map
  // is orthogonal per row, so backward rotates the gradient by the
  // negated angles
  Ref rope_rows(Ref a, std::vector<PositionTriple> positions, RopeConfig cfg) {
    const auto& va = values_[a];
    if (va.shape.size() != 2 || va.cols() != cfg.head_dim)
      throw ShapeError("rope_rows: shape " + shape_str(va.shape) + " vs head_dim " +
                       std::to_string(cfg.head_dim));
    if (positions.size() != static_cast<size_t>(va.rows()))
      throw ShapeError("rope_rows: one position per row required");
    const int m = va.rows(), n = va.cols();
    Tensor<Real> out = va;
    for (int i = 0; i < m; ++i)
      rotate_in_place(out.data.data() + static_cast<size_t>(i) * n, positions[i], cfg);
    auto pos = std::make_shared<std::vector<PositionTriple>>(std::move(positions));
    return push("rope_rows", std::move(out), {a}, any_grad({a}),
                [a, pos, cfg, m, n](Tape& t, Ref self) {
                  if (!t.wants_grad(a)) return;
                  const auto& g = t.pass_grad(self);
                  auto& ga = t.grad_buf(a);
                  std::vector<Real> row(n);
                  for (int i = 0; i < m; ++i) {
                    std::copy_n(g.data.data() + static_cast<size_t>(i) * n, n, row.data());
                    rotate_in_place(row.data(), (*pos)[i], cfg, /*inverse=*/true);
                    for (int j = 0; j < n; ++j) ga.data[static_cast<size_t>(i) * n + j] += row[j];
                  }
                });
  }

  // ---- gathers, slices, concatenation ----

  Ref embedding(Ref table, std::vector<int> ids) {
    const auto& vt = values_[table];
    if (vt.shape.size() != 2) throw ShapeError("embedding: table must be rank 2");
    const int v = vt.rows(), d = vt.cols();
    for (int id : ids)
      if (id < 0 || id >= v)
        throw DomainError("embedding id " + std::to_string(id) + " out of range [0," +
                          std::to_string(v) + ")");
    const int m = static_cast<int>(ids.size());
    Tensor<Real> out({m, d});
    for (int i = 0; i < m; ++i)
      std::copy_n(vt.data.data() + static_cast<size_t>(ids[i]) * d, d,
                  out.data.data() + static_cast<size_t>(i) * d);
    auto id_ptr = std::make_shared<std::vector<int>>(std::move(ids));
    return push("embedding", std::move(out), {table}, any_grad({table}),
                [table, id_ptr, d](Tape& t, Ref self) {
                  if (!t.wants_grad(table)) return;
                  const auto& g = t.pass_grad(self);
                  auto& gt = t.grad_buf(table);
                  for (size_t i = 0; i < id_ptr->size(); ++i) {
                    Real* dst = gt.data.data() + static_cast<size_t>((*id_ptr)[i]) * d;
                    const Real* src = g.data.data() + i * d;
                    for (int j = 0; j < d; ++j) dst[j] += src[j];
                  }
                });
  }

  Ref slice_rows(Ref a, int begin, int len) {
    const auto& va = values_[a];
    if (va.shape.size() != 2 || begin < 0 || len <= 0 || begin + len > va.rows())
      throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," +
                       std::to_string(begin + len) + ") of " + shape_str(va.shape));
    const int n = va.cols();
    Tensor<Real> out({len, n});
    std::copy_n(va.data.data() + static_cast<size_t>(begin) * n, static_cast<size_t>(len) * n,
                out.data.data());
    return push("slice_rows", std::move(out), {a}, any_grad({a}),
                [a, begin, len, n](Tape& t, Ref self) {
                  if (!t.wants_grad(a)) return;
                  const auto& g = t.pass_grad(self);
                  auto& ga = t.grad_buf(a);
                  for (size_t i = 0; i < static_cast<size_t>(len) * n; ++i)
                    ga.data[static_cast<size_t>(begin) * n + i] += g.data[i];
                });
  }

  Ref concat_rows(const std::vector<Ref>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no parts");
    const int n = values_[parts[0]].cols();
    int m = 0;
    for (Ref p : parts) {
      if (values_[p].shape.size() != 2 || values_[p].cols() != n)
        throw ShapeError("concat_rows: column mismatch at " + shape_str(values_[p].shape));
      m += values_[p].rows();
    }
    Tensor<Real> out({m, n});
    size_t off = 0;
    for (Ref p : parts) {
      std::copy_n(values_[p].data.data(), values_[p].data.size(), out.data.data() + off);
      off += values_[p].data.size();
    }
    bool rg = any_grad(parts);
    auto ps = std::make_shared<std::vector<Ref>>(parts);
    return push("concat_rows", std::move(out), parts, rg,
                [ps, n](Tape& t, Ref self) {
                  const auto& g = t.pass_grad(self);
                  size_t off = 0;
                  for (Ref p : *ps) {
                    const size_t count = t.value(p).data.size();
                    if (t.wants_grad(p)) {
                      auto& gp = t.grad_buf(p);
                      for (size_t i = 0; i < count; ++i) gp.data[i] += g.data[off + i];
                    }
                    off += count;
                  }
                });
  }

  Ref slice_cols(Ref a, int begin, int len) {
    const auto& va = values_[a];
    if (va.shape.size() != 2 || begin < 0 || len <= 0 || begin + len > va.cols())
      throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," +
                       std::to_string(begin + len) + ") of " + shape_str(va.shape));
    const int m = va.rows(), n = va.cols();
    Tensor<Real> out({m, len});
    for (int i = 0; i < m; ++i)
      std::copy_n(va.data.data() + static_cast<size_t>(i) * n + begin, len,
                  out.data.data() + static_cast<size_t>(i) * len);
    return push("slice_cols", std::move(out), {a}, any_grad({a}),
                [a, begin, len, m, n](Tape& t, Ref self) {
                  if (!t.wants_grad(a)) return;
                  const auto& g = t.pass_grad(self);
                  auto& ga = t.grad_buf(a);
                  for (int i = 0; i < m; ++i)
                    for (int j = 0; j < len; ++j)
                      ga.data[static_cast<size_t>(i) * n + begin + j] +=
                          g.data[static_cast<size_t>(i) * len + j];
                });
  }

  Ref concat_cols(const std::vector<Ref>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no parts");
    const int m = values_[parts[0]].rows();
    int n = 0;
    for (Ref p : parts) {
      if (values_[p].shape.size() != 2 || values_[p].rows() != m)
        throw ShapeError("concat_cols: row mismatch at " + shape_str(values_[p].shape));
      n += values_[p].cols();
    }
    Tensor<Real> out({m, n});
    int coff = 0;
    for (Ref p : parts) {
      const int pc = values_[p].cols();
      for (int i = 0; i < m; ++i)
        std::copy_n(values_[p].data.data() + static_cast<size_t>(i) * pc, pc,
                    out.data.data() + static_cast<size_t>(i) * n + coff);
      coff += pc;
    }
    auto ps = std::make_shared<std::vector<Ref>>(parts);
    return push("concat_cols", std::move(out), parts, any_grad(parts),
                [ps, m, n](Tape& t, Ref self) {
                  const auto& g = t.pass_grad(self);
                  int coff = 0;
                  for (Ref p : *ps) {
                    const int pc = t.value(p).cols();
                    if (t.wants_grad(p)) {
                      auto& gp = t.grad_buf(p);
                      for (int i = 0; i < m; ++i)
                        for (int j = 0; j < pc; ++j)
                          gp.data[static_cast<size_t>(i) * pc + j] +=
                              g.data[static_cast<size_t>(i) * n + coff + j];
                    }
                    coff += pc;
                  }
                });
  }

  // ---- reductions and losses ----

  Ref sum(Ref a) {
    const auto& va = values_[a];
    Real s = 0;
    for (Real v : va.data) s += v;
    return push("sum", Tensor<Real>::scalar(s), {a}, any_grad({a}),
                [a](Tape& t, Ref self) {
                  if (!t.wants_grad(a)) return;
                  const Real g = t.pass_grad(self).data[0];
                  auto& ga = t.grad_buf(a);
                  for (auto& x : ga.data) x += g;
                });
  }

  Ref mse(Ref a, Ref b) {
    require_same_shape(a, b, "mse");
    const auto& va = values_[a];
    const auto& vb = values_[b];
    const size_t count = va.numel();
    double s = 0;
    for (size_t i = 0; i < count; ++i) {
      const double d = static_cast<double>(va.data[i]) - static_cast<double>(vb.data[i]);
      s += d * d;
    }
    return push("mse", Tensor<Real>::scalar(static_cast<Real>(s / count)), {a, b},
                any_grad({a, b}),
                [a, b, count](Tape& t, Ref self) {
                  const Real g = t.pass_grad(self).data[0];
                  const auto& va2 = t.value(a);
                  const auto& vb2 = t.value(b);
                  const Real c = g * Real(2) / static_cast<Real>(count);
                  if (t.wants_grad(a)) {
                    auto& ga = t.grad_buf(a);
                    for (size_t i = 0; i < count; ++i)
                      ga.data[i] += c * (va2.data[i] - vb2.data[i]);
                  }
                  if (t.wants_grad(b)) {
                    auto& gb = t.grad_buf(b);
                    for (size_t i = 0; i < count; ++i)
                      gb.data[i] -= c * (va2.data[i] - vb2.data[i]);
                  }
                });
  }

  // token-mean cross entropy with integer targets
  Ref cross_entropy_logits(Ref logits, std::vector<int> targets) {
    const auto& vl = values_[logits];
    if (vl.shape.size() != 2) throw ShapeError("cross_entropy_logits: need rank 2 logits");
    const int m = vl.rows(), v = vl.cols();
    if (static_cast<int>(targets.size()) != m)
      throw ShapeError("cross_entropy_logits: one target per row required");
    for (int tgt : targets)
      if (tgt < 0 || tgt >= v) throw DomainError("cross_entropy_logits: target out of range");
    double total = 0;
    for (int i = 0; i < m; ++i) {
      const Real* x = vl.data.data() + static_cast<size_t>(i) * v;
      Real mx = x[0];
      for (int j = 1; j < v; ++j) mx = std::max(mx, x[j]);
      double se = 0;
      for (int j = 0; j < v; ++j) se += std::exp(static_cast<double>(x[j] - mx));
      total += std::log(se) + static_cast<double>(mx) - static_cast<double>(x[targets[i]]);
    }
    auto tg = std::make_shared<std::vector<int>>(std::move(targets));
    return push("cross_entropy_logits", Tensor<Real>::scalar(static_cast<Real>(total / m)),
                {logits}, any_grad({logits}),
                [logits, tg, m, v](Tape& t, Ref self) {
                  if (!t.wants_grad(logits)) return;
                  const Real g = t.pass_grad(self).data[0];
                  const auto& vl2 = t.value(logits);
                  auto& gl = t.grad_buf(logits);
                  const Real inv_m = Real(1) / static_cast<Real>(m);
                  for (int i = 0; i < m; ++i) {
                    const Real* x = vl2.data.data() + static_cast<size_t>(i) * v;
                    Real mx = x[0];
                    for (int j = 1; j < v; ++j) mx = std::max(mx, x[j]);
                    double se = 0;
                    for (int j = 0; j < v; ++j) se += std::exp(static_cast<double>(x[j] - mx));
                    Real* gr = gl.data.data() + static_cast<size_t>(i) * v;
                    for (int j = 0; j < v; ++j) {
                      const Real p =
                          static_cast<Real>(std::exp(static_cast<double>(x[j] - mx)) / se);
                      gr[j] += g * inv_m * (p - Real((*tg)[i] == j ? 1 : 0));
                    }
                  }
                });
  }

  // Extension point: arbitrary forward value with a caller-provided
  // backward. Used by tests for fault injection; backward receives the
  // output gradient and the input refs.
  Ref custom(std::vector<Ref> inputs, Tensor<Real> value,
             std::function<void(Tape&, const Tensor<Real>&, const std::vector<Ref>&)> back) {
    auto ins = std::make_shared<std::vector<Ref>>(inputs);
    return push("custom", std::move(value), inputs, any_grad(inputs),
                [ins, back](Tape& t, Ref self) { back(t, t.pass_grad(self), *ins); });
  }

  // ---- backward ----

  void backward(Ref loss) {
    check_ref(loss);
    if (!values_[loss].is_scalar())
      throw DomainError("backward: loss must be scalar, got shape " +
                        shape_str(values_[loss].shape));
    pass_grads_.assign(nodes_.size(), Tensor<Real>{});
    touched_.assign(nodes_.size(), 0);
    if (!nodes_[loss].requires_grad) return;  // loss depends on no trainable leaf
    grad_buf(loss).data[0] = Real(1);
    for (Ref i = loss; i >= 0; --i) {
      if (!touched_[i]) continue;
      if (nodes_[i].backward) {
        nodes_[i].backward(*this, i);
      } else {
        // leaf: fold the pass gradient into the persistent accumulator
        auto it = leaf_grads_.find(i);
        if (it == leaf_grads_.end())
          it = leaf_grads_.emplace(i, Tensor<Real>(values_[i].shape)).first;
        for (size_t j = 0; j < pass_grads_[i].data.size(); ++j)
          it->second.data[j] += pass_grads_[i].data[j];
      }
    }
  }

  bool has_grad(Ref r) const { return leaf_grads_.count(r) != 0; }
  const Tensor<Real>& grad(Ref r) const {
    auto it = leaf_grads_.find(r);
    if (it == leaf_grads_.end())
      throw DomainError("no gradient recorded for node " + std::to_string(r));
    return it->second;
  }
  void zero_grads() { leaf_grads_.clear(); }

  // ---- helpers used from backward closures ----

  const Tensor<Real>& pass_grad(Ref r) const { return pass_grads_[r]; }
  bool wants_grad(Ref r) const { return nodes_[r].requires_grad; }
  Tensor<Real>& grad_buf(Ref r) {
    touched_[r] = 1;
    if (pass_grads_[r].data.empty()) pass_grads_[r] = Tensor<Real>(values_[r].shape);
    return pass_grads_[r];
  }
  void accumulate(Ref r, const Real* g) {
    if (!wants_grad(r)) return;
    auto& buf = grad_buf(r);
    for (size_t i = 0; i < buf.data.size(); ++i) buf.data[i] += g[i];
  }

 private:
  struct Node {
    const char* op;
    bool requires_grad;
    BackwardFn backward;
  };

  Ref push(const char* op, Tensor<Real> value, const std::vector<Ref>& inputs,
           bool requires_grad, BackwardFn backward) {
    for (Ref r : inputs) check_ref(r);
#ifndef NDEBUG
    if (op[0] != 'l' && !value.all_finite())
      throw DomainError(std::string("non-finite value produced by op '") + op + "'");
#endif
    nodes_.push_back({op, requires_grad, std::move(backward)});
    values_.push_back(std::move(value));
    return static_cast<Ref>(nodes_.size() - 1);
  }

  Ref check_ref(Ref r) const {
    if (r < 0 || static_cast<size_t>(r) >= nodes_.size())
      throw DomainError("invalid tape ref " + std::to_string(r));
    return r;
  }

  bool any_grad(const std::vector<Ref>& refs) const {
    for (Ref r : refs)
      if (nodes_[r].requires_grad) return true;
    return false;
  }

  void require_same_shape(Ref a, Ref b, const char* what) const {
    if (values_[a].shape != values_[b].shape)
      throw ShapeError(std::string(what) + ": shapes " + shape_str(values_[a].shape) +
                       " and " + shape_str(values_[b].shape) + " differ");
  }

  std::vector<Node> nodes_;
  std::vector<Tensor<Real>> values_;
  std::vector<Tensor<Real>> pass_grads_;
  std::vector<uint8_t> touched_;
  std::unordered_map<Ref, Tensor<Real>> leaf_grads_;
};

// ---- gradient checking -----------------------------------------------

// Builds the graph with `f`, compares tape gradients against central
// finite differences. Returns the max over elements of
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
template <class Real>
Real grad_check(
    const std::function<typename Tape<Real>::Ref(Tape<Real>&, const std::vector<typename Tape<Real>::Ref>&)>& f,
    std::vector<Tensor<Real>> inputs, Real eps) {
  using Ref = typename Tape<Real>::Ref;
  auto eval = [&](const std::vector<Tensor<Real>>& xs, bool with_grad,
                  std::vector<Tensor<Real>>* grads_out) -> Real {
    Tape<Real> tape;
    std::vector<Ref> refs;
    refs.reserve(xs.size());
    for (const auto& x : xs) refs.push_back(tape.leaf(x, with_grad));
    const Ref loss = f(tape, refs);
    if (!tape.value(loss).is_scalar())
      throw DomainError("grad_check: builder must return a scalar loss");
    const Real out = tape.value(loss).data[0];
    if (with_grad && grads_out) {
      tape.backward(loss);
      grads_out->clear();
      for (size_t i = 0; i < refs.size(); ++i)
        grads_out->push_back(tape.has_grad(refs[i]) ? tape.grad(refs[i])
                                                    : Tensor<Real>(xs[i].shape));
    }
    return out;
  };

  // reproducibility probe: the builder must be deterministic
  const Real probe1 = eval(inputs, false, nullptr);
  const Real probe2 = eval(inputs, false, nullptr);
  if (std::memcmp(&probe1, &probe2, sizeof(Real)) != 0)
    throw ReproducibilityError("grad_check: graph builder is not deterministic");

  std::vector<Tensor<Real>> analytic;
  eval(inputs, true, &analytic);

  Real max_err = 0;
  for (size_t xi = 0; xi < inputs.size(); ++xi) {
    for (size_t j = 0; j < inputs[xi].data.size(); ++j) {
      const Real keep = inputs[xi].data[j];
      inputs[xi].data[j] = keep + eps;
      const double fp = static_cast<double>(eval(inputs, false, nullptr));
      inputs[xi].data[j] = keep - eps;
      const double fm = static_cast<double>(eval(inputs, false, nullptr));
      inputs[xi].data[j] = keep;
      const double numeric = (fp - fm) / (2.0 * static_cast<double>(eps));
      const double a = static_cast<double>(analytic[xi].data[j]);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      max_err = std::max(max_err, static_cast<Real>(std::abs(a - numeric) / denom));
    }
  }
  return max_err;
}

// single-input convenience form
template <class Real>
Real grad_check(const std::function<typename Tape<Real>::Ref(Tape<Real>&, typename Tape<Real>::Ref)>& f,
                const Tensor<Real>& x, Real eps) {
  return grad_check<Real>(
      [&f](Tape<Real>& t, const std::vector<typename Tape<Real>::Ref>& refs) {
        return f(t, refs[0]);
      },
      {x}, eps);
}

}  // namespace voxmot

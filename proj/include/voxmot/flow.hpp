#pragma once

#include <functional>

#include "voxmot/autodiff.hpp"
#include "voxmot/common.hpp"
#include "voxmot/tensor.hpp"

namespace voxmot {

struct GuidanceConfig {
  double dropout_p = 0.1;  // training-time condition drop probability
  double weight = 3.0;     // inference guidance scale
  double shift = 1.0;      // timestep shift

  void validate() const {
    if (dropout_p < 0.0 || dropout_p >= 1.0) throw DomainError("guidance dropout_p must be in [0, 1)");
    if (shift < 1.0) throw DomainError("timestep shift must be >= 1");
  }
};

// linear probability path x_t = (1 - t) x0 + t x1
template <class Real>
Tensor<Real> interpolate(const Tensor<Real>& x0, const Tensor<Real>& x1, double t) {
  if (x0.shape != x1.shape)
    throw ShapeError("interpolate: shapes " + shape_str(x0.shape) + " and " +
                     shape_str(x1.shape) + " differ");
  if (t < 0.0 || t > 1.0) throw DomainError("interpolate: t must be in [0, 1]");
  Tensor<Real> xt(x0.shape);
  for (size_t i = 0; i < xt.data.size(); ++i)
    xt.data[i] = static_cast<Real>((1.0 - t) * x0.data[i] + t * x1.data[i]);
  return xt;
}

// velocity regression target is x1 - x0
template <class Real>
Tensor<Real> velocity_target(const Tensor<Real>& x0, const Tensor<Real>& x1) {
  if (x0.shape != x1.shape) throw ShapeError("velocity_target: shape mismatch");
  Tensor<Real> v(x0.shape);
  for (size_t i = 0; i < v.data.size(); ++i) v.data[i] = x1.data[i] - x0.data[i];
  return v;
}

// mean squared error against the velocity target, on the tape
template <class Real>
typename Tape<Real>::Ref cfm_loss(Tape<Real>& tape, typename Tape<Real>::Ref v_pred,
                                  const Tensor<Real>& x0, const Tensor<Real>& x1) {
  return tape.mse(v_pred, tape.leaf(velocity_target(x0, x1)));
}

// plain value form used by samplers and tests
template <class Real>
Real cfm_loss_value(const Tensor<Real>& v_pred, const Tensor<Real>& x0, const Tensor<Real>& x1) {
  const Tensor<Real> target = velocity_target(x0, x1);
  if (v_pred.shape != target.shape) throw ShapeError("cfm_loss: shape mismatch");
  double s = 0;
  for (size_t i = 0; i < target.data.size(); ++i) {
    const double d = static_cast<double>(v_pred.data[i]) - static_cast<double>(target.data[i]);
    s += d * d;
  }
  return static_cast<Real>(s / target.data.size());
}

// monotone reparameterization t = s u / (1 + (s - 1) u); fixes both
// endpoints and biases samples toward high-noise times for s > 1
inline double shift_t(double u, double s) {
  if (u < 0.0 || u > 1.0) throw DomainError("shift_t: u must be in [0, 1]");
  if (s < 1.0) throw DomainError("shift_t: s must be >= 1");
  return s * u / (1.0 + (s - 1.0) * u);
}

// classifier-free guidance combination; exact at the w=0 and w=1 endpoints
template <class Real>
Tensor<Real> guided_velocity(const Tensor<Real>& v_cond, const Tensor<Real>& v_uncond, double w) {
  if (v_cond.shape != v_uncond.shape) throw ShapeError("guided_velocity: shape mismatch");
  if (w == 1.0) return v_cond;
  if (w == 0.0) return v_uncond;
  Tensor<Real> v(v_cond.shape);
  for (size_t i = 0; i < v.data.size(); ++i)
    v.data[i] = static_cast<Real>(v_uncond.data[i] +
                                  w * (static_cast<double>(v_cond.data[i]) - v_uncond.data[i]));
  return v;
}

// Explicit Euler over the (possibly shifted) time grid from t=0 noise:
// x <- x + (t_{k+1} - t_k) v(x, t_k).
template <class Real>
Tensor<Real> euler_sample(const std::function<Tensor<Real>(const Tensor<Real>&, double)>& velocity,
                          Tensor<Real> x, int steps, double shift = 1.0) {
  if (steps < 1) throw DomainError("euler_sample: need at least one step");
  for (int k = 0; k < steps; ++k) {
    const double t0 = shift_t(static_cast<double>(k) / steps, shift);
    const double t1 = shift_t(static_cast<double>(k + 1) / steps, shift);
    const Tensor<Real> v = velocity(x, t0);
    if (v.shape != x.shape) throw ShapeError("euler_sample: velocity shape mismatch");
    const Real dt = static_cast<Real>(t1 - t0);
    for (size_t i = 0; i < x.data.size(); ++i) x.data[i] += dt * v.data[i];
  }
  return x;
}

}  // namespace voxmot

// Shared gradient-check harness. Central differences in float32 carry
// forward-rounding noise of roughly ulp*|loss|/step, so test points are
// rejection-sampled until every nonzero analytic gradient element clears a
// magnitude floor; otherwise the relative-error metric measures noise, not
// the backward rule under test.
#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "voxmot/autodiff.hpp"
#include "voxmot/rng.hpp"
#include "voxmot/tensor.hpp"

namespace testutil {

template <class Real>
struct CheckSettings {
  Real eps;
  Real tol;
  Real min_grad;
};

template <class Real>
CheckSettings<Real> default_check_settings() {
  if constexpr (sizeof(Real) == 4)
    return {Real(1e-2), Real(1e-3), Real(5e-2)};
  else
    return {Real(1e-6), Real(1e-5), Real(1e-4)};
}

template <class Real>
using Builder = std::function<typename voxmot::Tape<Real>::Ref(
    voxmot::Tape<Real>&, const std::vector<typename voxmot::Tape<Real>::Ref>&)>;

template <class Real>
using InputGen = std::function<std::vector<voxmot::Tensor<Real>>(uint64_t attempt)>;

// Runs grad_check at a well-conditioned point. `gen` must be deterministic
// per attempt index.
template <class Real>
Real conditioned_grad_check(const Builder<Real>& f, const InputGen<Real>& gen,
                            const CheckSettings<Real>& s, const std::string& what) {
  // callers may tighten/loosen the floor through s.min_grad
  using Ref = typename voxmot::Tape<Real>::Ref;
  for (uint64_t attempt = 0; attempt < 500; ++attempt) {
    std::vector<voxmot::Tensor<Real>> inputs = gen(attempt);
    voxmot::Tape<Real> tape;
    std::vector<Ref> refs;
    for (const auto& x : inputs) refs.push_back(tape.leaf(x, true));
    const Ref loss = f(tape, refs);
    tape.backward(loss);
    Real min_nonzero = std::numeric_limits<Real>::max();
    bool any = false;
    for (Ref r : refs) {
      if (!tape.has_grad(r)) continue;
      for (Real g : tape.grad(r).data) {
        if (g == Real(0)) continue;
        any = true;
        min_nonzero = std::min(min_nonzero, std::abs(g));
      }
    }
    if (!any || min_nonzero < s.min_grad) continue;
    return voxmot::grad_check<Real>(f, inputs, s.eps);
  }
  throw std::runtime_error("no well-conditioned test point found for " + what);
}

// One registered-op check case: name + input generator + graph builder.
template <class Real>
struct OpCase {
  std::string name;
  InputGen<Real> gen;
  Builder<Real> f;
  Real min_grad_override = Real(0);  // 0: use the default floor
};

template <class Real>
voxmot::Tensor<Real> randn_t(std::vector<int> shape, uint64_t seed) {
  voxmot::Rng rng(seed);
  return voxmot::Tensor<Real>::randn(std::move(shape), rng);
}

// uniform in (0.5, 1.5): keeps matmul-chain gradients free of sign
// cancellation where a positive path is wanted
template <class Real>
voxmot::Tensor<Real> randpos_t(std::vector<int> shape, uint64_t seed) {
  voxmot::Rng rng(seed);
  voxmot::Tensor<Real> t(std::move(shape));
  for (auto& v : t.data) v = static_cast<Real>(0.5 + rng.uniform());
  return t;
}

// centered with small scale: readout weights that keep |loss| low so the
// fp32 forward noise stays well under the check tolerance
template <class Real>
voxmot::Tensor<Real> randsmall_t(std::vector<int> shape, uint64_t seed) {
  voxmot::Rng rng(seed);
  return voxmot::Tensor<Real>::randn(std::move(shape), rng, Real(0.5));
}

// The full per-op case list shared by the unit sweep and the acceptance
// suite. `seed` varies the sampled inputs.
template <class Real>
std::vector<OpCase<Real>> registered_op_cases(uint64_t seed) {
  using Tape = voxmot::Tape<Real>;
  using Ref = typename Tape::Ref;
  std::vector<OpCase<Real>> cases;
  // draw spec: one char per input; 'p' positive band, 'n' standard normal,
  // 'c' centered half-scale normal
  auto add = [&](std::string name, std::vector<std::vector<int>> shapes, std::string draws,
                 Builder<Real> f, Real min_grad_override = Real(0)) {
    InputGen<Real> gen = [shapes, draws, seed, name](uint64_t attempt) {
      std::vector<voxmot::Tensor<Real>> out;
      for (size_t i = 0; i < shapes.size(); ++i) {
        const uint64_t s =
            voxmot::hash_combine(voxmot::hash_combine(seed, voxmot::hash_name(name)),
                                 attempt * 131 + i);
        const char d = draws[i];
        out.push_back(d == 'p'   ? randpos_t<Real>(shapes[i], s)
                      : d == 'c' ? randsmall_t<Real>(shapes[i], s)
                                 : randn_t<Real>(shapes[i], s));
      }
      return out;
    };
    cases.push_back({std::move(name), std::move(gen), std::move(f), min_grad_override});
  };

  voxmot::Rng pr(seed + 5);
  std::vector<voxmot::PositionTriple> pos;
  for (int i = 0; i < 4; ++i)
    pos.push_back({static_cast<int32_t>(pr.uniform_int(12)),
                   static_cast<int32_t>(pr.uniform_int(12)),
                   static_cast<int32_t>(pr.uniform_int(12))});
  const voxmot::RopeConfig rope(6);
  const std::vector<uint8_t> expert = {0, 1, 0, 1};

  add("add", {{3, 4}, {3, 4}}, "nn",
      [](Tape& t, const std::vector<Ref>& i) { return t.sum(t.add(i[0], i[1])); });
  add("sub", {{3, 4}, {3, 4}}, "nn",
      [](Tape& t, const std::vector<Ref>& i) { return t.sum(t.sub(t.scale(i[0], Real(2)), i[1])); });
  add("mul", {{3, 4}, {3, 4}}, "pp",
      [](Tape& t, const std::vector<Ref>& i) { return t.sum(t.mul(i[0], i[1])); });
  add("scale", {{3, 4}}, "n",
      [](Tape& t, const std::vector<Ref>& i) { return t.sum(t.scale(i[0], Real(1.5))); });
  add("add_row", {{3, 4}, {4}}, "pp",
      [](Tape& t, const std::vector<Ref>& i) { return t.sum(t.gelu(t.add_row(i[0], i[1]))); });
  add("broadcast_row", {{4}, {3, 4}}, "pp",
      [](Tape& t, const std::vector<Ref>& i) { return t.sum(t.mul(t.broadcast_row(i[0], 3), i[1])); });
  add("matmul", {{3, 4}, {4, 2}}, "pp",
      [](Tape& t, const std::vector<Ref>& i) { return t.sum(t.matmul(i[0], i[1])); });
  add("transpose", {{3, 4}, {4, 3}}, "pp",
      [](Tape& t, const std::vector<Ref>& i) { return t.sum(t.mul(t.transpose_op(i[0]), i[1])); });
  add("softmax_rows", {{2, 4}, {2, 4}}, "nc",
      [](Tape& t, const std::vector<Ref>& i) { return t.sum(t.mul(t.softmax_rows(i[0]), i[1])); },
      Real(0.02));
  {
    auto mask = std::make_shared<voxmot::AttnMask>();
    mask->n = 4;
    mask->visible = {1, 0, 1, 1, 1, 1, 0, 1, 0, 1, 1, 1, 1, 1, 1, 1};
    std::shared_ptr<const voxmot::AttnMask> cmask = mask;
    add("masked_softmax_rows", {{4, 4}, {4, 4}}, "nc",
        [cmask](Tape& t, const std::vector<Ref>& i) {
          return t.sum(t.mul(t.masked_softmax_rows(i[0], cmask), i[1]));
        },
        Real(0.02));
  }
  add("rms_norm", {{3, 4}, {4}, {3, 4}}, "ppc",
      [](Tape& t, const std::vector<Ref>& i) { return t.sum(t.mul(t.rms_norm(i[0], i[1]), i[2])); });
  add("gelu", {{3, 4}}, "p",
      [](Tape& t, const std::vector<Ref>& i) { return t.sum(t.gelu(i[0])); });
  add("embedding", {{5, 3}, {3, 3}}, "nc",
      [](Tape& t, const std::vector<Ref>& i) {
        return t.sum(t.mul(t.embedding(i[0], {1, 4, 1}), i[1]));
      });
  add("mse", {{3, 4}, {3, 4}}, "nn",
      [](Tape& t, const std::vector<Ref>& i) { return t.mse(i[0], i[1]); });
  // logits drawn from a narrow positive band keep every softmax
  // probability (and so every gradient entry) bounded away from zero
  add("cross_entropy", {{3, 5}}, "p",
      [](Tape& t, const std::vector<Ref>& i) { return t.cross_entropy_logits(i[0], {0, 2, 4}); },
      Real(0.02));
  add("routed_matmul", {{4, 3}, {3, 3}, {3, 3}}, "ppp",
      [expert](Tape& t, const std::vector<Ref>& i) {
        return t.sum(t.routed_matmul(i[0], expert, i[1], i[2]));
      });
  add("rope_rows", {{4, 6}, {4, 6}}, "nc",
      [pos, rope](Tape& t, const std::vector<Ref>& i) {
        return t.sum(t.mul(t.rope_rows(i[0], pos, rope), i[1]));
      });
  add("select_rows", {{4, 3}, {4, 3}, {4, 3}}, "ppp",
      [expert](Tape& t, const std::vector<Ref>& i) {
        return t.sum(t.mul(t.select_rows(expert, i[0], i[1]), i[2]));
      });
  add("slice_concat", {{4, 6}, {4, 6}}, "pc",
      [](Tape& t, const std::vector<Ref>& i) {
        auto a = t.slice_rows(i[0], 0, 2);
        auto b = t.slice_rows(i[0], 2, 2);
        auto c = t.concat_rows({b, a});
        auto d = t.concat_cols({t.slice_cols(c, 3, 3), t.slice_cols(c, 0, 3)});
        return t.sum(t.mul(d, i[1]));
      });
  return cases;
}

}  // namespace testutil

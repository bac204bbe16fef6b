// Independent reference implementations used as test oracles. These must
// stay decoupled from the library code paths they check.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <set>
#include <vector>

#include "voxmot/blocks.hpp"
#include "voxmot/tensor.hpp"

namespace oracle {

// plain triple-loop matrix product
template <class Real>
voxmot::Tensor<Real> naive_matmul(const voxmot::Tensor<Real>& a,
                                  const voxmot::Tensor<Real>& b) {
  const int m = a.rows(), k = a.cols(), n = b.cols();
  voxmot::Tensor<Real> c({m, n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      Real s = 0;
      for (int p = 0; p < k; ++p) s += a.at(i, p) * b.at(p, j);
      c.at(i, j) = s;
    }
  return c;
}

// Literal restatement of the block-visibility rules, classified rule by
// rule for every (query, key) block pair independently:
//   R1 text/image causal within block, image sees same-turn text fully
//   R2 noisy latent: bidirectional self; sees text/image at or before its
//      turn and clean latents that precede it; never another noisy block
//   R3 clean latent: bidirectional self; same prior context as its noisy
//      twin; never any noisy block
//   R4 no block sees any later block
//   R5 later turns see earlier turns' text/image/clean blocks fully,
//      never earlier noisy blocks
inline voxmot::PairVis classify_pair_rules(const voxmot::Block& q, const voxmot::Block& k,
                                           size_t qi, size_t ki) {
  using voxmot::BlockKind;
  using voxmot::PairVis;
  auto before = [](const voxmot::Block& x, const voxmot::Block& y) {
    return x.turn < y.turn ||
           (x.turn == y.turn && voxmot::stage_order(x.kind) < voxmot::stage_order(y.kind));
  };

  // R4
  if (qi != ki && !before(k, q)) return PairVis::Masked;

  if (qi == ki) {
    // self blocks: R1 for text/image, R2/R3 for latents
    if (q.kind == BlockKind::Text || q.kind == BlockKind::Image) return PairVis::Causal;
    return PairVis::BiDir;
  }

  const bool k_is_stream = (k.kind == BlockKind::Text || k.kind == BlockKind::Image);
  const bool k_is_noisy = voxmot::is_noisy(k.kind);
  const bool k_is_clean = voxmot::is_clean_latent(k.kind);

  if (q.kind == BlockKind::Image && k.kind == BlockKind::Text && q.turn == k.turn)
    return PairVis::Full;  // R1
  if (voxmot::is_noisy(q.kind)) {
    // R2
    if (k_is_stream && k.turn <= q.turn) return PairVis::Full;
    if (k_is_clean) return PairVis::Full;
    if (k_is_noisy) return PairVis::Masked;
  }
  if (voxmot::is_clean_latent(q.kind)) {
    // R3: same context as the noisy twin
    if (k_is_stream && k.turn <= q.turn) return PairVis::Full;
    if (k_is_clean) return PairVis::Full;
    if (k_is_noisy) return PairVis::Masked;
  }
  // R5: cross-turn (and remaining same-turn stream) context
  if (k_is_noisy) return PairVis::Masked;
  if (k_is_stream || k_is_clean) return PairVis::Full;
  return PairVis::Masked;
}

// dense mask assembled pair-by-pair from the rules above
inline std::vector<uint8_t> mask_from_rules(const voxmot::BlockTable& table) {
  const int n = table.token_count();
  std::vector<uint8_t> vis(static_cast<size_t>(n) * n, 0);
  for (size_t qi = 0; qi < table.blocks.size(); ++qi)
    for (size_t ki = 0; ki < table.blocks.size(); ++ki) {
      const auto& qb = table.blocks[qi];
      const auto& kb = table.blocks[ki];
      const voxmot::PairVis v = classify_pair_rules(qb, kb, qi, ki);
      if (v == voxmot::PairVis::Masked) continue;
      for (int q = qb.begin; q < qb.end; ++q)
        for (int k = kb.begin; k < kb.end; ++k) {
          if (v == voxmot::PairVis::Causal && k > q) continue;
          vis[static_cast<size_t>(q) * n + k] = 1;
        }
    }
  return vis;
}

}  // namespace oracle

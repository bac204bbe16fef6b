#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "voxmot/blocks.hpp"
#include "voxmot/common.hpp"

namespace voxmot {

struct PositionTriple {
  int32_t px = 0, py = 0, pz = 0;

  int32_t axis(int a) const { return a == 0 ? px : (a == 1 ? py : pz); }
  bool operator==(const PositionTriple&) const = default;
};

inline constexpr int32_t kPositionBudget = 1 << 20;

// Rotary configuration for one attention head. The head dimension is split
// into D/2 rotation pairs; pair k rotates dims (2k, 2k+1) and is owned by
// axis k mod 3, so the x/y/z frequencies stay interleaved across the vector.
struct RopeConfig {
  int head_dim = 24;
  double base_freq = 10000.0;

  RopeConfig() = default;
  RopeConfig(int dim, double base = 10000.0) : head_dim(dim), base_freq(base) {
    if (dim <= 0 || dim % 6 != 0)
      throw ConfigError("rope head_dim must be a positive multiple of 6, got " +
                        std::to_string(dim));
  }

  int pairs() const { return head_dim / 2; }
  static int axis_of_pair(int k) { return k % 3; }
  double theta(int k) const {
    return std::pow(base_freq, -2.0 * static_cast<double>(k) / static_cast<double>(head_dim));
  }
};

// In-place rotation of one head vector. Angles are computed in double
// regardless of the storage type.
template <class Real>
inline void rotate_in_place(Real* v, const PositionTriple& p, const RopeConfig& cfg,
                            bool inverse = false) {
  const int np = cfg.pairs();
  for (int k = 0; k < np; ++k) {
    const double pos = static_cast<double>(p.axis(RopeConfig::axis_of_pair(k)));
    double angle = pos * cfg.theta(k);
    if (inverse) angle = -angle;
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    const double u = static_cast<double>(v[2 * k]);
    const double w = static_cast<double>(v[2 * k + 1]);
    v[2 * k] = static_cast<Real>(u * c - w * s);
    v[2 * k + 1] = static_cast<Real>(u * s + w * c);
  }
}

template <class Real>
inline std::vector<Real> apply_mrope(std::vector<Real> v, const PositionTriple& p,
                                     const RopeConfig& cfg) {
  if (static_cast<int>(v.size()) != cfg.head_dim)
    throw ShapeError("rope vector length " + std::to_string(v.size()) +
                     " does not match head_dim " + std::to_string(cfg.head_dim));
  rotate_in_place(v.data(), p, cfg);
  return v;
}

template <class Real>
inline std::vector<Real> apply_rope1d(std::vector<Real> v, int32_t pos, const RopeConfig& cfg) {
  return apply_mrope(std::move(v), PositionTriple{pos, pos, pos}, cfg);
}

// Positions for one block of a packed sequence. Mesh tokens carry their
// voxel coordinate; text/image tokens share a running stream index that
// skips mesh tokens, so dropping latent blocks never shifts text positions.
// Every axis gets the same per-turn offset, separating turns in position
// space while keeping intra-turn geometry relative.
inline int32_t turn_offset(int turn, int grid_n) { return turn * grid_n * 4; }

inline std::vector<PositionTriple> positions_for_block(
    BlockKind kind, int turn, int grid_n, int token_count,
    const std::vector<std::array<int, 3>>* coords, int32_t& stream_index) {
  const int32_t off = turn_offset(turn, grid_n);
  std::vector<PositionTriple> out;
  out.reserve(token_count);
  if (is_latent(kind)) {
    if (coords == nullptr || static_cast<int>(coords->size()) != token_count)
      throw PackError("latent block requires one voxel coordinate per token");
    for (const auto& c : *coords) {
      PositionTriple p{c[0] + off, c[1] + off, c[2] + off};
      if (p.px < 0 || p.py < 0 || p.pz < 0 || p.px >= kPositionBudget ||
          p.py >= kPositionBudget || p.pz >= kPositionBudget)
        throw DomainError("voxel position exceeds position budget");
      out.push_back(p);
    }
  } else {
    for (int i = 0; i < token_count; ++i) {
      const int32_t v = stream_index++ + off;
      if (v < 0 || v >= kPositionBudget)
        throw DomainError("stream position exceeds position budget");
      out.push_back(PositionTriple{v, v, v});
    }
  }
  return out;
}

}  // namespace voxmot

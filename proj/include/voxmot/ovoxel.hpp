#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "voxmot/common.hpp"
#include "voxmot/rng.hpp"

namespace voxmot {

inline constexpr int kShapeFeatDim = 8;  // signed distance at the 8 cell corners
inline constexpr int kMatFeatDim = 4;    // (r, g, b, roughness)

using Coord = std::array<int, 3>;

struct Voxel {
  Coord p{0, 0, 0};
  std::array<float, kShapeFeatDim> f_shape{};
  std::array<float, kMatFeatDim> f_mat{};
};

// canonical order: lexicographic by (z, y, x)
inline bool coord_less(const Coord& a, const Coord& b) {
  if (a[2] != b[2]) return a[2] < b[2];
  if (a[1] != b[1]) return a[1] < b[1];
  return a[0] < b[0];
}

// Sparse voxel asset: per-voxel feature tuples anchored to an N^3 grid.
// Construction canonicalizes ordering and enforces the invariants (all
// coordinates in range and distinct, list non-empty).
class OVoxelAsset {
 public:
  OVoxelAsset(int grid_n, std::vector<Voxel> voxels) : grid_n_(grid_n), voxels_(std::move(voxels)) {
    if (grid_n_ <= 0 || grid_n_ > 0xffff) throw DomainError("grid_n out of range");
    if (voxels_.empty()) throw EmptyAssetError("asset must contain at least one voxel");
    for (const Voxel& v : voxels_)
      for (int a = 0; a < 3; ++a)
        if (v.p[a] < 0 || v.p[a] >= grid_n_)
          throw BoundsError("voxel coordinate (" + std::to_string(v.p[0]) + "," +
                            std::to_string(v.p[1]) + "," + std::to_string(v.p[2]) +
                            ") outside grid of size " + std::to_string(grid_n_));
    std::sort(voxels_.begin(), voxels_.end(),
              [](const Voxel& a, const Voxel& b) { return coord_less(a.p, b.p); });
    for (size_t i = 1; i < voxels_.size(); ++i)
      if (voxels_[i].p == voxels_[i - 1].p)
        throw DomainError("duplicate voxel coordinate in asset");
  }

  int grid_n() const { return grid_n_; }
  const std::vector<Voxel>& voxels() const { return voxels_; }
  size_t count() const { return voxels_.size(); }

  std::set<Coord> coord_set() const {
    std::set<Coord> s;
    for (const Voxel& v : voxels_) s.insert(v.p);
    return s;
  }

  bool operator==(const OVoxelAsset& other) const {
    if (grid_n_ != other.grid_n_ || voxels_.size() != other.voxels_.size()) return false;
    for (size_t i = 0; i < voxels_.size(); ++i) {
      if (voxels_[i].p != other.voxels_[i].p) return false;
      if (voxels_[i].f_shape != other.voxels_[i].f_shape) return false;
      if (voxels_[i].f_mat != other.voxels_[i].f_mat) return false;
    }
    return true;
  }

 private:
  int grid_n_;
  std::vector<Voxel> voxels_;
};

inline double occupancy_iou(const OVoxelAsset& a, const OVoxelAsset& b) {
  const auto sa = a.coord_set();
  const auto sb = b.coord_set();
  size_t inter = 0;
  for (const Coord& c : sa) inter += sb.count(c);
  const size_t uni = sa.size() + sb.size() - inter;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// ---- primitives ---------------------------------------------------------

enum class PrimitiveKind : uint8_t { Box, Sphere, LShape, TorusSlab };

struct PrimitiveSpec {
  PrimitiveKind kind = PrimitiveKind::Box;
  Coord origin{0, 0, 0};   // box / l-shape corner; sphere center; torus (cx, cy, z0)
  Coord size{1, 1, 1};     // box / l-shape extent
  std::array<int, 2> cut{1, 1};  // l-shape removed quadrant offsets (x, y)
  int radius = 1;                // sphere
  std::array<int, 2> ring{1, 2}; // torus-slab (r_min, r_max)
  int height = 1;                // torus-slab slab thickness

  std::string describe() const {
    char buf[160];
    switch (kind) {
      case PrimitiveKind::Box:
        std::snprintf(buf, sizeof buf, "box at (%d,%d,%d) size (%d,%d,%d)", origin[0],
                      origin[1], origin[2], size[0], size[1], size[2]);
        break;
      case PrimitiveKind::Sphere:
        std::snprintf(buf, sizeof buf, "sphere at (%d,%d,%d) radius %d", origin[0], origin[1],
                      origin[2], radius);
        break;
      case PrimitiveKind::LShape:
        std::snprintf(buf, sizeof buf, "l shape at (%d,%d,%d) size (%d,%d,%d) cut (%d,%d)",
                      origin[0], origin[1], origin[2], size[0], size[1], size[2], cut[0],
                      cut[1]);
        break;
      case PrimitiveKind::TorusSlab:
        std::snprintf(buf, sizeof buf, "torus slab at (%d,%d) z (%d,%d) radius (%d,%d)",
                      origin[0], origin[1], origin[2], height, ring[0], ring[1]);
        break;
    }
    return buf;
  }

  std::string caption() const {
    return (kind == PrimitiveKind::LShape ? "an " : "a ") + describe();
  }
};

namespace detail {

inline bool primitive_occupied(const PrimitiveSpec& s, const Coord& c) {
  switch (s.kind) {
    case PrimitiveKind::Box:
      for (int a = 0; a < 3; ++a)
        if (c[a] < s.origin[a] || c[a] >= s.origin[a] + s.size[a]) return false;
      return true;
    case PrimitiveKind::Sphere: {
      long d2 = 0;
      for (int a = 0; a < 3; ++a) {
        const long d = c[a] - s.origin[a];
        d2 += d * d;
      }
      return d2 <= static_cast<long>(s.radius) * s.radius;
    }
    case PrimitiveKind::LShape: {
      for (int a = 0; a < 3; ++a)
        if (c[a] < s.origin[a] || c[a] >= s.origin[a] + s.size[a]) return false;
      return !(c[0] - s.origin[0] >= s.cut[0] && c[1] - s.origin[1] >= s.cut[1]);
    }
    case PrimitiveKind::TorusSlab: {
      if (c[2] < s.origin[2] || c[2] >= s.origin[2] + s.height) return false;
      const long dx = c[0] - s.origin[0];
      const long dy = c[1] - s.origin[1];
      const long r2 = dx * dx + dy * dy;
      return r2 >= static_cast<long>(s.ring[0]) * s.ring[0] &&
             r2 <= static_cast<long>(s.ring[1]) * s.ring[1];
    }
  }
  return false;
}

inline double box_sdf(double px, double py, double pz, const std::array<double, 3>& center,
                      const std::array<double, 3>& half) {
  const double qx = std::abs(px - center[0]) - half[0];
  const double qy = std::abs(py - center[1]) - half[1];
  const double qz = std::abs(pz - center[2]) - half[2];
  const double ox = std::max(qx, 0.0), oy = std::max(qy, 0.0), oz = std::max(qz, 0.0);
  return std::sqrt(ox * ox + oy * oy + oz * oz) + std::min(std::max({qx, qy, qz}), 0.0);
}

inline double primitive_sdf(const PrimitiveSpec& s, double px, double py, double pz) {
  switch (s.kind) {
    case PrimitiveKind::Box: {
      std::array<double, 3> center, half;
      for (int a = 0; a < 3; ++a) {
        center[a] = s.origin[a] + s.size[a] / 2.0 - 0.5;
        half[a] = s.size[a] / 2.0;
      }
      return box_sdf(px, py, pz, center, half);
    }
    case PrimitiveKind::Sphere: {
      const double dx = px - s.origin[0], dy = py - s.origin[1], dz = pz - s.origin[2];
      return std::sqrt(dx * dx + dy * dy + dz * dz) - s.radius;
    }
    case PrimitiveKind::LShape: {
      std::array<double, 3> center, half;
      for (int a = 0; a < 3; ++a) {
        center[a] = s.origin[a] + s.size[a] / 2.0 - 0.5;
        half[a] = s.size[a] / 2.0;
      }
      const double full = box_sdf(px, py, pz, center, half);
      // removed quadrant spans [origin+cut-0.5, far edge] in x and y, all z
      std::array<double, 3> ccut, hcut;
      for (int a = 0; a < 2; ++a) {
        const double lo = s.origin[a] + s.cut[a] - 0.5;
        const double hi = s.origin[a] + s.size[a] - 0.5;
        ccut[a] = (lo + hi) / 2.0;
        hcut[a] = (hi - lo) / 2.0;
      }
      ccut[2] = center[2];
      hcut[2] = half[2] + 1.0;
      return std::max(full, -box_sdf(px, py, pz, ccut, hcut));
    }
    case PrimitiveKind::TorusSlab: {
      const double dx = px - s.origin[0], dy = py - s.origin[1];
      const double rho = std::sqrt(dx * dx + dy * dy);
      const double radial = std::max(s.ring[0] - rho, rho - s.ring[1]);
      const double slab = std::abs(pz - (s.origin[2] + s.height / 2.0 - 0.5)) - s.height / 2.0;
      return std::max(radial, slab);
    }
  }
  return 0.0;
}

inline std::array<float, kMatFeatDim> primitive_palette(PrimitiveKind k) {
  switch (k) {
    case PrimitiveKind::Box: return {0.8f, 0.2f, 0.2f, 0.5f};
    case PrimitiveKind::Sphere: return {0.2f, 0.4f, 0.8f, 0.3f};
    case PrimitiveKind::LShape: return {0.2f, 0.8f, 0.3f, 0.7f};
    case PrimitiveKind::TorusSlab: return {0.9f, 0.8f, 0.1f, 0.2f};
  }
  return {};
}

inline void check_primitive_bounds(const PrimitiveSpec& s, int grid_n) {
  auto in = [&](int lo, int hi) { return lo >= 0 && hi <= grid_n; };
  bool ok = true;
  switch (s.kind) {
    case PrimitiveKind::Box:
    case PrimitiveKind::LShape:
      for (int a = 0; a < 3; ++a) ok &= s.size[a] >= 1 && in(s.origin[a], s.origin[a] + s.size[a]);
      if (s.kind == PrimitiveKind::LShape)
        ok &= s.cut[0] >= 1 && s.cut[1] >= 1 && (s.cut[0] < s.size[0] || s.cut[1] < s.size[1]);
      break;
    case PrimitiveKind::Sphere:
      ok &= s.radius >= 1;
      for (int a = 0; a < 3; ++a)
        ok &= in(s.origin[a] - s.radius, s.origin[a] + s.radius + 1);
      break;
    case PrimitiveKind::TorusSlab:
      ok &= s.ring[0] >= 1 && s.ring[1] > s.ring[0] && s.height >= 1;
      for (int a = 0; a < 2; ++a)
        ok &= in(s.origin[a] - s.ring[1], s.origin[a] + s.ring[1] + 1);
      ok &= in(s.origin[2], s.origin[2] + s.height);
      break;
  }
  if (!ok)
    throw BoundsError("primitive does not fit inside grid " + std::to_string(grid_n) + ": " +
                      s.describe());
}

}  // namespace detail

inline OVoxelAsset make_primitive(const PrimitiveSpec& spec, int grid_n) {
  detail::check_primitive_bounds(spec, grid_n);
  std::vector<Voxel> voxels;
  for (int z = 0; z < grid_n; ++z)
    for (int y = 0; y < grid_n; ++y)
      for (int x = 0; x < grid_n; ++x) {
        if (!detail::primitive_occupied(spec, {x, y, z})) continue;
        Voxel v;
        v.p = {x, y, z};
        int ci = 0;
        for (int dz = 0; dz < 2; ++dz)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const double d = detail::primitive_sdf(spec, x + dx - 0.5, y + dy - 0.5,
                                                     z + dz - 0.5);
              v.f_shape[ci++] = static_cast<float>(std::clamp(d, -1.0, 1.0));
            }
        v.f_mat = detail::primitive_palette(spec.kind);
        voxels.push_back(v);
      }
  if (voxels.empty()) throw EmptyAssetError("primitive produced no voxels: " + spec.describe());
  return OVoxelAsset(grid_n, std::move(voxels));
}

// ---- edits ---------------------------------------------------------------

enum class EditKind : uint8_t {
  Translate,
  Rotate90,
  ScaleAxis,
  Union,
  Difference,
  Intersection,
  FrameStep,
};

struct EditOp {
  EditKind kind = EditKind::Translate;
  Coord offset{0, 0, 0};       // Translate
  int axis = 2;                // Rotate90 / ScaleAxis (0=x,1=y,2=z)
  int turns = 1;               // Rotate90, in {1,2,3}
  int factor = 1;              // ScaleAxis, >= 1
  PrimitiveSpec operand;       // boolean second asset
  int stride = 1;              // FrameStep

  void validate() const {
    if (kind == EditKind::Rotate90 && (turns < 1 || turns > 3))
      throw DomainError("rotate quarter turns must be in {1,2,3}");
    if (kind == EditKind::ScaleAxis && factor < 1)
      throw DomainError("scale factor must be >= 1");
    if ((kind == EditKind::Rotate90 || kind == EditKind::ScaleAxis) && (axis < 0 || axis > 2))
      throw DomainError("axis must be x, y or z");
    if (kind == EditKind::FrameStep && stride < 1)
      throw DomainError("frame stride must be >= 1");
  }
};

namespace detail {

// one quarter turn about `axis`: the other two axes (b, c) map to
// (N-1-c, b), matching (x,y) -> (N-1-y, x) for axis z
inline Coord rotate_coord(const Coord& c, int axis, int turns, int n) {
  static constexpr int other[3][2] = {{1, 2}, {2, 0}, {0, 1}};
  Coord r = c;
  for (int t = 0; t < turns; ++t) {
    const int b = other[axis][0], cc = other[axis][1];
    const int nb = n - 1 - r[cc];
    const int ncc = r[b];
    r[b] = nb;
    r[cc] = ncc;
  }
  return r;
}

// scripted animation path: unit steps cycling through +x, +y, +z
inline Coord framestep_offset(int stride) {
  Coord off{0, 0, 0};
  for (int t = 0; t < stride; ++t) off[t % 3] += 1;
  return off;
}

inline OVoxelAsset clip_to_grid(int grid_n, std::vector<Voxel> moved, size_t source_count) {
  std::vector<Voxel> kept;
  kept.reserve(moved.size());
  for (Voxel& v : moved) {
    bool in = true;
    for (int a = 0; a < 3; ++a) in &= (v.p[a] >= 0 && v.p[a] < grid_n);
    if (in) kept.push_back(std::move(v));
  }
  if (kept.size() * 2 < source_count)
    throw BoundsError("edit pushes more than half of the asset outside the grid (" +
                      std::to_string(kept.size()) + "/" + std::to_string(source_count) +
                      " voxels survive)");
  if (kept.empty()) throw EmptyAssetError("edit produced an empty asset");
  return OVoxelAsset(grid_n, std::move(kept));
}

}  // namespace detail

inline OVoxelAsset apply_edit(const OVoxelAsset& asset, const EditOp& op) {
  op.validate();
  const int n = asset.grid_n();
  switch (op.kind) {
    case EditKind::Translate:
    case EditKind::FrameStep: {
      const Coord off =
          op.kind == EditKind::Translate ? op.offset : detail::framestep_offset(op.stride);
      std::vector<Voxel> moved = asset.voxels();
      for (Voxel& v : moved)
        for (int a = 0; a < 3; ++a) v.p[a] += off[a];
      return detail::clip_to_grid(n, std::move(moved), asset.count());
    }
    case EditKind::Rotate90: {
      std::vector<Voxel> moved = asset.voxels();
      for (Voxel& v : moved) v.p = detail::rotate_coord(v.p, op.axis, op.turns, n);
      return OVoxelAsset(n, std::move(moved));
    }
    case EditKind::ScaleAxis: {
      std::vector<Voxel> scaled;
      scaled.reserve(asset.count() * op.factor);
      for (const Voxel& v : asset.voxels())
        for (int i = 0; i < op.factor; ++i) {
          Voxel w = v;
          w.p[op.axis] = v.p[op.axis] * op.factor + i;
          scaled.push_back(w);
        }
      return detail::clip_to_grid(n, std::move(scaled), asset.count() * op.factor);
    }
    case EditKind::Union:
    case EditKind::Difference:
    case EditKind::Intersection: {
      const OVoxelAsset other = make_primitive(op.operand, n);
      const auto b = other.coord_set();
      std::vector<Voxel> out;
      if (op.kind == EditKind::Union) {
        const auto a = asset.coord_set();
        out = asset.voxels();
        for (const Voxel& v : other.voxels())
          if (!a.count(v.p)) out.push_back(v);
      } else if (op.kind == EditKind::Difference) {
        for (const Voxel& v : asset.voxels())
          if (!b.count(v.p)) out.push_back(v);
      } else {
        for (const Voxel& v : asset.voxels())
          if (b.count(v.p)) out.push_back(v);
      }
      if (out.empty()) throw EmptyAssetError("boolean edit produced an empty asset");
      return OVoxelAsset(n, std::move(out));
    }
  }
  throw DomainError("unknown edit kind");
}

// material palette replacement used by the semantic edit pipeline
inline OVoxelAsset recolor(const OVoxelAsset& asset, const std::array<float, kMatFeatDim>& palette) {
  std::vector<Voxel> voxels = asset.voxels();
  for (Voxel& v : voxels) v.f_mat = palette;
  return OVoxelAsset(asset.grid_n(), std::move(voxels));
}

// ---- instruction grammar ---------------------------------------------------

inline const char* axis_name(int a) { return a == 0 ? "x" : (a == 1 ? "y" : "z"); }

inline std::string edit_instruction(const EditOp& op) {
  char buf[200];
  switch (op.kind) {
    case EditKind::Translate:
      std::snprintf(buf, sizeof buf, "translate by (%d,%d,%d)", op.offset[0], op.offset[1],
                    op.offset[2]);
      return buf;
    case EditKind::Rotate90:
      std::snprintf(buf, sizeof buf, "rotate about %s by %d quarter turns", axis_name(op.axis),
                    op.turns);
      return buf;
    case EditKind::ScaleAxis:
      std::snprintf(buf, sizeof buf, "scale %s by %d", axis_name(op.axis), op.factor);
      return buf;
    case EditKind::Union: return "union with " + op.operand.describe();
    case EditKind::Difference: return "difference with " + op.operand.describe();
    case EditKind::Intersection: return "intersect with " + op.operand.describe();
    case EditKind::FrameStep:
      std::snprintf(buf, sizeof buf, "advance animation by %d frames", op.stride);
      return buf;
  }
  return "";
}

inline std::string recolor_instruction(const std::array<float, kMatFeatDim>& palette) {
  char buf[80];
  std::snprintf(buf, sizeof buf, "recolor to (%.1f,%.1f,%.1f,%.1f)", palette[0], palette[1],
                palette[2], palette[3]);
  return buf;
}

// A parsed instruction: either a geometric edit or a palette recolor.
struct ParsedEdit {
  bool is_recolor = false;
  EditOp op;
  std::array<float, kMatFeatDim> palette{};
};

namespace detail {

struct Scanner {
  const std::string& s;
  size_t i = 0;

  bool literal(const char* word) {
    const size_t n = std::strlen(word);
    if (s.compare(i, n, word) != 0) return false;
    i += n;
    return true;
  }
  void expect(const char* word) {
    if (!literal(word))
      throw DomainError("cannot parse instruction '" + s + "' (expected '" + word + "' at " +
                        std::to_string(i) + ")");
  }
  int number() {
    size_t end = i;
    if (end < s.size() && (s[end] == '-' || s[end] == '+')) ++end;
    while (end < s.size() && std::isdigit(static_cast<unsigned char>(s[end]))) ++end;
    if (end == i) throw DomainError("cannot parse number in instruction '" + s + "'");
    const int v = std::stoi(s.substr(i, end - i));
    i = end;
    return v;
  }
  float decimal() {
    size_t end = i;
    while (end < s.size() && (std::isdigit(static_cast<unsigned char>(s[end])) ||
                              s[end] == '.' || s[end] == '-' || s[end] == '+'))
      ++end;
    if (end == i) throw DomainError("cannot parse decimal in instruction '" + s + "'");
    const float v = std::strtof(s.substr(i, end - i).c_str(), nullptr);
    i = end;
    return v;
  }
  Coord triple() {
    expect("(");
    Coord c;
    c[0] = number();
    expect(",");
    c[1] = number();
    expect(",");
    c[2] = number();
    expect(")");
    return c;
  }
  std::array<int, 2> pair2() {
    expect("(");
    std::array<int, 2> c;
    c[0] = number();
    expect(",");
    c[1] = number();
    expect(")");
    return c;
  }
  int axis() {
    if (literal("x")) return 0;
    if (literal("y")) return 1;
    if (literal("z")) return 2;
    throw DomainError("cannot parse axis in instruction '" + s + "'");
  }
};

inline PrimitiveSpec parse_primitive(Scanner& sc) {
  PrimitiveSpec p;
  if (sc.literal("box at ")) {
    p.kind = PrimitiveKind::Box;
    p.origin = sc.triple();
    sc.expect(" size ");
    p.size = sc.triple();
  } else if (sc.literal("sphere at ")) {
    p.kind = PrimitiveKind::Sphere;
    p.origin = sc.triple();
    sc.expect(" radius ");
    p.radius = sc.number();
  } else if (sc.literal("l shape at ")) {
    p.kind = PrimitiveKind::LShape;
    p.origin = sc.triple();
    sc.expect(" size ");
    p.size = sc.triple();
    sc.expect(" cut ");
    p.cut = sc.pair2();
  } else if (sc.literal("torus slab at ")) {
    p.kind = PrimitiveKind::TorusSlab;
    p.origin[0] = (sc.expect("("), sc.number());
    sc.expect(",");
    p.origin[1] = sc.number();
    sc.expect(")");
    sc.expect(" z ");
    const auto zh = sc.pair2();
    p.origin[2] = zh[0];
    p.height = zh[1];
    sc.expect(" radius ");
    p.ring = sc.pair2();
  } else {
    throw DomainError("cannot parse primitive in '" + sc.s + "'");
  }
  return p;
}

}  // namespace detail

inline PrimitiveSpec parse_primitive_description(const std::string& text) {
  std::string body = text;
  if (body.rfind("an ", 0) == 0) body = body.substr(3);
  else if (body.rfind("a ", 0) == 0) body = body.substr(2);
  detail::Scanner sc{body};
  PrimitiveSpec p = detail::parse_primitive(sc);
  if (sc.i != body.size()) throw DomainError("trailing text in primitive description '" + text + "'");
  return p;
}

inline ParsedEdit parse_instruction(const std::string& text) {
  detail::Scanner sc{text};
  ParsedEdit out;
  EditOp& op = out.op;
  if (sc.literal("translate by ")) {
    op.kind = EditKind::Translate;
    op.offset = sc.triple();
  } else if (sc.literal("rotate about ")) {
    op.kind = EditKind::Rotate90;
    op.axis = sc.axis();
    sc.expect(" by ");
    op.turns = sc.number();
    sc.expect(" quarter turns");
  } else if (sc.literal("scale ")) {
    op.kind = EditKind::ScaleAxis;
    op.axis = sc.axis();
    sc.expect(" by ");
    op.factor = sc.number();
  } else if (sc.literal("union with ")) {
    op.kind = EditKind::Union;
    op.operand = detail::parse_primitive(sc);
  } else if (sc.literal("difference with ")) {
    op.kind = EditKind::Difference;
    op.operand = detail::parse_primitive(sc);
  } else if (sc.literal("intersect with ")) {
    op.kind = EditKind::Intersection;
    op.operand = detail::parse_primitive(sc);
  } else if (sc.literal("advance animation by ")) {
    op.kind = EditKind::FrameStep;
    op.stride = sc.number();
    sc.expect(" frames");
  } else if (sc.literal("recolor to ")) {
    out.is_recolor = true;
    sc.expect("(");
    for (int i = 0; i < kMatFeatDim; ++i) {
      out.palette[i] = sc.decimal();
      if (i + 1 < kMatFeatDim) sc.expect(",");
    }
    sc.expect(")");
  } else {
    throw DomainError("cannot parse instruction '" + text + "'");
  }
  if (sc.i != text.size()) throw DomainError("trailing text in instruction '" + text + "'");
  return out;
}

inline OVoxelAsset apply_parsed(const OVoxelAsset& asset, const ParsedEdit& e) {
  return e.is_recolor ? recolor(asset, e.palette) : apply_edit(asset, e.op);
}

// ---- trajectories ---------------------------------------------------------

struct Trajectory {
  int grid_n = 16;
  std::string caption;
  bool initial_has_image = false;  // runtime packing choice, not persisted
  std::optional<OVoxelAsset> initial;
  struct Turn {
    std::string instruction;
    bool has_image = false;
    std::optional<OVoxelAsset> result;
  };
  std::vector<Turn> turns;

  const OVoxelAsset& initial_asset() const {
    if (!initial) throw DomainError("trajectory has no initial asset");
    return *initial;
  }
  const OVoxelAsset& result_of(size_t turn) const {
    if (turn >= turns.size() || !turns[turn].result)
      throw DomainError("trajectory turn " + std::to_string(turn) + " has no result");
    return *turns[turn].result;
  }

  void validate() const {
    const OVoxelAsset& init = initial_asset();
    if (init.grid_n() != grid_n) throw DomainError("trajectory grid mismatch");
    for (size_t i = 0; i < turns.size(); ++i) {
      const OVoxelAsset& a = result_of(i);
      if (a.grid_n() != grid_n) throw DomainError("trajectory grid mismatch at turn " + std::to_string(i));
    }
  }
};

struct TrajectoryOptions {
  int grid_n = 16;
  int min_extent = 2;               // smallest primitive dimension
  int max_extent = 4;               // largest primitive dimension / radius
  std::vector<EditKind> allowed = {EditKind::Translate, EditKind::Rotate90,
                                   EditKind::ScaleAxis, EditKind::Union,
                                   EditKind::Difference, EditKind::Intersection,
                                   EditKind::FrameStep};
  bool semantic = false;  // recolor turns instead of geometric edits
};

namespace detail {

inline PrimitiveSpec sample_primitive(Rng& rng, const TrajectoryOptions& o) {
  PrimitiveSpec p;
  const int n = o.grid_n;
  auto extent = [&] {
    return static_cast<int>(rng.uniform_range(o.min_extent, std::max(o.min_extent, o.max_extent)));
  };
  switch (rng.uniform_int(4)) {
    case 0: {
      p.kind = PrimitiveKind::Box;
      for (int a = 0; a < 3; ++a) p.size[a] = extent();
      for (int a = 0; a < 3; ++a) p.origin[a] = static_cast<int>(rng.uniform_range(0, n - p.size[a]));
      break;
    }
    case 1: {
      p.kind = PrimitiveKind::Sphere;
      p.radius = std::max(1, extent() / 2 + 1);
      for (int a = 0; a < 3; ++a)
        p.origin[a] = static_cast<int>(rng.uniform_range(p.radius, n - 1 - p.radius));
      break;
    }
    case 2: {
      p.kind = PrimitiveKind::LShape;
      for (int a = 0; a < 3; ++a) p.size[a] = std::max(2, extent());
      for (int a = 0; a < 3; ++a) p.origin[a] = static_cast<int>(rng.uniform_range(0, n - p.size[a]));
      p.cut[0] = static_cast<int>(rng.uniform_range(1, p.size[0] - 1));
      p.cut[1] = static_cast<int>(rng.uniform_range(1, p.size[1] - 1));
      break;
    }
    default: {
      p.kind = PrimitiveKind::TorusSlab;
      p.ring[0] = 1;
      p.ring[1] = std::max(2, extent() - 1);
      p.height = static_cast<int>(rng.uniform_range(1, 2));
      p.origin[0] = static_cast<int>(rng.uniform_range(p.ring[1], n - 1 - p.ring[1]));
      p.origin[1] = static_cast<int>(rng.uniform_range(p.ring[1], n - 1 - p.ring[1]));
      p.origin[2] = static_cast<int>(rng.uniform_range(0, n - p.height));
      break;
    }
  }
  return p;
}

inline EditOp sample_edit(Rng& rng, const TrajectoryOptions& o) {
  EditOp op;
  op.kind = o.allowed[rng.uniform_int(o.allowed.size())];
  switch (op.kind) {
    case EditKind::Translate:
      do {
        for (int a = 0; a < 3; ++a) op.offset[a] = static_cast<int>(rng.uniform_range(-3, 3));
      } while (op.offset == Coord{0, 0, 0});
      break;
    case EditKind::Rotate90:
      op.axis = static_cast<int>(rng.uniform_int(3));
      op.turns = static_cast<int>(rng.uniform_range(1, 3));
      break;
    case EditKind::ScaleAxis:
      op.axis = static_cast<int>(rng.uniform_int(3));
      op.factor = 2;
      break;
    case EditKind::Union:
    case EditKind::Difference:
    case EditKind::Intersection:
      op.operand = sample_primitive(rng, o);
      break;
    case EditKind::FrameStep:
      op.stride = static_cast<int>(rng.uniform_range(1, 4));
      break;
  }
  return op;
}

}  // namespace detail

// Samples a primitive plus `turns` edits with templated instruction
// strings; every instruction reproduces its edit deterministically.
// Rejected edits (out of grid, empty result) are resampled up to 100 times.
inline Trajectory make_trajectory(uint64_t seed, int turns, const TrajectoryOptions& opts = {}) {
  if (turns < 1 || turns > 5) throw DomainError("trajectory turns must be in [1, 5]");
  Rng rng = stream_rng(seed, opts.semantic ? "trajectory-semantic" : "trajectory");
  Trajectory traj;
  traj.grid_n = opts.grid_n;
  const PrimitiveSpec prim = detail::sample_primitive(rng, opts);
  traj.caption = prim.caption();
  traj.initial = make_primitive(prim, opts.grid_n);

  const OVoxelAsset* current = &*traj.initial;
  for (int t = 0; t < turns; ++t) {
    Trajectory::Turn turn;
    if (opts.semantic) {
      std::array<float, kMatFeatDim> palette;
      for (auto& c : palette) c = static_cast<float>(rng.uniform_int(11)) / 10.0f;
      turn.instruction = recolor_instruction(palette);
      turn.result = recolor(*current, palette);
    } else {
      bool placed = false;
      for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
        const EditOp op = detail::sample_edit(rng, opts);
        try {
          OVoxelAsset result = apply_edit(*current, op);
          turn.instruction = edit_instruction(op);
          turn.result = std::move(result);
          placed = true;
        } catch (const BoundsError&) {
        } catch (const EmptyAssetError&) {
        }
      }
      if (!placed)
        throw GenerationError("could not sample a valid edit after 100 attempts (seed " +
                              std::to_string(seed) + ", turn " + std::to_string(t) + ")");
    }
    traj.turns.push_back(std::move(turn));
    current = &*traj.turns.back().result;
  }
  traj.validate();
  return traj;
}

// ---- rendering --------------------------------------------------------------

// Orthographic depth projection along +axis, normalized to [0, 1]:
// 0 = no hit, (grid_n - depth) / grid_n otherwise. Rows/cols are the two
// remaining axes in (x, y, z) order with the higher axis as rows.
inline std::vector<float> render_image(const OVoxelAsset& asset, int axis) {
  if (axis < 0 || axis > 2) throw DomainError("render axis must be 0, 1 or 2");
  const int n = asset.grid_n();
  const int row_axis = (axis == 2) ? 1 : 2;
  const int col_axis = (axis == 0) ? 1 : 0;
  std::vector<float> img(static_cast<size_t>(n) * n, 0.0f);
  for (const Voxel& v : asset.voxels()) {
    const int r = v.p[row_axis], c = v.p[col_axis], d = v.p[axis];
    float& px = img[static_cast<size_t>(r) * n + c];
    const float val = static_cast<float>(n - d) / static_cast<float>(n);
    px = std::max(px, val);
  }
  return img;
}

// ---- binary formats ---------------------------------------------------------

namespace detail {

inline void put_u16(std::string& out, uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}
inline void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f32(std::string& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

struct ByteReader {
  const std::string& buf;
  size_t i = 0;

  void need(size_t n) const {
    if (i + n > buf.size()) throw IoError("truncated OVX1 data");
  }
  uint16_t u16() {
    need(2);
    const uint16_t v = static_cast<uint8_t>(buf[i]) | (static_cast<uint8_t>(buf[i + 1]) << 8);
    i += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int k = 0; k < 4; ++k) v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[i + k])) << (8 * k);
    i += 4;
    return v;
  }
  float f32() {
    const uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
};

}  // namespace detail

// OVX1: magic "OVX1", little-endian; header (grid_n u32, L u32, S u16,
// M u16); then L records of (x, y, z as u16; S+M f32 features).
inline std::string serialize_asset(const OVoxelAsset& asset) {
  std::string out;
  out += "OVX1";
  detail::put_u32(out, static_cast<uint32_t>(asset.grid_n()));
  detail::put_u32(out, static_cast<uint32_t>(asset.count()));
  detail::put_u16(out, kShapeFeatDim);
  detail::put_u16(out, kMatFeatDim);
  for (const Voxel& v : asset.voxels()) {
    detail::put_u16(out, static_cast<uint16_t>(v.p[0]));
    detail::put_u16(out, static_cast<uint16_t>(v.p[1]));
    detail::put_u16(out, static_cast<uint16_t>(v.p[2]));
    for (float f : v.f_shape) detail::put_f32(out, f);
    for (float f : v.f_mat) detail::put_f32(out, f);
  }
  return out;
}

inline OVoxelAsset parse_asset(const std::string& bytes) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "OVX1") != 0)
    throw IoError("not an OVX1 asset (bad magic)");
  detail::ByteReader r{bytes, 4};
  const uint32_t grid_n = r.u32();
  const uint32_t count = r.u32();
  const uint16_t s = r.u16();
  const uint16_t m = r.u16();
  if (s != kShapeFeatDim || m != kMatFeatDim)
    throw IoError("OVX1 feature dims (" + std::to_string(s) + "," + std::to_string(m) +
                  ") unsupported");
  std::vector<Voxel> voxels(count);
  for (uint32_t i = 0; i < count; ++i) {
    Voxel& v = voxels[i];
    v.p = {r.u16(), r.u16(), r.u16()};
    for (auto& f : v.f_shape) f = r.f32();
    for (auto& f : v.f_mat) f = r.f32();
  }
  if (r.i != bytes.size()) throw IoError("trailing bytes in OVX1 data");
  return OVoxelAsset(static_cast<int>(grid_n), std::move(voxels));
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for '" + path.string() + "'");
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_asset(const OVoxelAsset& asset, const std::filesystem::path& path) {
  write_file(path, serialize_asset(asset));
}
inline OVoxelAsset read_asset(const std::filesystem::path& path) {
  return parse_asset(read_file(path));
}

// Trajectory files are line-delimited: grid, caption, init <asset file>,
// then per turn: edit <instruction> / result <asset file>. Asset paths are
// relative to the trajectory file.
inline void write_trajectory(const Trajectory& traj, const std::filesystem::path& dir,
                             const std::string& stem) {
  traj.validate();
  std::ostringstream body;
  body << "grid " << traj.grid_n << "\n";
  body << "caption " << traj.caption << "\n";
  const std::string init_name = stem + "_t0.ovx";
  write_asset(traj.initial_asset(), dir / init_name);
  body << "init " << init_name << "\n";
  for (size_t i = 0; i < traj.turns.size(); ++i) {
    const std::string name = stem + "_t" + std::to_string(i + 1) + ".ovx";
    write_asset(traj.result_of(i), dir / name);
    body << "edit " << traj.turns[i].instruction << "\n";
    body << "result " << name << "\n";
  }
  write_file(dir / (stem + ".traj"), body.str());
}

inline Trajectory read_trajectory(const std::filesystem::path& path) {
  const std::filesystem::path dir = path.parent_path();
  std::istringstream in(read_file(path));
  Trajectory traj;
  std::string line;
  std::string pending_edit;
  bool have_edit = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.rfind("grid ", 0) == 0) {
      traj.grid_n = std::stoi(line.substr(5));
    } else if (line.rfind("caption ", 0) == 0) {
      traj.caption = line.substr(8);
    } else if (line.rfind("init ", 0) == 0) {
      traj.initial = read_asset(dir / line.substr(5));
    } else if (line.rfind("edit ", 0) == 0) {
      if (have_edit) throw IoError("trajectory file: edit without result");
      pending_edit = line.substr(5);
      have_edit = true;
    } else if (line.rfind("result ", 0) == 0) {
      if (!have_edit) throw IoError("trajectory file: result without edit");
      Trajectory::Turn turn;
      turn.instruction = pending_edit;
      turn.result = read_asset(dir / line.substr(7));
      traj.turns.push_back(std::move(turn));
      have_edit = false;
    } else {
      throw IoError("trajectory file: unrecognized line '" + line + "'");
    }
  }
  if (have_edit) throw IoError("trajectory file: trailing edit without result");
  traj.validate();
  return traj;
}

}  // namespace voxmot

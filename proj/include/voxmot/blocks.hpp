#pragma once

#include <array>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "voxmot/common.hpp"

namespace voxmot {

// Block kinds in their fixed within-turn order. Latent blocks come in
// noisy/clean pairs per generation stage (structure -> shape -> material).
enum class BlockKind : uint8_t {
  Text = 0,
  Image = 1,
  NoiseStructure = 2,
  CleanStructure = 3,
  NoiseShape = 4,
  CleanShape = 5,
  NoiseMaterial = 6,
  CleanMaterial = 7,
};

inline int stage_order(BlockKind k) { return static_cast<int>(k); }

inline bool is_noisy(BlockKind k) {
  return k == BlockKind::NoiseStructure || k == BlockKind::NoiseShape ||
         k == BlockKind::NoiseMaterial;
}
inline bool is_clean_latent(BlockKind k) {
  return k == BlockKind::CleanStructure || k == BlockKind::CleanShape ||
         k == BlockKind::CleanMaterial;
}
inline bool is_latent(BlockKind k) { return is_noisy(k) || is_clean_latent(k); }
inline bool is_stream(BlockKind k) {
  return k == BlockKind::Text || k == BlockKind::Image;
}

inline const char* block_kind_name(BlockKind k) {
  switch (k) {
    case BlockKind::Text: return "text";
    case BlockKind::Image: return "image";
    case BlockKind::NoiseStructure: return "noise_ss";
    case BlockKind::CleanStructure: return "clean_ss";
    case BlockKind::NoiseShape: return "noise_shape";
    case BlockKind::CleanShape: return "clean_shape";
    case BlockKind::NoiseMaterial: return "noise_material";
    case BlockKind::CleanMaterial: return "clean_material";
  }
  return "?";
}

inline BlockKind block_kind_from_name(const std::string& s) {
  static const std::array<BlockKind, 8> kinds = {
      BlockKind::Text,          BlockKind::Image,         BlockKind::NoiseStructure,
      BlockKind::CleanStructure, BlockKind::NoiseShape,   BlockKind::CleanShape,
      BlockKind::NoiseMaterial, BlockKind::CleanMaterial};
  for (BlockKind k : kinds)
    if (s == block_kind_name(k)) return k;
  throw BlockTableError("unknown block kind '" + s + "'");
}

struct Block {
  BlockKind kind;
  int turn = 0;
  int begin = 0;  // token range [begin, end)
  int end = 0;

  int size() const { return end - begin; }
};

// Ordered list of contiguous blocks covering a packed sequence.
struct BlockTable {
  std::vector<Block> blocks;

  int token_count() const { return blocks.empty() ? 0 : blocks.back().end; }

  void validate() const {
    int cursor = 0;
    for (size_t i = 0; i < blocks.size(); ++i) {
      const Block& b = blocks[i];
      if (b.turn < 0) throw BlockTableError("negative turn id");
      if (b.begin != cursor || b.end <= b.begin)
        throw BlockTableError("block ranges must be contiguous and non-empty (block " +
                              std::to_string(i) + ")");
      cursor = b.end;
      if (i > 0) {
        const Block& p = blocks[i - 1];
        if (b.turn < p.turn)
          throw BlockTableError("turns must be non-decreasing (block " + std::to_string(i) + ")");
        if (b.turn == p.turn && stage_order(b.kind) <= stage_order(p.kind))
          throw BlockTableError("within a turn, block kinds must follow the fixed stage order (" +
                                std::string(block_kind_name(p.kind)) + " then " +
                                block_kind_name(b.kind) + " at turn " + std::to_string(b.turn) +
                                ")");
      }
    }
  }
};

// Visibility class of one (query block, key block) pair.
enum class PairVis : char {
  Masked = '.',
  Causal = 'C',
  BiDir = 'B',
  Full = 'F',
};

// Compiled visibility rule. Within a packed sequence:
//   - no block sees any later block,
//   - text/image blocks are causal within themselves, latent blocks
//     bidirectional within themselves,
//   - noisy latent blocks are visible to nobody else,
//   - everything earlier that is not noisy (text, image, clean latents)
//     is fully visible.
inline PairVis classify_pair(const Block& q, const Block& k, size_t qi, size_t ki) {
  if (qi == ki) return is_stream(q.kind) ? PairVis::Causal : PairVis::BiDir;
  const bool k_later = (k.turn > q.turn) ||
                       (k.turn == q.turn && stage_order(k.kind) > stage_order(q.kind));
  if (k_later) return PairVis::Masked;
  if (is_noisy(k.kind)) return PairVis::Masked;
  return PairVis::Full;
}

struct AttnMask {
  int n = 0;
  std::vector<uint8_t> visible;  // row-major n*n, 1 = query row may attend

  bool at(int q, int k) const { return visible[static_cast<size_t>(q) * n + k] != 0; }
};

// `cross_turn_history=false` is the history-masking ablation: later turns
// lose all visibility of earlier turns.
inline AttnMask build_mask(const BlockTable& table, bool cross_turn_history = true) {
  table.validate();
  AttnMask m;
  m.n = table.token_count();
  m.visible.assign(static_cast<size_t>(m.n) * m.n, 0);
  for (size_t qi = 0; qi < table.blocks.size(); ++qi) {
    const Block& qb = table.blocks[qi];
    for (size_t ki = 0; ki < table.blocks.size(); ++ki) {
      const Block& kb = table.blocks[ki];
      PairVis vis = classify_pair(qb, kb, qi, ki);
      if (!cross_turn_history && qb.turn != kb.turn) vis = PairVis::Masked;
      if (vis == PairVis::Masked) continue;
      for (int q = qb.begin; q < qb.end; ++q) {
        uint8_t* row = m.visible.data() + static_cast<size_t>(q) * m.n;
        if (vis == PairVis::Causal) {
          // same block: token q sees keys begin..q
          for (int k = kb.begin; k <= q; ++k) row[k] = 1;
        } else {
          for (int k = kb.begin; k < kb.end; ++k) row[k] = 1;
        }
      }
    }
  }
  for (int q = 0; q < m.n; ++q) {
    bool any = false;
    const uint8_t* row = m.visible.data() + static_cast<size_t>(q) * m.n;
    for (int k = 0; k < m.n; ++k) any |= (row[k] != 0);
    if (!any) throw BlockTableError("query row " + std::to_string(q) + " has no visible key");
  }
  return m;
}

// Block-pair classification grid as text, one char per (query, key) pair.
inline std::string mask_grid_text(const BlockTable& table) {
  table.validate();
  std::ostringstream os;
  os << "# block visibility grid: rows = query blocks, cols = key blocks\n";
  os << "# C=causal B=bidirectional F=full .=masked\n";
  os << "# blocks:";
  for (const Block& b : table.blocks)
    os << " " << block_kind_name(b.kind) << "@" << b.turn << ":" << b.size();
  os << "\n";
  for (size_t qi = 0; qi < table.blocks.size(); ++qi) {
    for (size_t ki = 0; ki < table.blocks.size(); ++ki)
      os << static_cast<char>(classify_pair(table.blocks[qi], table.blocks[ki], qi, ki));
    os << "\n";
  }
  return os.str();
}

// Layout string parser for the CLI: comma-separated "kind@turn:len" items,
// e.g. "text@1:4,image@1:16,noise_ss@1:8".
inline BlockTable parse_layout(const std::string& text) {
  BlockTable table;
  int cursor = 0;
  std::string item;
  std::istringstream stream(text);
  while (std::getline(stream, item, ',')) {
    if (item.empty()) continue;
    const size_t at = item.find('@');
    const size_t colon = item.find(':', at == std::string::npos ? 0 : at);
    if (at == std::string::npos || colon == std::string::npos)
      throw BlockTableError("malformed layout item '" + item + "' (want kind@turn:len)");
    const BlockKind kind = block_kind_from_name(item.substr(0, at));
    int turn = 0, len = 0;
    try {
      turn = std::stoi(item.substr(at + 1, colon - at - 1));
      len = std::stoi(item.substr(colon + 1));
    } catch (const std::exception&) {
      throw BlockTableError("malformed layout item '" + item + "' (bad number)");
    }
    if (len <= 0) throw BlockTableError("block length must be positive in '" + item + "'");
    table.blocks.push_back({kind, turn, cursor, cursor + len});
    cursor += len;
  }
  if (table.blocks.empty()) throw BlockTableError("empty layout");
  table.validate();
  return table;
}

}  // namespace voxmot

#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "voxmot/flow.hpp"
#include "voxmot/model.hpp"
#include "voxmot/ovoxel.hpp"

namespace voxmot {

// ---- identity latent codec ----------------------------------------------

// coarse cells in canonical (z, y, x) order, coordinates in the fine-grid
// frame (scaled by the 2x upsample) so structure and detail tokens share
// one position space
inline std::vector<Coord> structure_coords(const ModelConfig& cfg) {
  const int c = cfg.coarse_n();
  std::vector<Coord> out;
  out.reserve(static_cast<size_t>(c) * c * c);
  for (int z = 0; z < c; ++z)
    for (int y = 0; y < c; ++y)
      for (int x = 0; x < c; ++x) out.push_back({2 * x, 2 * y, 2 * z});
  return out;
}

inline std::vector<Coord> asset_coords(const OVoxelAsset& asset) {
  std::vector<Coord> out;
  out.reserve(asset.count());
  for (const Voxel& v : asset.voxels()) out.push_back(v.p);
  return out;
}

// per coarse cell: the 2x2x2 child occupancy pattern as +-1 channels,
// channel index dz*4 + dy*2 + dx
template <class Real>
Tensor<Real> structure_latent(const OVoxelAsset& asset, const ModelConfig& cfg) {
  if (asset.grid_n() != cfg.grid_n) throw PackError("asset grid does not match model grid");
  const int c = cfg.coarse_n();
  Tensor<Real> latent({c * c * c, 8});
  std::fill(latent.data.begin(), latent.data.end(), Real(-1));
  for (const Voxel& v : asset.voxels()) {
    const int cx = v.p[0] / 2, cy = v.p[1] / 2, cz = v.p[2] / 2;
    const int cell = (cz * c + cy) * c + cx;
    const int child = (v.p[2] % 2) * 4 + (v.p[1] % 2) * 2 + (v.p[0] % 2);
    latent.at(cell, child) = Real(1);
  }
  return latent;
}

// occupancy decode: channel value > 0 marks the child voxel active
template <class Real>
std::vector<Coord> decode_structure(const Tensor<Real>& latent, const ModelConfig& cfg) {
  const int c = cfg.coarse_n();
  if (latent.rows() != c * c * c || latent.cols() != 8)
    throw ShapeError("structure latent shape " + shape_str(latent.shape));
  std::vector<Coord> coords;
  for (int cell = 0; cell < latent.rows(); ++cell) {
    const int cx = cell % c, cy = (cell / c) % c, cz = cell / (c * c);
    for (int child = 0; child < 8; ++child) {
      if (latent.at(cell, child) <= Real(0)) continue;
      coords.push_back({2 * cx + (child & 1), 2 * cy + ((child >> 1) & 1), 2 * cz + (child >> 2)});
    }
  }
  std::sort(coords.begin(), coords.end(), coord_less);
  return coords;
}

template <class Real>
Tensor<Real> shape_latent(const OVoxelAsset& asset) {
  Tensor<Real> t({static_cast<int>(asset.count()), kShapeFeatDim});
  for (size_t i = 0; i < asset.count(); ++i)
    for (int j = 0; j < kShapeFeatDim; ++j)
      t.at(static_cast<int>(i), j) = static_cast<Real>(asset.voxels()[i].f_shape[j]);
  return t;
}

template <class Real>
Tensor<Real> material_latent(const OVoxelAsset& asset) {
  Tensor<Real> t({static_cast<int>(asset.count()), kMatFeatDim});
  for (size_t i = 0; i < asset.count(); ++i)
    for (int j = 0; j < kMatFeatDim; ++j)
      t.at(static_cast<int>(i), j) = static_cast<Real>(asset.voxels()[i].f_mat[j]);
  return t;
}

template <class Real>
Tensor<Real> stage_latent(const OVoxelAsset& asset, Stage s, const ModelConfig& cfg) {
  switch (s) {
    case Stage::Structure: return structure_latent<Real>(asset, cfg);
    case Stage::Shape: return shape_latent<Real>(asset);
    case Stage::Material: return material_latent<Real>(asset);
  }
  throw DomainError("bad stage");
}

// image render -> [patch_count x patch_dim] rows, patches row-major
template <class Real>
Tensor<Real> patchify(const std::vector<float>& img, const ModelConfig& cfg) {
  const int n = cfg.grid_n, p = cfg.patch;
  const int per_side = n / p;
  Tensor<Real> out({per_side * per_side, p * p});
  for (int pr = 0; pr < per_side; ++pr)
    for (int pc = 0; pc < per_side; ++pc) {
      const int row = pr * per_side + pc;
      int k = 0;
      for (int r = 0; r < p; ++r)
        for (int c = 0; c < p; ++c)
          out.at(row, k++) = static_cast<Real>(img[static_cast<size_t>(pr * p + r) * n + pc * p + c]);
    }
  return out;
}

// ---- packed sequences -----------------------------------------------------

enum class TaskKind : uint8_t { I2T, I2M, T2M, M2T, ProceduralInterleaved, SemanticInterleaved };

inline const char* task_name(TaskKind k) {
  switch (k) {
    case TaskKind::I2T: return "i2t";
    case TaskKind::I2M: return "i2m";
    case TaskKind::T2M: return "t2m";
    case TaskKind::M2T: return "m2t";
    case TaskKind::ProceduralInterleaved: return "proc";
    case TaskKind::SemanticInterleaved: return "sem";
  }
  return "?";
}

template <class Real>
struct PackedSequence {
  struct BlockSrc {
    BlockKind kind;
    int turn = 0;
    Stage stage = Stage::Structure;        // latent blocks
    std::vector<int> token_ids;            // text
    Tensor<Real> patches;                  // image
    Tensor<Real> latent;                   // x_t (noisy) or x1 (clean)
    std::vector<Coord> coords;             // latent token coordinates
    double t = 0.0;                        // flow time of a noisy block
    bool ce_target = false;                // text supervised with next-token CE
    Tensor<Real> fm_target;                // x1 - x0 for noisy blocks in train mode
    bool condition_dropped = false;        // replaced by the null embedding
  };

  std::vector<BlockSrc> blocks;
  BlockTable table;
  std::vector<uint8_t> expert;
  std::vector<PositionTriple> pos;
  bool use_positions = true;
  bool cross_turn_history = true;  // false under the history ablation

  int tokens() const { return table.token_count(); }
};

struct PackOptions {
  double time_shift = 1.0;        // stage timestep shift for sampled t
  bool drop_images = false;       // modality dropout (image tokens -> null)
  bool drop_condition = false;    // CFG dropout (all text/image cond -> null)
  int truncate_blocks = -1;       // keep only the first k blocks
  int budget_tokens = -1;         // drop trailing whole turns to fit
  int max_tokens = -1;            // hard cap; PackError when exceeded
  bool noisy_last_turn_only = false;  // earlier turns contribute clean context only
};

namespace detail {

template <class Real>
class PackBuilder {
 public:
  PackBuilder(const ModelConfig& cfg, Rng* noise) : cfg_(cfg), noise_(noise) {}

  void text(int turn, const std::string& s, bool ce, bool dropped) {
    typename PackedSequence<Real>::BlockSrc b;
    b.kind = BlockKind::Text;
    b.turn = turn;
    b.token_ids = Tokenizer::instance().encode(s);
    b.ce_target = ce;
    b.condition_dropped = dropped;
    const int n = static_cast<int>(b.token_ids.size());
    push(std::move(b), n);
  }

  // text block from raw ids (greedy decoding appends without EOS)
  void text_ids(int turn, std::vector<int> ids, bool ce) {
    typename PackedSequence<Real>::BlockSrc b;
    b.kind = BlockKind::Text;
    b.turn = turn;
    b.token_ids = std::move(ids);
    b.ce_target = ce;
    const int n = static_cast<int>(b.token_ids.size());
    push(std::move(b), n);
  }

  void image(int turn, const OVoxelAsset& asset, bool dropped) {
    typename PackedSequence<Real>::BlockSrc b;
    b.kind = BlockKind::Image;
    b.turn = turn;
    b.patches = patchify<Real>(render_image(asset, 2), cfg_);
    b.condition_dropped = dropped;
    push(std::move(b), cfg_.patch_count());
  }

  void clean(int turn, Stage s, Tensor<Real> latent, std::vector<Coord> coords) {
    typename PackedSequence<Real>::BlockSrc b;
    b.kind = s == Stage::Structure ? BlockKind::CleanStructure
             : s == Stage::Shape   ? BlockKind::CleanShape
                                   : BlockKind::CleanMaterial;
    b.turn = turn;
    b.stage = s;
    b.latent = std::move(latent);
    b.coords = std::move(coords);
    const int n = b.latent.rows();
    push(std::move(b), n);
  }

  // training-mode noisy block: draws t and x0, stores x_t and the target
  void noisy_train(int turn, Stage s, const Tensor<Real>& x1, std::vector<Coord> coords,
                   double time_shift) {
    if (!noise_) throw PackError("noise rng required for train-mode packing");
    typename PackedSequence<Real>::BlockSrc b;
    b.kind = s == Stage::Structure ? BlockKind::NoiseStructure
             : s == Stage::Shape   ? BlockKind::NoiseShape
                                   : BlockKind::NoiseMaterial;
    b.turn = turn;
    b.stage = s;
    b.coords = std::move(coords);
    b.t = shift_t(noise_->uniform(), time_shift);
    Tensor<Real> x0(x1.shape);
    for (auto& v : x0.data) v = static_cast<Real>(noise_->normal());
    b.latent = interpolate(x0, x1, b.t);
    b.fm_target = velocity_target(x0, x1);
    const int n = b.latent.rows();
    push(std::move(b), n);
  }

  // inference-mode noisy block carrying the current sampler state x_t
  void noisy_infer(int turn, Stage s, Tensor<Real> xt, std::vector<Coord> coords, double t) {
    typename PackedSequence<Real>::BlockSrc b;
    b.kind = s == Stage::Structure ? BlockKind::NoiseStructure
             : s == Stage::Shape   ? BlockKind::NoiseShape
                                   : BlockKind::NoiseMaterial;
    b.turn = turn;
    b.stage = s;
    b.latent = std::move(xt);
    b.coords = std::move(coords);
    b.t = t;
    const int n = b.latent.rows();
    push(std::move(b), n);
  }

  // all three stages of one turn, noisy + clean interleaved in table order
  void turn_stages(int turn, const OVoxelAsset& asset, double time_shift) {
    const auto ss = structure_latent<Real>(asset, cfg_);
    const auto sc = structure_coords(cfg_);
    noisy_train(turn, Stage::Structure, ss, sc, time_shift);
    clean(turn, Stage::Structure, ss, sc);
    const auto coords = asset_coords(asset);
    const auto sh = shape_latent<Real>(asset);
    noisy_train(turn, Stage::Shape, sh, coords, time_shift);
    clean(turn, Stage::Shape, sh, coords);
    const auto mat = material_latent<Real>(asset);
    noisy_train(turn, Stage::Material, mat, coords, time_shift);
    clean(turn, Stage::Material, mat, coords);
  }

  PackedSequence<Real> finish(const ModelConfig& cfg, const PackOptions& opts) {
    PackedSequence<Real> seq;
    if (opts.truncate_blocks > 0 && static_cast<int>(blocks_.size()) > opts.truncate_blocks) {
      blocks_.resize(opts.truncate_blocks);
      sizes_.resize(opts.truncate_blocks);
    }
    if (opts.budget_tokens > 0) {
      // drop trailing whole turns until we fit the packing budget
      while (total_tokens() > opts.budget_tokens) {
        const int last_turn = blocks_.back().turn;
        if (last_turn == 0) break;  // never drop the first turn
        while (!blocks_.empty() && blocks_.back().turn == last_turn) {
          blocks_.pop_back();
          sizes_.pop_back();
        }
      }
    }
    if (opts.max_tokens > 0 && total_tokens() > opts.max_tokens)
      throw PackError("packed sample of " + std::to_string(total_tokens()) +
                      " tokens exceeds the context cap of " + std::to_string(opts.max_tokens));

    int cursor = 0;
    int32_t stream = 0;
    for (size_t i = 0; i < blocks_.size(); ++i) {
      const auto& b = blocks_[i];
      seq.table.blocks.push_back({b.kind, b.turn, cursor, cursor + sizes_[i]});
      cursor += sizes_[i];
      const Modality m = modality_of_block(b.kind);
      for (int k = 0; k < sizes_[i]; ++k) seq.expert.push_back(expert_of(m));
      auto pos = positions_for_block(b.kind, b.turn, cfg.grid_n, sizes_[i],
                                     is_latent(b.kind) ? &b.coords : nullptr, stream);
      seq.pos.insert(seq.pos.end(), pos.begin(), pos.end());
    }
    seq.table.validate();
    seq.blocks = std::move(blocks_);
    seq.use_positions = cfg.use_positions;
    seq.cross_turn_history = !cfg.mask_history;
    if (!cfg.use_positions) seq.pos.assign(seq.pos.size(), PositionTriple{0, 0, 0});
    return seq;
  }

 private:
  void push(typename PackedSequence<Real>::BlockSrc b, int size) {
    blocks_.push_back(std::move(b));
    sizes_.push_back(size);
  }
  int total_tokens() const {
    int n = 0;
    for (int s : sizes_) n += s;
    return n;
  }

  const ModelConfig& cfg_;
  Rng* noise_;
  std::vector<typename PackedSequence<Real>::BlockSrc> blocks_;
  std::vector<int> sizes_;
};

}  // namespace detail

// single-asset task layouts
template <class Real>
PackedSequence<Real> pack_single(const ModelConfig& cfg, TaskKind task, const OVoxelAsset& asset,
                                 const std::string& caption, Rng* noise,
                                 const PackOptions& opts = {}) {
  detail::PackBuilder<Real> b(cfg, noise);
  switch (task) {
    case TaskKind::M2T: {
      const auto coords = asset_coords(asset);
      b.clean(0, Stage::Structure, structure_latent<Real>(asset, cfg), structure_coords(cfg));
      b.clean(0, Stage::Shape, shape_latent<Real>(asset), coords);
      b.clean(0, Stage::Material, material_latent<Real>(asset), coords);
      b.text(1, caption, /*ce=*/true, /*dropped=*/false);
      break;
    }
    case TaskKind::I2T: {
      b.image(0, asset, false);
      b.text(1, caption, /*ce=*/true, /*dropped=*/false);
      break;
    }
    case TaskKind::T2M: {
      b.text(0, caption, false, opts.drop_condition);
      b.turn_stages(0, asset, opts.time_shift);
      break;
    }
    case TaskKind::I2M: {
      b.text(0, caption, false, opts.drop_condition);
      b.image(0, asset, opts.drop_condition || opts.drop_images);
      b.turn_stages(0, asset, opts.time_shift);
      break;
    }
    default:
      throw PackError("pack_single: interleaved tasks use pack_trajectory");
  }
  return b.finish(cfg, opts);
}

enum class PackMode : uint8_t { Train, Infer };

// Interleaved multi-turn layout: per turn Text, [Image], then in train
// mode noisy+clean blocks per stage; in infer mode clean history only.
template <class Real>
PackedSequence<Real> pack_trajectory(const ModelConfig& cfg, const Trajectory& traj,
                                     PackMode mode, Rng* noise, const PackOptions& opts = {}) {
  traj.validate();
  if (traj.grid_n != cfg.grid_n) throw PackError("trajectory grid does not match model grid");
  detail::PackBuilder<Real> b(cfg, noise);
  const int total_turns = 1 + static_cast<int>(traj.turns.size());
  for (int turn = 0; turn < total_turns; ++turn) {
    const bool is_initial = (turn == 0);
    const std::string& text = is_initial ? traj.caption : traj.turns[turn - 1].instruction;
    const OVoxelAsset& asset = is_initial ? traj.initial_asset() : traj.result_of(turn - 1);
    b.text(turn, text, /*ce=*/mode == PackMode::Train, opts.drop_condition);
    const bool turn_image =
        is_initial ? traj.initial_has_image : traj.turns[turn - 1].has_image;
    if (turn_image) b.image(turn, asset, opts.drop_condition || opts.drop_images);
    const bool with_noisy =
        mode == PackMode::Train && (!opts.noisy_last_turn_only || turn == total_turns - 1);
    if (with_noisy) {
      b.turn_stages(turn, asset, opts.time_shift);
    } else {
      const auto coords = asset_coords(asset);
      b.clean(turn, Stage::Structure, structure_latent<Real>(asset, cfg), structure_coords(cfg));
      b.clean(turn, Stage::Shape, shape_latent<Real>(asset), coords);
      b.clean(turn, Stage::Material, material_latent<Real>(asset), coords);
    }
  }
  return b.finish(cfg, opts);
}

// ---- forward -----------------------------------------------------------------

template <class Real>
struct ForwardResult {
  typename Tape<Real>::Ref hidden;                          // [n x d_model]
  std::optional<typename Tape<Real>::Ref> ce;                // token-mean CE
  std::array<std::optional<typename Tape<Real>::Ref>, 3> fm;  // per stage
};

template <class Real>
typename Tape<Real>::Ref embed_sequence(Tape<Real>& tape, const ModelConfig& cfg,
                                        const TapeParams<Real>& params,
                                        const PackedSequence<Real>& seq) {
  std::vector<typename Tape<Real>::Ref> parts;
  parts.reserve(seq.blocks.size());
  for (size_t i = 0; i < seq.blocks.size(); ++i) {
    const auto& b = seq.blocks[i];
    const int len = seq.table.blocks[i].size();
    if (b.condition_dropped) {
      parts.push_back(tape.broadcast_row(params.at("embed.null"), len));
      continue;
    }
    switch (b.kind) {
      case BlockKind::Text:
        parts.push_back(tape.embedding(params.at("embed.text"), b.token_ids));
        break;
      case BlockKind::Image:
        parts.push_back(tape.matmul(tape.leaf(b.patches), params.at("embed.image")));
        break;
      default: {
        const std::string base = std::string("stage.") + stage_name(b.stage);
        if (is_noisy(b.kind)) {
          auto emb = tape.matmul(tape.leaf(b.latent), params.at(base + ".in"));
          auto tvec = tape.leaf(Tensor<Real>({cfg.d_model}, time_embedding<Real>(cfg, b.t)));
          parts.push_back(tape.add_row(emb, tvec));
        } else {
          parts.push_back(tape.matmul(tape.leaf(b.latent), params.at(base + ".clean")));
        }
        break;
      }
    }
  }
  return parts.size() == 1 ? parts[0] : tape.concat_rows(parts);
}

template <class Real>
SeqContext<Real> sequence_context(Tape<Real>& tape, const PackedSequence<Real>& seq) {
  SeqContext<Real> ctx;
  ctx.n = seq.tokens();
  ctx.expert = seq.expert;
  ctx.pos = seq.pos;
  ctx.mask = std::make_shared<const AttnMask>(build_mask(seq.table, seq.cross_turn_history));
  return ctx;
}

// final generation-side norm plus the per-stage output projection
template <class Real>
typename Tape<Real>::Ref stage_head(Tape<Real>& tape, const ModelConfig& cfg,
                                    const TapeParams<Real>& params, Stage s,
                                    typename Tape<Real>::Ref rows) {
  const std::string base = std::string("stage.") + stage_name(s);
  auto ones = tape.leaf(Tensor<Real>::full({cfg.d_model}, Real(1)));
  auto normed = tape.mul(tape.rms_norm(rows, ones),
                         tape.broadcast_row(params.at("final_norm.gen"),
                                            tape.value(rows).rows()));
  return tape.add_row(tape.matmul(normed, params.at(base + ".out")), params.at(base + ".out_bias"));
}

// One pass over the whole packed sequence: all stages in parallel under
// the unified mask. CE is absent (not zero) when no text block is
// supervised; each FM entry is the mean over that stage's noisy tokens.
template <class Real>
ForwardResult<Real> forward_losses(Tape<Real>& tape, const ModelConfig& cfg,
                                   const TapeParams<Real>& params,
                                   const PackedSequence<Real>& seq) {
  ForwardResult<Real> out;
  auto ctx = sequence_context(tape, seq);
  auto h = run_layers(tape, cfg, params, embed_sequence(tape, cfg, params, seq), ctx);
  out.hidden = h;

  // CE over text blocks: position i predicts token i+1 within its block
  std::vector<typename Tape<Real>::Ref> ce_rows;
  std::vector<int> ce_targets;
  for (size_t i = 0; i < seq.blocks.size(); ++i) {
    const auto& b = seq.blocks[i];
    if (b.kind != BlockKind::Text || !b.ce_target) continue;
    const Block& blk = seq.table.blocks[i];
    if (blk.size() < 2) continue;
    ce_rows.push_back(tape.slice_rows(h, blk.begin, blk.size() - 1));
    for (size_t k = 1; k < b.token_ids.size(); ++k) ce_targets.push_back(b.token_ids[k]);
  }
  if (!ce_rows.empty()) {
    auto rows = ce_rows.size() == 1 ? ce_rows[0] : tape.concat_rows(ce_rows);
    auto ones = tape.leaf(Tensor<Real>::full({cfg.d_model}, Real(1)));
    auto normed = tape.mul(tape.rms_norm(rows, ones),
                           tape.broadcast_row(params.at("final_norm.und"),
                                              tape.value(rows).rows()));
    auto logits = tape.matmul(normed, params.at("head.text"));
    out.ce = tape.cross_entropy_logits(logits, std::move(ce_targets));
  }

  // FM per stage over noisy blocks
  for (Stage s : {Stage::Structure, Stage::Shape, Stage::Material}) {
    std::vector<typename Tape<Real>::Ref> rows;
    std::vector<Tensor<Real>> targets;
    for (size_t i = 0; i < seq.blocks.size(); ++i) {
      const auto& b = seq.blocks[i];
      if (!is_noisy(b.kind) || b.stage != s || b.fm_target.data.empty()) continue;
      const Block& blk = seq.table.blocks[i];
      rows.push_back(tape.slice_rows(h, blk.begin, blk.size()));
      targets.push_back(b.fm_target);
    }
    if (rows.empty()) continue;
    auto stacked = rows.size() == 1 ? rows[0] : tape.concat_rows(rows);
    auto v_pred = stage_head(tape, cfg, params, s, stacked);
    Tensor<Real> target({tape.value(v_pred).rows(), cfg.latent_dim(s)});
    size_t off = 0;
    for (const auto& t : targets) {
      std::copy(t.data.begin(), t.data.end(), target.data.begin() + off);
      off += t.data.size();
    }
    out.fm[static_cast<int>(s)] = tape.mse(v_pred, tape.leaf(target));
  }
  return out;
}


// ---- inference ------------------------------------------------------------------

struct SamplerConfig {
  int steps = 25;
  double guidance = 3.0;
  double shift = 3.0;
};

namespace detail {

inline int ss_tokens(const ModelConfig& cfg) {
  return cfg.coarse_n() * cfg.coarse_n() * cfg.coarse_n();
}

// history prefix + current-turn condition blocks shared by all stages of
// one generation turn
template <class Real>
struct GenContext {
  const ModelConfig& cfg;
  const ParamStore<Real>& store;
  // blocks for the frontier turn, already containing history and the
  // instruction text; stage blocks are appended per velocity evaluation
  std::optional<Trajectory> history;        // empty for plain generation
  std::string text;                         // prompt or instruction
  std::optional<OVoxelAsset> image_of;      // render condition
};

// velocity of one stage at sampler state (x, t); cond=false swaps
// text/image conditioning for the null embedding
template <class Real>
Tensor<Real> stage_velocity(const GenContext<Real>& g, Stage s, const Tensor<Real>& xt,
                            const std::vector<Coord>& coords,
                            const std::vector<std::pair<Stage, Tensor<Real>>>& done_stages,
                            const std::vector<Coord>& fine_coords, double t, bool cond) {
  const ModelConfig& cfg = g.cfg;
  PackBuilder<Real> b(cfg, nullptr);
  PackOptions opts;
  int turn = 0;
  if (g.history) {
    const Trajectory& traj = *g.history;
    const int total_turns = 1 + static_cast<int>(traj.turns.size());
    for (; turn < total_turns; ++turn) {
      const bool is_initial = (turn == 0);
      const OVoxelAsset& asset = is_initial ? traj.initial_asset() : traj.result_of(turn - 1);
      const std::string& turn_text = is_initial ? traj.caption : traj.turns[turn - 1].instruction;
      b.text(turn, turn_text, false, !cond);
      const auto ac = asset_coords(asset);
      b.clean(turn, Stage::Structure, structure_latent<Real>(asset, cfg), structure_coords(cfg));
      b.clean(turn, Stage::Shape, shape_latent<Real>(asset), ac);
      b.clean(turn, Stage::Material, material_latent<Real>(asset), ac);
    }
  }
  b.text(turn, g.text, false, !cond);
  if (g.image_of) b.image(turn, *g.image_of, !cond);
  for (const auto& [stage, latent] : done_stages)
    b.clean(turn, stage, latent,
            stage == Stage::Structure ? structure_coords(cfg) : fine_coords);
  b.noisy_infer(turn, s, xt, coords, t);
  PackedSequence<Real> seq = b.finish(cfg, opts);

  Tape<Real> tape;
  auto params = register_params(tape, g.store, false);
  auto ctx = sequence_context(tape, seq);
  auto h = run_layers(tape, cfg, params, embed_sequence(tape, cfg, params, seq), ctx);
  const Block& noisy = seq.table.blocks.back();
  auto rows = tape.slice_rows(h, noisy.begin, noisy.size());
  auto v = stage_head(tape, cfg, params, s, rows);
  return tape.value(v);
}

template <class Real>
Tensor<Real> sample_stage(const GenContext<Real>& g, Stage s, const std::vector<Coord>& coords,
                          const std::vector<std::pair<Stage, Tensor<Real>>>& done_stages,
                          const std::vector<Coord>& fine_coords, int token_count,
                          const SamplerConfig& sampler, Rng& noise) {
  Tensor<Real> x({token_count, g.cfg.latent_dim(s)});
  for (auto& v : x.data) v = static_cast<Real>(noise.normal());
  auto field = [&](const Tensor<Real>& xt, double t) {
    Tensor<Real> vc = stage_velocity(g, s, xt, coords, done_stages, fine_coords, t, true);
    if (sampler.guidance == 1.0) return vc;
    Tensor<Real> vu = stage_velocity(g, s, xt, coords, done_stages, fine_coords, t, false);
    return guided_velocity(vc, vu, sampler.guidance);
  };
  return euler_sample<Real>(field, std::move(x), sampler.steps, sampler.shift);
}

// run the three stages sequentially and assemble the asset
template <class Real>
OVoxelAsset run_generation(GenContext<Real>& g, const SamplerConfig& sampler, uint64_t seed) {
  const ModelConfig& cfg = g.cfg;
  Rng noise = stream_rng(seed, "gen-noise");
  const auto sc = structure_coords(cfg);
  std::vector<std::pair<Stage, Tensor<Real>>> done;

  Tensor<Real> ss = sample_stage(g, Stage::Structure, sc, done, {}, ss_tokens(cfg), sampler, noise);
  const std::vector<Coord> coords = decode_structure(ss, cfg);
  if (coords.empty())
    throw GenerationError("empty generation: structure stage produced no active voxels");
  done.emplace_back(Stage::Structure, ss);

  Tensor<Real> shape = sample_stage(g, Stage::Shape, coords, done, coords,
                                    static_cast<int>(coords.size()), sampler, noise);
  done.emplace_back(Stage::Shape, shape);
  Tensor<Real> mat = sample_stage(g, Stage::Material, coords, done, coords,
                                  static_cast<int>(coords.size()), sampler, noise);

  std::vector<Voxel> voxels(coords.size());
  for (size_t i = 0; i < coords.size(); ++i) {
    voxels[i].p = coords[i];
    for (int j = 0; j < kShapeFeatDim; ++j)
      voxels[i].f_shape[j] = std::clamp(static_cast<float>(shape.at(static_cast<int>(i), j)), -1.0f, 1.0f);
    for (int j = 0; j < kMatFeatDim; ++j)
      voxels[i].f_mat[j] = std::clamp(static_cast<float>(mat.at(static_cast<int>(i), j)), -1.0f, 1.0f);
  }
  return OVoxelAsset(cfg.grid_n, std::move(voxels));
}

}  // namespace detail

// text- and/or image-conditioned generation: structure -> shape -> material
template <class Real>
OVoxelAsset generate(const ModelConfig& cfg, const ParamStore<Real>& store,
                     const std::string& prompt, const std::optional<OVoxelAsset>& image_of,
                     const SamplerConfig& sampler, uint64_t seed) {
  if (prompt.empty() && !image_of) throw DomainError("generate: need a text prompt or an image");
  detail::GenContext<Real> g{cfg, store};
  g.text = prompt;
  g.image_of = image_of;
  return detail::run_generation(g, sampler, seed);
}

// history-conditioned editing: clean history blocks + instruction +
// frontier noisy blocks
template <class Real>
OVoxelAsset edit(const ModelConfig& cfg, const ParamStore<Real>& store, const Trajectory& history,
                 const std::string& instruction, const SamplerConfig& sampler, uint64_t seed) {
  if (instruction.empty()) throw DomainError("edit: instruction must be non-empty");
  history.validate();
  detail::GenContext<Real> g{cfg, store};
  g.history = history;
  g.text = instruction;
  return detail::run_generation(g, sampler, seed);
}

// greedy captioning from clean latent conditioning
template <class Real>
std::string caption(const ModelConfig& cfg, const ParamStore<Real>& store,
                    const OVoxelAsset& asset, int max_len) {
  if (max_len <= 0) return "";
  std::vector<int> ids = {Tokenizer::kBos};
  for (int step = 0; step < max_len; ++step) {
    detail::PackBuilder<Real> b(cfg, nullptr);
    const auto coords = asset_coords(asset);
    b.clean(0, Stage::Structure, structure_latent<Real>(asset, cfg), structure_coords(cfg));
    b.clean(0, Stage::Shape, shape_latent<Real>(asset), coords);
    b.clean(0, Stage::Material, material_latent<Real>(asset), coords);
    b.text_ids(1, ids, false);
    PackOptions opts;
    PackedSequence<Real> seq = b.finish(cfg, opts);

    Tape<Real> tape;
    auto params = register_params(tape, store, false);
    auto ctx = sequence_context(tape, seq);
    auto h = run_layers(tape, cfg, params, embed_sequence(tape, cfg, params, seq), ctx);
    auto last = tape.slice_rows(h, seq.tokens() - 1, 1);
    auto ones = tape.leaf(Tensor<Real>::full({cfg.d_model}, Real(1)));
    auto normed = tape.mul(tape.rms_norm(last, ones),
                           tape.broadcast_row(params.at("final_norm.und"), 1));
    auto logits = tape.value(tape.matmul(normed, params.at("head.text")));
    int best = 0;
    for (int v = 1; v < cfg.vocab; ++v)
      if (logits.data[v] > logits.data[best]) best = v;
    if (best == Tokenizer::kEos) break;
    ids.push_back(best);
  }
  return Tokenizer::instance().decode(ids);
}

}  // namespace voxmot

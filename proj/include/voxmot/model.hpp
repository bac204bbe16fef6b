#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "voxmot/autodiff.hpp"
#include "voxmot/blocks.hpp"
#include "voxmot/common.hpp"
#include "voxmot/ovoxel.hpp"
#include "voxmot/rope3d.hpp"
#include "voxmot/tokenizer.hpp"

namespace voxmot {

enum class Modality : uint8_t { Text = 0, Image = 1, Mesh = 2 };

// hard routing: text/image -> understanding expert, mesh -> generation expert
inline constexpr uint8_t kUnd = 0;
inline constexpr uint8_t kGen = 1;
inline uint8_t expert_of(Modality m) { return m == Modality::Mesh ? kGen : kUnd; }

inline Modality modality_of_block(BlockKind k) {
  if (k == BlockKind::Text) return Modality::Text;
  if (k == BlockKind::Image) return Modality::Image;
  return Modality::Mesh;
}

enum class Stage : uint8_t { Structure = 0, Shape = 1, Material = 2 };
inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::Structure: return "structure";
    case Stage::Shape: return "shape";
    case Stage::Material: return "material";
  }
  return "?";
}

struct ModelConfig {
  int d_model = 96;
  int n_heads = 4;
  int n_layers = 4;
  int ffn_hidden = 384;
  int vocab = Tokenizer::kVocab;
  int grid_n = 16;
  int patch = 4;  // image patch edge
  double rope_base = 10000.0;
  bool use_positions = true;   // coordinate injection ablation switch
  bool mask_history = false;   // history visibility ablation switch

  int head_dim() const { return d_model / n_heads; }
  int coarse_n() const { return grid_n / 2; }
  int patch_count() const { return (grid_n / patch) * (grid_n / patch); }
  int patch_dim() const { return patch * patch; }

  // identity latent codec: structure = 2x2x2 child occupancy, then the raw
  // per-voxel features
  int latent_dim(Stage s) const {
    switch (s) {
      case Stage::Structure: return 8;
      case Stage::Shape: return kShapeFeatDim;
      case Stage::Material: return kMatFeatDim;
    }
    return 0;
  }

  void validate() const {
    if (d_model <= 0 || n_heads <= 0 || n_layers <= 0 || ffn_hidden <= 0)
      throw ConfigError("model dimensions must be positive");
    if (d_model % n_heads != 0)
      throw ConfigError("d_model must be divisible by n_heads");
    if (head_dim() % 6 != 0)
      throw ConfigError("head_dim must be a multiple of 6 for 3-axis rotary, got " +
                        std::to_string(head_dim()));
    if (grid_n < 4 || grid_n % 4 != 0)
      throw ConfigError("grid_n must be a positive multiple of 4");
    if (grid_n % patch != 0) throw ConfigError("grid_n must be divisible by the image patch");
  }

  RopeConfig rope() const { return RopeConfig(head_dim(), rope_base); }
};

// 64-entry sinusoidal table; not a trainable parameter
template <class Real>
std::vector<Real> time_embedding(const ModelConfig& cfg, double t) {
  const int idx = std::clamp(static_cast<int>(std::lround(t * 63.0)), 0, 63);
  std::vector<Real> v(cfg.d_model);
  for (int d = 0; d < cfg.d_model / 2; ++d) {
    const double freq = std::pow(10000.0, -2.0 * d / cfg.d_model);
    v[2 * d] = static_cast<Real>(std::sin(idx * freq));
    v[2 * d + 1] = static_cast<Real>(std::cos(idx * freq));
  }
  return v;
}

// ---- parameters -------------------------------------------------------------

// expert ownership is derivable from the parameter name
inline uint8_t expert_of_param(const std::string& name) {
  if (name.find(".gen.") != std::string::npos || name == "final_norm.gen") return kGen;
  if (name.find(".und.") != std::string::npos || name == "final_norm.und") return kUnd;
  if (name.rfind("stage.", 0) == 0) return kGen;
  if (name.rfind("embed.", 0) == 0 || name.rfind("head.", 0) == 0) return kUnd;
  throw ConfigError("cannot classify parameter '" + name + "'");
}

template <class Real>
struct ParamStore {
  std::map<std::string, Tensor<Real>> tensors;  // ordered: deterministic iteration

  Tensor<Real>& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }
  const Tensor<Real>& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }
};

inline const char* expert_tag(uint8_t e) { return e == kUnd ? "und" : "gen"; }

template <class Real>
ParamStore<Real> init_params(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  ParamStore<Real> store;
  Rng rng = stream_rng(seed, "init");
  const int d = cfg.d_model;
  auto mat = [&](std::vector<int> shape, double stddev) {
    return Tensor<Real>::randn(std::move(shape), rng, static_cast<Real>(stddev));
  };

  store.tensors.emplace("embed.text", mat({cfg.vocab, d}, 1.0));
  store.tensors.emplace("embed.image", mat({cfg.patch_dim(), d}, 1.0 / std::sqrt(cfg.patch_dim())));
  store.tensors.emplace("embed.null", mat({1, d}, 1.0));
  store.tensors.emplace("head.text", mat({d, cfg.vocab}, 1.0 / std::sqrt(d)));
  store.tensors.emplace("final_norm.und", Tensor<Real>::full({d}, Real(1)));
  store.tensors.emplace("final_norm.gen", Tensor<Real>::full({d}, Real(1)));

  for (Stage s : {Stage::Structure, Stage::Shape, Stage::Material}) {
    const int ld = cfg.latent_dim(s);
    const std::string base = std::string("stage.") + stage_name(s);
    store.tensors.emplace(base + ".in", mat({ld, d}, 1.0 / std::sqrt(ld)));
    store.tensors.emplace(base + ".clean", mat({ld, d}, 1.0 / std::sqrt(ld)));
    store.tensors.emplace(base + ".out", mat({d, ld}, 1.0 / std::sqrt(d)));
    store.tensors.emplace(base + ".out_bias", Tensor<Real>({ld}));
  }

  // the generation expert is cloned from the understanding expert's draw
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string lu = "layer" + std::to_string(l) + ".und.";
    std::map<std::string, Tensor<Real>> und;
    und.emplace(lu + "attn_norm", Tensor<Real>::full({d}, Real(1)));
    und.emplace(lu + "wq", mat({d, d}, 1.0 / std::sqrt(d)));
    und.emplace(lu + "wk", mat({d, d}, 1.0 / std::sqrt(d)));
    und.emplace(lu + "wv", mat({d, d}, 1.0 / std::sqrt(d)));
    und.emplace(lu + "wo", mat({d, d}, 1.0 / std::sqrt(d)));
    und.emplace(lu + "ffn_norm", Tensor<Real>::full({d}, Real(1)));
    und.emplace(lu + "ffn1", mat({d, cfg.ffn_hidden}, 1.0 / std::sqrt(d)));
    und.emplace(lu + "ffn2", mat({cfg.ffn_hidden, d}, 1.0 / std::sqrt(cfg.ffn_hidden)));
    for (auto& [name, tensor] : und) {
      std::string gen_name = name;
      gen_name.replace(gen_name.find(".und."), 5, ".gen.");
      store.tensors.emplace(gen_name, tensor);  // mirrored clone
      store.tensors.emplace(name, std::move(tensor));
    }
  }
  return store;
}

// per-step registration of all parameters as tape leaves
template <class Real>
struct TapeParams {
  std::map<std::string, typename Tape<Real>::Ref> refs;

  typename Tape<Real>::Ref at(const std::string& name) const {
    auto it = refs.find(name);
    if (it == refs.end()) throw ConfigError("parameter '" + name + "' not on tape");
    return it->second;
  }
};

template <class Real>
TapeParams<Real> register_params(Tape<Real>& tape, const ParamStore<Real>& store,
                                 bool requires_grad = true) {
  TapeParams<Real> out;
  for (const auto& [name, tensor] : store.tensors)
    out.refs.emplace(name, tape.leaf(tensor, requires_grad));
  return out;
}

// ---- forward pieces ----------------------------------------------------------

// per-token sequence context shared by all layers
template <class Real>
struct SeqContext {
  int n = 0;
  std::vector<uint8_t> expert;              // routing per token
  std::vector<PositionTriple> pos;          // rotary positions per token
  std::shared_ptr<const AttnMask> mask;     // shared across layers and heads
};

// Eq-style routed projection: token i uses its own expert's weights
template <class Real>
typename Tape<Real>::Ref route_linear(Tape<Real>& tape, const TapeParams<Real>& params,
                                      int layer, const char* which,
                                      typename Tape<Real>::Ref h,
                                      const std::vector<uint8_t>& expert) {
  const std::string base = "layer" + std::to_string(layer) + ".";
  return tape.routed_matmul(h, expert, params.at(base + "und." + which),
                            params.at(base + "gen." + which));
}

// per-expert rms-norm gains applied per token
template <class Real>
typename Tape<Real>::Ref routed_norm(Tape<Real>& tape, const TapeParams<Real>& params,
                                     const std::string& und_name, const std::string& gen_name,
                                     typename Tape<Real>::Ref h, const SeqContext<Real>& ctx) {
  Tape<Real>& t = tape;
  auto ones = t.leaf(Tensor<Real>::full({t.value(h).cols()}, Real(1)));
  auto normed = t.rms_norm(h, ones);
  auto gu = t.broadcast_row(params.at(und_name), ctx.n);
  auto gg = t.broadcast_row(params.at(gen_name), ctx.n);
  return t.mul(normed, t.select_rows(ctx.expert, gu, gg));
}

// Shared global attention: q/k/v/o projections use each token's own
// expert, keys and values aggregate over the whole sequence, the mask
// gates visibility, rotary positions are applied to q and k per head.
template <class Real>
typename Tape<Real>::Ref shared_attention(Tape<Real>& tape, const ModelConfig& cfg,
                                          const TapeParams<Real>& params, int layer,
                                          typename Tape<Real>::Ref h,
                                          const SeqContext<Real>& ctx) {
  Tape<Real>& t = tape;
  const int dh = cfg.head_dim();
  const RopeConfig rope = cfg.rope();
  auto q = route_linear(t, params, layer, "wq", h, ctx.expert);
  auto k = route_linear(t, params, layer, "wk", h, ctx.expert);
  auto v = route_linear(t, params, layer, "wv", h, ctx.expert);
  std::vector<typename Tape<Real>::Ref> head_outs;
  head_outs.reserve(cfg.n_heads);
  const Real inv_sqrt = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(dh)));
  for (int head = 0; head < cfg.n_heads; ++head) {
    // 1/sqrt(d) folded into q: an n x d pass instead of n x n
    auto qh = t.scale(t.rope_rows(t.slice_cols(q, head * dh, dh), ctx.pos, rope), inv_sqrt);
    auto kh = t.rope_rows(t.slice_cols(k, head * dh, dh), ctx.pos, rope);
    auto vh = t.slice_cols(v, head * dh, dh);
    auto scores = t.matmul(qh, t.transpose_op(kh));
    auto probs = t.masked_softmax_rows(scores, ctx.mask);
    head_outs.push_back(t.matmul(probs, vh));
  }
  auto merged = cfg.n_heads == 1 ? head_outs[0] : t.concat_cols(head_outs);
  return route_linear(t, params, layer, "wo", merged, ctx.expert);
}

// pre-norm attention + residual, pre-norm routed FFN + residual
template <class Real>
typename Tape<Real>::Ref mot_block(Tape<Real>& tape, const ModelConfig& cfg,
                                   const TapeParams<Real>& params, int layer,
                                   typename Tape<Real>::Ref h, const SeqContext<Real>& ctx) {
  Tape<Real>& t = tape;
  const std::string base = "layer" + std::to_string(layer) + ".";
  auto attn_in = routed_norm(t, params, base + "und.attn_norm", base + "gen.attn_norm", h, ctx);
  auto h1 = t.add(h, shared_attention(t, cfg, params, layer, attn_in, ctx));
  auto ffn_in = routed_norm(t, params, base + "und.ffn_norm", base + "gen.ffn_norm", h1, ctx);
  auto mid = t.gelu(route_linear(t, params, layer, "ffn1", ffn_in, ctx.expert));
  auto ffn_out = route_linear(t, params, layer, "ffn2", mid, ctx.expert);
  return t.add(h1, ffn_out);
}

template <class Real>
typename Tape<Real>::Ref run_layers(Tape<Real>& tape, const ModelConfig& cfg,
                                    const TapeParams<Real>& params,
                                    typename Tape<Real>::Ref h, const SeqContext<Real>& ctx) {
  for (int l = 0; l < cfg.n_layers; ++l) h = mot_block(tape, cfg, params, l, h, ctx);
  return h;
}

// ---- checkpoint format --------------------------------------------------------

// MOT1: magic, little-endian header (version, d_model, layers, heads,
// vocab, grid_n, coarse_n, record count), then name-sorted records of
// (name_len u32, name, rank u32, dims u32[rank], f32 payload).
inline std::string serialize_checkpoint(const ModelConfig& cfg,
                                        const std::map<std::string, Tensor<float>>& records) {
  std::string out;
  out += "MOT1";
  detail::put_u32(out, 1);
  detail::put_u32(out, static_cast<uint32_t>(cfg.d_model));
  detail::put_u32(out, static_cast<uint32_t>(cfg.n_layers));
  detail::put_u32(out, static_cast<uint32_t>(cfg.n_heads));
  detail::put_u32(out, static_cast<uint32_t>(cfg.vocab));
  detail::put_u32(out, static_cast<uint32_t>(cfg.grid_n));
  detail::put_u32(out, static_cast<uint32_t>(cfg.coarse_n()));
  detail::put_u32(out, static_cast<uint32_t>(records.size()));
  for (const auto& [name, tensor] : records) {
    detail::put_u32(out, static_cast<uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, static_cast<uint32_t>(tensor.shape.size()));
    for (int dim : tensor.shape) detail::put_u32(out, static_cast<uint32_t>(dim));
    for (float v : tensor.data) detail::put_f32(out, v);
  }
  return out;
}

struct CheckpointHeader {
  uint32_t version = 0, d_model = 0, layers = 0, heads = 0, vocab = 0, grid_n = 0, coarse_n = 0;
  uint32_t record_count = 0;

  std::string describe() const {
    std::ostringstream os;
    os << "version " << version << ", d_model " << d_model << ", layers " << layers
       << ", heads " << heads << ", vocab " << vocab << ", grid " << grid_n << ", coarse "
       << coarse_n << ", records " << record_count;
    return os.str();
  }
};

inline CheckpointHeader parse_checkpoint_header(const std::string& bytes) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "MOT1") != 0)
    throw CheckpointError("not a MOT1 checkpoint (bad magic: got '" +
                          bytes.substr(0, std::min<size_t>(4, bytes.size())) + "')");
  detail::ByteReader r{bytes, 4};
  CheckpointHeader h;
  try {
    h.version = r.u32();
    h.d_model = r.u32();
    h.layers = r.u32();
    h.heads = r.u32();
    h.vocab = r.u32();
    h.grid_n = r.u32();
    h.coarse_n = r.u32();
    h.record_count = r.u32();
  } catch (const IoError& e) {
    throw CheckpointError(std::string("truncated MOT1 header: ") + e.what());
  }
  if (h.version != 1)
    throw CheckpointError("unsupported MOT1 version " + std::to_string(h.version));
  return h;
}

inline std::map<std::string, Tensor<float>> parse_checkpoint(const std::string& bytes,
                                                             CheckpointHeader* header_out = nullptr) {
  const CheckpointHeader h = parse_checkpoint_header(bytes);
  if (header_out) *header_out = h;
  detail::ByteReader r{bytes, 4 + 8 * 4};
  std::map<std::string, Tensor<float>> records;
  try {
    for (uint32_t i = 0; i < h.record_count; ++i) {
      const uint32_t name_len = r.u32();
      r.need(name_len);
      std::string name = bytes.substr(r.i, name_len);
      r.i += name_len;
      const uint32_t rank = r.u32();
      if (rank > 4) throw CheckpointError("record '" + name + "' has implausible rank");
      std::vector<int> shape(rank);
      for (auto& d : shape) d = static_cast<int>(r.u32());
      Tensor<float> tensor(shape);
      for (auto& v : tensor.data) v = r.f32();
      records.emplace(std::move(name), std::move(tensor));
    }
  } catch (const IoError& e) {
    throw CheckpointError(std::string("corrupt MOT1 records (") + e.what() + "); header: " +
                          h.describe());
  }
  if (r.i != bytes.size())
    throw CheckpointError("trailing bytes after MOT1 records; header: " + h.describe());
  return records;
}

}  // namespace voxmot

#pragma once

#include <cmath>
#include <functional>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <vector>

#include "voxmot/pipeline.hpp"

namespace voxmot {

enum class LrSchedule : uint8_t { Constant, Cosine };

// one row of the training recipe; step counts arrive pre-scaled
struct StageConfig {
  int id = 1;
  double lr_gen = 0.0;
  double lr_und = 0.0;
  LrSchedule schedule = LrSchedule::Constant;
  long steps = 0;
  double w_ce = 1.0;
  double w_mse = 0.0;
  // sampling ratios in task order {I2T, I2M, T2M, M2T, Procedural, Semantic}
  std::array<double, 6> ratios{};
  double time_shift = 1.0;
  double p_drop = 0.0;     // image-token dropout probability
  int seq_budget = 4000;   // packing budget (tokens)
  int context_cap = 2400;  // hard per-sample cap (tokens)

  long warmup_steps() const { return std::max<long>(50, steps / 20); }

  void validate() const {
    double sum = 0;
    for (double r : ratios) {
      if (r < 0) throw ConfigError("sampling ratios must be non-negative");
      sum += r;
    }
    if (std::abs(sum - 1.0) > 1e-9)
      throw ConfigError("sampling ratios must sum to 1, got " + std::to_string(sum));
    if (time_shift < 1.0) throw ConfigError("timestep shift must be >= 1");
  }
};

// The five-stage recipe. Learning rates, schedules, loss weights, shifts
// and sampling ratios are fixed; step counts are divided by `scale`
// (token budgets are at desk scale throughout).
inline std::vector<StageConfig> default_stages(int scale = 100) {
  if (scale < 1) throw ConfigError("stage scale must be >= 1");
  auto scaled = [&](long steps) { return std::max<long>(1, steps / scale); };
  std::vector<StageConfig> s(5);
  // stage 1: mesh understanding warm-up
  s[0] = {.id = 1, .lr_gen = 0.0, .lr_und = 1e-4, .schedule = LrSchedule::Constant,
          .steps = scaled(20000), .w_ce = 1.0, .w_mse = 0.0,
          .ratios = {0.0, 0.0, 0.0, 1.0, 0.0, 0.0}, .time_shift = 1.0, .p_drop = 0.0,
          .seq_budget = 4000, .context_cap = 2400};
  // stage 2: visual-geometric initialization
  s[1] = {.id = 2, .lr_gen = 2e-4, .lr_und = 1e-5, .schedule = LrSchedule::Constant,
          .steps = scaled(150000), .w_ce = 0.25, .w_mse = 1.0,
          .ratios = {0.0, 0.9, 0.0, 0.1, 0.0, 0.0}, .time_shift = 1.0, .p_drop = 0.0,
          .seq_budget = 6400, .context_cap = 3000};
  // stage 3: semantic modality alignment
  s[2] = {.id = 3, .lr_gen = 1e-4, .lr_und = 1e-5, .schedule = LrSchedule::Cosine,
          .steps = scaled(100000), .w_ce = 0.25, .w_mse = 1.0,
          .ratios = {0.05, 0.3, 0.5, 0.15, 0.0, 0.0}, .time_shift = 3.0, .p_drop = 0.5,
          .seq_budget = 6400, .context_cap = 3000};
  // stage 4: context-aware instruction tuning
  s[3] = {.id = 4, .lr_gen = 5e-5, .lr_und = 5e-6, .schedule = LrSchedule::Cosine,
          .steps = scaled(80000), .w_ce = 0.25, .w_mse = 1.0,
          .ratios = {0.05, 0.1, 0.1, 0.1, 0.35, 0.3}, .time_shift = 3.0, .p_drop = 0.0,
          .seq_budget = 9600, .context_cap = 6000};
  // stage 5: high-quality finetuning
  s[4] = {.id = 5, .lr_gen = 5e-6, .lr_und = 1e-6, .schedule = LrSchedule::Constant,
          .steps = scaled(30000), .w_ce = 0.0, .w_mse = 1.0,
          .ratios = {0.0, 0.1, 0.4, 0.0, 0.1, 0.4}, .time_shift = 3.0, .p_drop = 0.0,
          .seq_budget = 9600, .context_cap = 6000};
  for (const auto& cfg : s) cfg.validate();
  return s;
}

// linear warmup, then constant or cosine decay to 10% of peak
inline std::pair<double, double> lr_at(const StageConfig& stage, long step) {
  if (step < 0 || step >= stage.steps)
    throw DomainError("lr_at: step " + std::to_string(step) + " outside [0, " +
                      std::to_string(stage.steps) + ")");
  const long warmup = stage.warmup_steps();
  double factor;
  if (step < warmup) {
    factor = static_cast<double>(step) / static_cast<double>(warmup);
  } else if (stage.schedule == LrSchedule::Constant || stage.steps <= warmup) {
    factor = 1.0;
  } else {
    const double tau = static_cast<double>(step - warmup) /
                       static_cast<double>(stage.steps - warmup);
    factor = 0.1 + 0.5 * (1.0 + std::cos(3.14159265358979323846 * tau)) * 0.9;
  }
  return {stage.lr_gen * factor, stage.lr_und * factor};
}

// ---- optimizer ----------------------------------------------------------------

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

template <class Real>
struct AdamState {
  std::map<std::string, Tensor<Real>> m, v;
  long step = 0;
};

// Decoupled-weight-decay update with per-expert learning rates. Rejects
// non-finite gradients before touching any state; a zero learning rate
// leaves its expert's parameters bitwise unchanged.
template <class Real>
void adamw_step(ParamStore<Real>& params, const std::map<std::string, Tensor<Real>>& grads,
                AdamState<Real>& state, double lr_gen, double lr_und,
                const AdamConfig& cfg = {}) {
  for (const auto& [name, g] : grads) {
    if (!g.all_finite())
      throw GradientError("non-finite gradient for parameter '" + name +
                          "'; step aborted, state unchanged");
    if (params.tensors.find(name) == params.tensors.end())
      throw ConfigError("gradient for unknown parameter '" + name + "'");
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (const auto& [name, g] : grads) {
    Tensor<Real>& p = params.at(name);
    auto mit = state.m.find(name);
    if (mit == state.m.end()) {
      mit = state.m.emplace(name, Tensor<Real>(p.shape)).first;
      state.v.emplace(name, Tensor<Real>(p.shape));
    }
    Tensor<Real>& m = mit->second;
    Tensor<Real>& v = state.v.at(name);
    const double lr = expert_of_param(name) == kGen ? lr_gen : lr_und;
    for (size_t i = 0; i < p.data.size(); ++i) {
      const double gi = static_cast<double>(g.data[i]);
      const double mi = cfg.beta1 * static_cast<double>(m.data[i]) + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * static_cast<double>(v.data[i]) + (1.0 - cfg.beta2) * gi * gi;
      m.data[i] = static_cast<Real>(mi);
      v.data[i] = static_cast<Real>(vi);
      if (lr == 0.0) continue;
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      const double update = mhat / (std::sqrt(vhat) + cfg.eps) +
                            cfg.weight_decay * static_cast<double>(p.data[i]);
      p.data[i] = static_cast<Real>(static_cast<double>(p.data[i]) - lr * update);
    }
  }
}

// ---- data ---------------------------------------------------------------------

struct DataSet {
  struct Item {
    OVoxelAsset asset;
    std::string caption;
  };
  std::vector<Item> statics;            // single-asset pool
  std::vector<Trajectory> procedural;   // multi-turn geometric edits
  std::vector<Trajectory> semantic;     // multi-turn palette edits

  void require(TaskKind kind) const {
    const bool ok = (kind == TaskKind::ProceduralInterleaved) ? !procedural.empty()
                    : (kind == TaskKind::SemanticInterleaved) ? !semantic.empty()
                                                              : !statics.empty();
    if (!ok) throw ConfigError(std::string("dataset has no samples for task ") + task_name(kind));
  }
};

// deterministic synthetic dataset: trajectories plus their initial states
inline DataSet synthesize_dataset(uint64_t seed, int n_procedural, int n_semantic, int turns,
                                  const TrajectoryOptions& opts) {
  DataSet data;
  for (int i = 0; i < n_procedural; ++i) {
    Trajectory t = make_trajectory(hash_combine(seed, i), turns, opts);
    data.statics.push_back({t.initial_asset(), t.caption});
    data.procedural.push_back(std::move(t));
  }
  TrajectoryOptions sem = opts;
  sem.semantic = true;
  for (int i = 0; i < n_semantic; ++i) {
    Trajectory t = make_trajectory(hash_combine(seed ^ 0x5eedull, i), turns, sem);
    data.semantic.push_back(std::move(t));
  }
  return data;
}

inline DataSet load_dataset(const std::filesystem::path& dir) {
  DataSet data;
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.path().extension() == ".traj") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no .traj files under '" + dir.string() + "'");
  for (const auto& f : files) {
    Trajectory t = read_trajectory(f);
    data.statics.push_back({t.initial_asset(), t.caption});
    const bool semantic =
        !t.turns.empty() && t.turns[0].instruction.rfind("recolor", 0) == 0;
    (semantic ? data.semantic : data.procedural).push_back(std::move(t));
  }
  return data;
}

// ---- task sampling --------------------------------------------------------------

struct TaskDraw {
  TaskKind kind = TaskKind::M2T;
  size_t index = 0;
  bool drop_images = false;
};

// ratio-weighted draw from the data stream; the image-dropout coin uses
// the dropout stream and is only flipped when p_drop > 0
inline TaskDraw sample_task(const StageConfig& stage, const DataSet& data, Rng& data_rng,
                            Rng& dropout_rng) {
  stage.validate();
  TaskDraw draw;
  const double u = data_rng.uniform();
  double acc = 0;
  int pick = 0;
  for (int k = 0; k < 6; ++k) {
    acc += stage.ratios[k];
    if (u < acc) {
      pick = k;
      break;
    }
    if (k == 5) pick = 5;
  }
  draw.kind = static_cast<TaskKind>(pick);
  data.require(draw.kind);
  const size_t pool = draw.kind == TaskKind::ProceduralInterleaved ? data.procedural.size()
                      : draw.kind == TaskKind::SemanticInterleaved ? data.semantic.size()
                                                                   : data.statics.size();
  draw.index = data_rng.uniform_int(pool);
  if (draw.kind == TaskKind::I2M && stage.p_drop > 0)
    draw.drop_images = dropout_rng.bernoulli(stage.p_drop);
  return draw;
}

// ---- training loop ---------------------------------------------------------------

template <class Real>
struct TrainState {
  ModelConfig model;
  ParamStore<Real> params;
  AdamState<Real> opt;
  GuidanceConfig guidance;
  uint64_t seed = 0;
  long global_step = 0;
  int stage_id = 1;
  long stage_step = 0;
};

template <class Real>
TrainState<Real> init_train_state(const ModelConfig& cfg, uint64_t seed) {
  TrainState<Real> s;
  s.model = cfg;
  s.params = init_params<Real>(cfg, seed);
  s.seed = seed;
  return s;
}

struct LossRow {
  long step = 0;
  int stage = 0;
  double lr_gen = 0, lr_und = 0;
  std::optional<double> l_ce;
  std::array<std::optional<double>, 3> l_fm;
  double total = 0;
};

inline const char* kLossCsvHeader =
    "step,stage,lr_gen,lr_und,l_ce,l_fm_structure,l_fm_shape,l_fm_material,total";

inline std::string loss_row_csv(const LossRow& r) {
  std::ostringstream os;
  os << r.step << "," << r.stage << "," << std::setprecision(10) << r.lr_gen << "," << r.lr_und;
  auto put = [&os](const std::optional<double>& v) {
    os << ",";
    if (v) os << std::setprecision(10) << *v;
  };
  put(r.l_ce);
  for (const auto& v : r.l_fm) put(v);
  os << "," << std::setprecision(10) << r.total;
  return os.str();
}

struct StageRunOptions {
  std::ostream* csv = nullptr;               // one line per step when set
  long halt_after = -1;                      // stop early after this many steps
  std::function<void(long)> after_step;      // checkpoint hook (global step)
};

// One packed sample per optimizer step: sample task -> pack -> forward ->
// weighted loss -> backward -> AdamW.
template <class Real>
std::vector<LossRow> run_stage(TrainState<Real>& state, const StageConfig& stage,
                               const DataSet& data, const StageRunOptions& opts = {}) {
  stage.validate();
  state.stage_id = stage.id;
  std::vector<LossRow> log;
  long done_this_call = 0;
  while (state.stage_step < stage.steps) {
    if (opts.halt_after >= 0 && done_this_call >= opts.halt_after) break;
    Rng data_rng = stream_rng(state.seed, "data", static_cast<uint64_t>(state.global_step));
    Rng noise_rng = stream_rng(state.seed, "noise", static_cast<uint64_t>(state.global_step));
    Rng drop_rng = stream_rng(state.seed, "dropout", static_cast<uint64_t>(state.global_step));

    const TaskDraw draw = sample_task(stage, data, data_rng, drop_rng);
    PackOptions popts;
    popts.time_shift = stage.time_shift;
    popts.budget_tokens = stage.seq_budget;
    popts.max_tokens = stage.context_cap;
    popts.drop_images = draw.drop_images;
    const bool fm_task = draw.kind != TaskKind::M2T && draw.kind != TaskKind::I2T;
    if (fm_task && state.guidance.dropout_p > 0 &&
        (draw.kind == TaskKind::T2M || draw.kind == TaskKind::I2M))
      popts.drop_condition = drop_rng.bernoulli(state.guidance.dropout_p);

    PackedSequence<Real> seq;
    switch (draw.kind) {
      case TaskKind::ProceduralInterleaved:
        seq = pack_trajectory<Real>(state.model, data.procedural[draw.index], PackMode::Train,
                                    &noise_rng, popts);
        break;
      case TaskKind::SemanticInterleaved:
        seq = pack_trajectory<Real>(state.model, data.semantic[draw.index], PackMode::Train,
                                    &noise_rng, popts);
        break;
      default: {
        const auto& item = data.statics[draw.index];
        seq = pack_single<Real>(state.model, draw.kind, item.asset, item.caption, &noise_rng,
                                popts);
        break;
      }
    }

    const auto [lr_gen, lr_und] = lr_at(stage, state.stage_step);
    Tape<Real> tape;
    auto params = register_params(tape, state.params, true);
    auto fwd = forward_losses(tape, state.model, params, seq);

    LossRow row;
    row.step = state.global_step;
    row.stage = stage.id;
    row.lr_gen = lr_gen;
    row.lr_und = lr_und;

    std::optional<typename Tape<Real>::Ref> total;
    auto add_term = [&](typename Tape<Real>::Ref term, double w) {
      if (w == 0.0) return;
      auto scaled = tape.scale(term, static_cast<Real>(w));
      total = total ? tape.add(*total, scaled) : scaled;
    };
    if (fwd.ce) {
      row.l_ce = static_cast<double>(tape.value(*fwd.ce).data[0]);
      add_term(*fwd.ce, stage.w_ce);
    }
    for (int s = 0; s < 3; ++s) {
      if (!fwd.fm[s]) continue;
      row.l_fm[s] = static_cast<double>(tape.value(*fwd.fm[s]).data[0]);
      add_term(*fwd.fm[s], stage.w_mse);
    }
    if (total) {
      row.total = static_cast<double>(tape.value(*total).data[0]);
      tape.backward(*total);
      std::map<std::string, Tensor<Real>> grads;
      for (const auto& [name, ref] : params.refs)
        if (tape.has_grad(ref)) grads.emplace(name, tape.grad(ref));
      adamw_step(state.params, grads, state.opt, lr_gen, lr_und);
    }

    if (opts.csv) (*opts.csv) << loss_row_csv(row) << "\n" << std::flush;
    log.push_back(row);
    state.stage_step += 1;
    state.global_step += 1;
    done_this_call += 1;
    if (opts.after_step) opts.after_step(state.global_step);
  }
  if (state.stage_step >= stage.steps) state.stage_step = 0;  // stage complete
  return log;
}

// mean summed flow-matching loss over held-out trajectories, no updates;
// with `last_turn_only` earlier turns contribute clean context only
template <class Real>
double evaluate_fm(const TrainState<Real>& state, const std::vector<Trajectory>& eval_set,
                   bool last_turn_only, uint64_t eval_seed, double time_shift = 1.0) {
  if (eval_set.empty()) throw ConfigError("evaluate_fm: empty evaluation set");
  double total = 0;
  long count = 0;
  for (size_t i = 0; i < eval_set.size(); ++i) {
    Rng noise = stream_rng(eval_seed, "eval-noise", i);
    PackOptions opts;
    opts.time_shift = time_shift;
    opts.noisy_last_turn_only = last_turn_only;
    PackedSequence<Real> seq =
        pack_trajectory<Real>(state.model, eval_set[i], PackMode::Train, &noise, opts);
    Tape<Real> tape;
    auto params = register_params(tape, state.params, false);
    auto fwd = forward_losses(tape, state.model, params, seq);
    for (int s = 0; s < 3; ++s)
      if (fwd.fm[s]) {
        total += static_cast<double>(tape.value(*fwd.fm[s]).data[0]);
        ++count;
      }
  }
  return count ? total / count : 0.0;
}

// ---- train-state checkpointing -----------------------------------------------

inline constexpr const char* kOptMomentPrefix1 = "opt.m.";
inline constexpr const char* kOptMomentPrefix2 = "opt.v.";

inline std::string serialize_train_state(const TrainState<float>& state) {
  std::map<std::string, Tensor<float>> records = state.params.tensors;
  for (const auto& [name, t] : state.opt.m) records.emplace(kOptMomentPrefix1 + name, t);
  for (const auto& [name, t] : state.opt.v) records.emplace(kOptMomentPrefix2 + name, t);
  records.emplace("opt.step", Tensor<float>({1}, {static_cast<float>(state.opt.step)}));
  records.emplace("trainer.global_step",
                  Tensor<float>({1}, {static_cast<float>(state.global_step)}));
  records.emplace("trainer.stage_id", Tensor<float>({1}, {static_cast<float>(state.stage_id)}));
  records.emplace("trainer.stage_step",
                  Tensor<float>({1}, {static_cast<float>(state.stage_step)}));
  // the seed is stored as four 16-bit words; each is exact in f32
  for (int w = 0; w < 4; ++w)
    records.emplace("trainer.seed.w" + std::to_string(w),
                    Tensor<float>({1}, {static_cast<float>((state.seed >> (16 * w)) & 0xffffull)}));
  return serialize_checkpoint(state.model, records);
}

inline TrainState<float> parse_train_state(const std::string& bytes, const ModelConfig& base) {
  CheckpointHeader header;
  auto records = parse_checkpoint(bytes, &header);
  TrainState<float> state;
  state.model = base;
  state.model.d_model = static_cast<int>(header.d_model);
  state.model.n_layers = static_cast<int>(header.layers);
  state.model.n_heads = static_cast<int>(header.heads);
  state.model.vocab = static_cast<int>(header.vocab);
  state.model.grid_n = static_cast<int>(header.grid_n);
  auto take_scalar = [&](const char* name) -> double {
    auto it = records.find(name);
    if (it == records.end()) throw CheckpointError(std::string("missing record ") + name);
    const double v = it->second.data.at(0);
    records.erase(it);
    return v;
  };
  state.opt.step = static_cast<long>(take_scalar("opt.step"));
  state.global_step = static_cast<long>(take_scalar("trainer.global_step"));
  state.stage_id = static_cast<int>(take_scalar("trainer.stage_id"));
  state.stage_step = static_cast<long>(take_scalar("trainer.stage_step"));
  state.seed = 0;
  for (int w = 0; w < 4; ++w)
    state.seed |= static_cast<uint64_t>(take_scalar(("trainer.seed.w" + std::to_string(w)).c_str()))
                  << (16 * w);
  for (auto& [name, tensor] : records) {
    if (name.rfind(kOptMomentPrefix1, 0) == 0)
      state.opt.m.emplace(name.substr(6), std::move(tensor));
    else if (name.rfind(kOptMomentPrefix2, 0) == 0)
      state.opt.v.emplace(name.substr(6), std::move(tensor));
    else
      state.params.tensors.emplace(name, std::move(tensor));
  }
  // ffn width is not part of the header; recover it from the weights
  state.model.ffn_hidden = state.params.at("layer0.und.ffn1").cols();
  state.model.validate();
  return state;
}

}  // namespace voxmot

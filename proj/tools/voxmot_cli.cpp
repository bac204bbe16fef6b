// Command-line front end: dataset generation, training, generation,
// editing, captioning, mask inspection, checkpoint tooling.
//
// Exit codes: 0 success, 1 usage, 2 I/O, 3 checkpoint, 4 empty generation.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "voxmot/config.hpp"
#include "voxmot/curriculum.hpp"
#include "voxmot/pipeline.hpp"

namespace fs = std::filesystem;
using namespace voxmot;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

RunConfig build_config(const std::string& config_path, const std::vector<std::string>& sets) {
  RunConfig cfg;
  if (!config_path.empty()) cfg.load_file(config_path);
  for (const auto& pair : sets) cfg.set_pair(pair);
  cfg.print_effective(std::cout);
  return cfg;
}

TrainState<float> load_state(const fs::path& ckpt, const ModelConfig& base) {
  return parse_train_state(read_file(ckpt), base);
}

int cmd_make_data(const std::string& out, long count, int turns, uint64_t seed, int grid) {
  if (count < 1) throw UsageError("--count must be >= 1");
  if (turns < 1 || turns > 5) throw UsageError("--turns must be in [1, 5]");
  fs::path dir(out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + out + "': " + ec.message());

  TrajectoryOptions opts;
  opts.grid_n = grid;
  opts.max_extent = std::max(2, grid / 4);
  const long n_semantic = count / 4;
  const long n_procedural = count - n_semantic;
  long written = 0;
  for (long i = 0; i < n_procedural; ++i) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "proc_%04ld", i);
    write_trajectory(make_trajectory(hash_combine(seed, i), turns, opts), dir, stem);
    ++written;
  }
  TrajectoryOptions sem = opts;
  sem.semantic = true;
  for (long i = 0; i < n_semantic; ++i) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "sem_%04ld", i);
    write_trajectory(make_trajectory(hash_combine(seed ^ 0x5eedull, i), turns, sem), dir, stem);
    ++written;
  }
  std::cout << "wrote " << written << " trajectories (" << n_procedural << " procedural, "
            << n_semantic << " semantic) with " << turns << " turns each to " << out << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& sets, int only_stage,
              const std::string& resume) {
  RunConfig cfg = build_config(config_path, sets);
  const ModelConfig model = cfg.model();
  const fs::path out_dir(cfg.str("out_dir"));
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create out_dir '" + out_dir.string() + "': " + ec.message());
  const fs::path ckpt_path = out_dir / "ckpt.mot";
  const fs::path csv_path = out_dir / "loss.csv";

  DataSet data = load_dataset(cfg.str("data_dir"));
  TrainState<float> state;
  bool fresh = true;
  if (!resume.empty()) {
    state = load_state(resume, model);
    fresh = false;
    std::cout << "resumed from " << resume << " at step " << state.global_step << " (stage "
              << state.stage_id << ", stage step " << state.stage_step << ")\n";
  } else {
    state = init_train_state<float>(model, static_cast<uint64_t>(cfg.integer("seed")));
  }
  state.guidance = cfg.guidance_cfg();

  std::ofstream csv(csv_path, fresh ? std::ios::trunc : std::ios::app);
  if (!csv) throw IoError("cannot open loss log '" + csv_path.string() + "'");
  if (fresh) csv << kLossCsvHeader << "\n";

  auto stages = default_stages(static_cast<int>(cfg.integer("stage_scale")));
  const long ckpt_every = cfg.integer("ckpt_every");
  const long halt_after = cfg.integer("halt_after");

  auto save = [&] { write_file(ckpt_path, serialize_train_state(state)); };
  StageRunOptions run_opts;
  run_opts.csv = &csv;
  run_opts.halt_after = halt_after;
  run_opts.after_step = [&](long step) {
    if (ckpt_every > 0 && step % ckpt_every == 0) save();
  };

  if (only_stage > 0) {
    if (only_stage > static_cast<int>(stages.size())) throw UsageError("--stage out of range");
    if (state.stage_id != only_stage) {
      state.stage_id = only_stage;
      state.stage_step = 0;
    }
    run_stage(state, stages[only_stage - 1], data, run_opts);
    save();
  } else {
    // halt_after caps the optimizer steps of this invocation as a whole
    long remaining = halt_after;
    for (const auto& stage : stages) {
      if (stage.id < state.stage_id) continue;
      run_opts.halt_after = remaining;
      const auto log = run_stage(state, stage, data, run_opts);
      save();
      if (remaining >= 0) {
        remaining -= static_cast<long>(log.size());
        if (remaining <= 0 && state.stage_step != 0) break;  // halted mid-stage
      }
      if (state.stage_step == 0 && stage.id == state.stage_id && stage.id < 5)
        state.stage_id = stage.id + 1;
      if (remaining == 0) break;
    }
  }
  std::cout << "training stopped at global step " << state.global_step << "; checkpoint "
            << ckpt_path << "\n";
  return 0;
}

int cmd_generate(const std::string& config_path, const std::vector<std::string>& sets,
                 const std::string& ckpt, const std::string& prompt, const std::string& image_of,
                 uint64_t seed, int steps, double guidance, const std::string& out) {
  RunConfig cfg = build_config(config_path, sets);
  TrainState<float> state = load_state(ckpt, cfg.model());
  SamplerConfig sampler = cfg.sampler();
  if (steps > 0) sampler.steps = steps;
  if (guidance >= 0) sampler.guidance = guidance;
  std::optional<OVoxelAsset> image;
  if (!image_of.empty()) image = read_asset(image_of);
  OVoxelAsset asset = generate(state.model, state.params, prompt, image, sampler, seed);
  write_asset(asset, out);
  std::cout << "generated " << asset.count() << " voxels -> " << out << "\n";
  return 0;
}

int cmd_edit(const std::string& config_path, const std::vector<std::string>& sets,
             const std::string& ckpt, const std::string& history, const std::string& instruction,
             uint64_t seed, int steps, double guidance, const std::string& out) {
  RunConfig cfg = build_config(config_path, sets);
  TrainState<float> state = load_state(ckpt, cfg.model());
  SamplerConfig sampler = cfg.sampler();
  if (steps > 0) sampler.steps = steps;
  if (guidance >= 0) sampler.guidance = guidance;
  Trajectory traj = read_trajectory(history);
  OVoxelAsset asset = edit(state.model, state.params, traj, instruction, sampler, seed);
  write_asset(asset, out);
  std::cout << "edited -> " << asset.count() << " voxels -> " << out << "\n";
  return 0;
}

int cmd_caption(const std::string& config_path, const std::vector<std::string>& sets,
                const std::string& ckpt, const std::string& asset_path, int max_len,
                const std::string& out) {
  RunConfig cfg = build_config(config_path, sets);
  TrainState<float> state = load_state(ckpt, cfg.model());
  OVoxelAsset asset = read_asset(asset_path);
  const std::string text = caption(state.model, state.params, asset, max_len);
  if (out.empty()) {
    std::cout << text << "\n";
  } else {
    write_file(out, text);
    std::cout << "caption -> " << out << "\n";
  }
  return 0;
}

int cmd_inspect_mask(const std::string& layout, const std::string& out) {
  const BlockTable table = parse_layout(layout);
  build_mask(table);  // validates; asserts no all-masked rows
  const std::string grid = mask_grid_text(table);
  if (out.empty()) {
    std::cout << grid;
  } else {
    write_file(out, grid);
    std::cout << "mask grid -> " << out << "\n";
  }
  return 0;
}

int cmd_ckpt_info(const std::string& ckpt) {
  const std::string bytes = read_file(ckpt);
  CheckpointHeader header;
  const auto records = parse_checkpoint(bytes, &header);
  std::cout << "MOT1 " << header.describe() << "\n";
  for (const auto& [name, tensor] : records)
    std::cout << name << " " << shape_str(tensor.shape) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hard-routed dual-expert transformer on sparse voxels"};
  app.require_subcommand(1);

  std::string config_path, out, ckpt, prompt, image_of, history, instruction, asset_path, layout,
      resume;
  std::vector<std::string> sets;
  long count = 16;
  int turns = 1, grid = 16, steps = -1, max_len = 64, only_stage = -1;
  uint64_t seed = 0;
  double guidance = -1;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "key = value configuration file");
    sub->add_option("--set", sets, "override a config key (key=value, repeatable)");
  };

  auto* mk = app.add_subcommand("make-data", "generate a synthetic trajectory dataset");
  mk->add_option("--out", out, "output directory")->required();
  mk->add_option("--count", count, "number of trajectories");
  mk->add_option("--turns", turns, "edit turns per trajectory");
  mk->add_option("--seed", seed, "dataset seed");
  mk->add_option("--grid", grid, "voxel grid resolution");

  auto* tr = app.add_subcommand("train", "run the staged training recipe");
  add_common(tr);
  tr->add_option("--stage", only_stage, "run a single stage (1-5)");
  tr->add_option("--resume", resume, "checkpoint to continue from");

  auto* gen = app.add_subcommand("generate", "sample an asset from text and/or image");
  add_common(gen);
  gen->add_option("--ckpt", ckpt, "checkpoint path")->required();
  gen->add_option("--prompt", prompt, "text prompt");
  gen->add_option("--image-of", image_of, "asset whose render conditions the sample");
  gen->add_option("--seed", seed, "sampler seed");
  gen->add_option("--steps", steps, "euler steps");
  gen->add_option("--guidance", guidance, "guidance weight");
  gen->add_option("--out", out, "output .ovx path")->required();

  auto* ed = app.add_subcommand("edit", "history-conditioned editing");
  add_common(ed);
  ed->add_option("--ckpt", ckpt, "checkpoint path")->required();
  ed->add_option("--history", history, "trajectory file with the interaction history")->required();
  ed->add_option("--instruction", instruction, "edit instruction")->required();
  ed->add_option("--seed", seed, "sampler seed");
  ed->add_option("--steps", steps, "euler steps");
  ed->add_option("--guidance", guidance, "guidance weight");
  ed->add_option("--out", out, "output .ovx path")->required();

  auto* cap = app.add_subcommand("caption", "greedy mesh captioning");
  add_common(cap);
  cap->add_option("--ckpt", ckpt, "checkpoint path")->required();
  cap->add_option("--asset", asset_path, "input .ovx asset")->required();
  cap->add_option("--max-len", max_len, "caption length budget");
  cap->add_option("--out", out, "write the caption here instead of stdout");

  auto* im = app.add_subcommand("inspect-mask", "emit the block visibility grid");
  im->add_option("--layout", layout, "comma-separated kind@turn:len blocks")->required();
  im->add_option("--out", out, "write the grid here instead of stdout");

  auto* ci = app.add_subcommand("ckpt-info", "print checkpoint header and records");
  ci->add_option("--ckpt", ckpt, "checkpoint path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }

  try {
    if (mk->parsed()) return cmd_make_data(out, count, turns, seed, grid);
    if (tr->parsed()) return cmd_train(config_path, sets, only_stage, resume);
    if (gen->parsed())
      return cmd_generate(config_path, sets, ckpt, prompt, image_of, seed, steps, guidance, out);
    if (ed->parsed())
      return cmd_edit(config_path, sets, ckpt, history, instruction, seed, steps, guidance, out);
    if (cap->parsed()) return cmd_caption(config_path, sets, ckpt, asset_path, max_len, out);
    if (im->parsed()) return cmd_inspect_mask(layout, out);
    if (ci->parsed()) return cmd_ckpt_info(ckpt);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return 3;
  } catch (const GenerationError& e) {
    std::cerr << "generation error: " << e.what() << "\n";
    return 4;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    // remaining library errors are argument/contract problems
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "voxmot/curriculum.hpp"
#include "voxmot/model.hpp"
#include "voxmot/ovoxel.hpp"

namespace fs = std::filesystem;
using namespace voxmot;

namespace {

const char* kCli = VOXMOT_CLI_PATH;

struct Scratch {
  fs::path dir;
  explicit Scratch(const char* tag) {
    dir = fs::temp_directory_path() / (std::string("voxmot_cli_") + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Scratch() { fs::remove_all(dir); }
  fs::path operator/(const std::string& p) const { return dir / p; }
};

int run(const std::string& args, const fs::path& out_file = {}) {
  std::string cmd = std::string(kCli) + " " + args;
  cmd += out_file.empty() ? " >/dev/null 2>&1" : " >" + out_file.string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_config(const fs::path& path, const fs::path& data_dir, const fs::path& out_dir,
                  const std::string& extra = "") {
  std::ofstream f(path);
  f << "d_model = 24\nheads = 2\nlayers = 2\nffn_hidden = 48\ngrid_n = 8\n";
  f << "data_dir = " << data_dir.string() << "\nout_dir = " << out_dir.string() << "\n";
  f << "seed = 5\nstage_scale = 10000\nckpt_every = 5\n" << extra;
}

std::vector<long> csv_steps(const fs::path& csv) {
  std::ifstream f(csv);
  std::string line;
  std::getline(f, line);  // header
  std::vector<long> steps;
  while (std::getline(f, line))
    if (!line.empty()) steps.push_back(std::stol(line.substr(0, line.find(','))));
  return steps;
}

}  // namespace

TEST(CliMakeData, DeterministicTreesAndCount) {
  Scratch s("mkdata");
  ASSERT_EQ(run("make-data --out " + (s / "a").string() + " --count 10 --turns 2 --seed 1 --grid 8"), 0);
  ASSERT_EQ(run("make-data --out " + (s / "b").string() + " --count 10 --turns 2 --seed 1 --grid 8"), 0);
  size_t traj_count = 0, files = 0;
  for (const auto& e : fs::directory_iterator(s / "a")) {
    ++files;
    if (e.path().extension() == ".traj") ++traj_count;
    EXPECT_EQ(slurp(e.path()), slurp(s / "b" / e.path().filename().string())) << e.path();
  }
  EXPECT_EQ(traj_count, 10u);  // filesystem oracle: one .traj per requested trajectory
  EXPECT_GT(files, traj_count);
}

TEST(CliMakeData, ZeroTurnsIsUsageError) {
  Scratch s("mkdata_bad");
  EXPECT_EQ(run("make-data --out " + (s / "x").string() + " --count 2 --turns 0 --seed 1"), 1);
}

TEST(CliTrain, StageOneLeavesGenAtInit) {
  Scratch s("train_s1");
  ASSERT_EQ(run("make-data --out " + (s / "data").string() + " --count 6 --turns 1 --seed 3 --grid 8"), 0);
  write_config(s / "run.cfg", s / "data", s / "out");
  ASSERT_EQ(run("train --config " + (s / "run.cfg").string() + " --stage 1"), 0);

  ModelConfig cfg;
  cfg.d_model = 24;
  cfg.n_heads = 2;
  cfg.n_layers = 2;
  cfg.ffn_hidden = 48;
  cfg.grid_n = 8;
  const auto init = init_params<float>(cfg, 5);  // same seed as the config file
  const auto records = parse_checkpoint(slurp(s / "out" / "ckpt.mot"));
  int compared = 0;
  for (const auto& [name, tensor] : init.tensors) {
    if (expert_of_param(name) != kGen) continue;
    ASSERT_TRUE(records.count(name)) << name;
    EXPECT_EQ(records.at(name).data, tensor.data) << name;
    ++compared;
  }
  EXPECT_GT(compared, 10);
}

TEST(CliTrain, ResumeContinuesCsvWithoutGaps) {
  Scratch s("train_resume");
  ASSERT_EQ(run("make-data --out " + (s / "data").string() + " --count 6 --turns 1 --seed 3 --grid 8"), 0);
  write_config(s / "run.cfg", s / "data", s / "out", "halt_after = 4\n");
  ASSERT_EQ(run("train --config " + (s / "run.cfg").string()), 0);
  const auto first = csv_steps(s / "out" / "loss.csv");
  ASSERT_EQ(first.size(), 4u);

  write_config(s / "resume.cfg", s / "data", s / "out");
  ASSERT_EQ(run("train --config " + (s / "resume.cfg").string() + " --resume " +
                (s / "out" / "ckpt.mot").string()),
            0);
  const auto steps = csv_steps(s / "out" / "loss.csv");
  ASSERT_GT(steps.size(), first.size());
  for (size_t i = 0; i < steps.size(); ++i) EXPECT_EQ(steps[i], static_cast<long>(i));
}

TEST(CliGenerate, DeterministicBytesAndErrorPaths) {
  Scratch s("gen");
  ASSERT_EQ(run("make-data --out " + (s / "data").string() + " --count 4 --turns 1 --seed 3 --grid 8"), 0);
  write_config(s / "run.cfg", s / "data", s / "out", "halt_after = 2\n");
  ASSERT_EQ(run("train --config " + (s / "run.cfg").string()), 0);
  const std::string common = " --config " + (s / "run.cfg").string() + " --ckpt " +
                             (s / "out" / "ckpt.mot").string() +
                             " --prompt \"a box at (1,1,1) size (2,2,2)\" --seed 9 --steps 3 "
                             "--guidance 1 --out ";
  ASSERT_EQ(run("generate" + common + (s / "a.ovx").string()), 0);
  ASSERT_EQ(run("generate" + common + (s / "b.ovx").string()), 0);
  EXPECT_EQ(slurp(s / "a.ovx"), slurp(s / "b.ovx"));

  // empty structure stage: out_bias forced hugely negative
  TrainState<float> state = parse_train_state(slurp(s / "out" / "ckpt.mot"), ModelConfig{});
  state.params.at("stage.structure.out_bias") = Tensor<float>::full({8}, -100.0f);
  write_file(s / "empty.mot", serialize_train_state(state));
  EXPECT_EQ(run("generate --config " + (s / "run.cfg").string() + " --ckpt " +
                (s / "empty.mot").string() +
                " --prompt \"a box\" --seed 1 --steps 2 --guidance 1 --out " +
                (s / "c.ovx").string()),
            4);

  // corrupt checkpoint -> 3; missing history -> 2
  write_file(s / "bad.mot", "MOT1garbage");
  EXPECT_EQ(run("ckpt-info --ckpt " + (s / "bad.mot").string()), 3);
  EXPECT_EQ(run("edit --config " + (s / "run.cfg").string() + " --ckpt " +
                (s / "out" / "ckpt.mot").string() + " --history " + (s / "nope.traj").string() +
                " --instruction \"translate by (1,0,0)\" --out " + (s / "d.ovx").string()),
            2);
}

TEST(CliCaptionAndEdit, RoundTripThroughFiles) {
  Scratch s("cap");
  ASSERT_EQ(run("make-data --out " + (s / "data").string() + " --count 4 --turns 1 --seed 3 --grid 8"), 0);
  write_config(s / "run.cfg", s / "data", s / "out", "halt_after = 2\n");
  ASSERT_EQ(run("train --config " + (s / "run.cfg").string()), 0);
  ASSERT_EQ(run("caption --config " + (s / "run.cfg").string() + " --ckpt " +
                (s / "out" / "ckpt.mot").string() + " --asset " +
                (s / "data" / "proc_0000_t0.ovx").string() + " --max-len 16 --out " +
                (s / "cap.txt").string()),
            0);
  EXPECT_LE(slurp(s / "cap.txt").size(), 16u);

  ASSERT_EQ(run("edit --config " + (s / "run.cfg").string() + " --ckpt " +
                (s / "out" / "ckpt.mot").string() + " --history " +
                (s / "data" / "proc_0000.traj").string() +
                " --instruction \"translate by (1,0,0)\" --seed 2 --steps 2 --guidance 1 "
                "--out " + (s / "e.ovx").string()),
            0);
  EXPECT_GE(read_asset(s / "e.ovx").count(), 1u);
}

TEST(CliInspectMask, GoldenAndErrors) {
  Scratch s("mask");
  const std::string layout =
      "text@1:4,image@1:16,noise_ss@1:8,clean_ss@1:8,noise_shape@1:6,clean_shape@1:6,"
      "noise_material@1:6,clean_material@1:6,text@2:4,noise_ss@2:8";
  ASSERT_EQ(run("inspect-mask --layout " + layout + " --out " + (s / "grid.txt").string()), 0);
  EXPECT_EQ(slurp(s / "grid.txt"),
            slurp(fs::path(VOXMOT_SOURCE_DIR) / "tests" / "golden" / "table1_mask.txt"));
  EXPECT_EQ(run("inspect-mask --layout bogus@1:2"), 1);
  EXPECT_EQ(run("inspect-mask --layout text@2:4,image@1:4"), 1);
}

TEST(CliUsage, MissingSubcommandOrFlagIsUsageError) {
  EXPECT_EQ(run(""), 1);
  EXPECT_EQ(run("generate"), 1);  // missing required flags
  Scratch s("usage");
  write_config(s / "run.cfg", s / "data", s / "out", "bogus_key = 1\n");
  EXPECT_EQ(run("train --config " + (s / "run.cfg").string()), 1);
}

#include <gtest/gtest.h>

#include <cstring>
#include <sstream>

#include "voxmot/curriculum.hpp"

using namespace voxmot;

namespace {

ModelConfig train_cfg() {
  ModelConfig cfg;
  cfg.d_model = 24;
  cfg.n_heads = 2;
  cfg.n_layers = 2;
  cfg.ffn_hidden = 48;
  cfg.grid_n = 8;
  return cfg;
}

TrajectoryOptions data_opts() {
  TrajectoryOptions o;
  o.grid_n = 8;
  o.max_extent = 3;
  return o;
}

StageConfig tiny_stage(int id, long steps) {
  StageConfig s;
  s.id = id;
  s.lr_gen = 1e-3;
  s.lr_und = 1e-3;
  s.steps = steps;
  s.w_ce = 0.25;
  s.w_mse = 1.0;
  s.ratios = {0, 0.5, 0.3, 0.2, 0, 0};
  s.time_shift = 1.0;
  return s;
}

}  // namespace

TEST(Recipe, StageThreeRowIsExact) {
  auto stages = default_stages();
  const StageConfig& s3 = stages[2];
  EXPECT_EQ(s3.id, 3);
  EXPECT_DOUBLE_EQ(s3.lr_gen, 1e-4);
  EXPECT_DOUBLE_EQ(s3.lr_und, 1e-5);
  EXPECT_EQ(s3.schedule, LrSchedule::Cosine);
  EXPECT_DOUBLE_EQ(s3.ratios[0], 0.05);  // I2T
  EXPECT_DOUBLE_EQ(s3.ratios[1], 0.3);   // I2M
  EXPECT_DOUBLE_EQ(s3.ratios[2], 0.5);   // T2M
  EXPECT_DOUBLE_EQ(s3.ratios[3], 0.15);  // M2T
  EXPECT_DOUBLE_EQ(s3.time_shift, 3.0);
  EXPECT_DOUBLE_EQ(s3.w_ce, 0.25);
  EXPECT_DOUBLE_EQ(s3.w_mse, 1.0);
}

TEST(Recipe, AllRatioRowsSumToOne) {
  for (const auto& s : default_stages()) {
    double sum = 0;
    for (double r : s.ratios) sum += r;
    EXPECT_NEAR(sum, 1.0, 1e-9) << "stage " << s.id;
  }
  // stage 4 row from the recipe table
  const StageConfig s4 = default_stages()[3];
  EXPECT_DOUBLE_EQ(s4.ratios[4], 0.35);
  EXPECT_DOUBLE_EQ(s4.ratios[5], 0.3);
}

TEST(Recipe, StageOneFreezesGeneration) {
  const auto stages = default_stages();
  const StageConfig& s1 = stages[0];
  EXPECT_DOUBLE_EQ(s1.lr_gen, 0.0);
  EXPECT_DOUBLE_EQ(s1.ratios[3], 1.0);  // M2T only
  EXPECT_DOUBLE_EQ(s1.w_ce, 1.0);
  EXPECT_DOUBLE_EQ(s1.w_mse, 0.0);
}

TEST(Recipe, StepsScaleAndValidate) {
  auto s = default_stages(100);
  EXPECT_EQ(s[0].steps, 200);
  EXPECT_EQ(s[1].steps, 1500);
  EXPECT_EQ(s[4].steps, 300);
  EXPECT_THROW(default_stages(0), ConfigError);
}

TEST(LrSchedule, WarmupConstantAndCosine) {
  StageConfig s = tiny_stage(2, 2000);
  s.lr_gen = 2e-4;
  s.lr_und = 1e-5;
  auto [g0, u0] = lr_at(s, 0);
  EXPECT_EQ(g0, 0.0);
  EXPECT_EQ(u0, 0.0);
  auto [g1, u1] = lr_at(s, s.warmup_steps());
  EXPECT_DOUBLE_EQ(g1, 2e-4);  // constant schedule hits the peak after warmup
  EXPECT_DOUBLE_EQ(u1, 1e-5);

  s.schedule = LrSchedule::Cosine;
  const long warmup = s.warmup_steps();
  const long mid = warmup + (s.steps - warmup) / 2;
  auto [gm, um] = lr_at(s, mid);
  const double tau = static_cast<double>(mid - warmup) / (s.steps - warmup);
  const double peak = 2e-4, floor = 0.1 * peak;
  EXPECT_DOUBLE_EQ(gm, floor + 0.5 * (1 + std::cos(3.14159265358979323846 * tau)) * (peak - floor));
  EXPECT_THROW(lr_at(s, -1), DomainError);
  EXPECT_THROW(lr_at(s, s.steps), DomainError);
}

TEST(AdamW, DecayOnlyStepShrinksExactly) {
  ModelConfig cfg = train_cfg();
  auto params = init_params<double>(cfg, 1);
  auto reference = params;
  AdamState<double> opt;
  std::map<std::string, Tensor<double>> grads;
  grads.emplace("layer0.und.wq", Tensor<double>(params.at("layer0.und.wq").shape));
  adamw_step(params, grads, opt, /*lr_gen=*/1e-2, /*lr_und=*/1e-2);
  const auto& p = params.at("layer0.und.wq");
  const auto& r = reference.at("layer0.und.wq");
  for (size_t i = 0; i < p.data.size(); ++i)
    EXPECT_DOUBLE_EQ(p.data[i], r.data[i] * (1.0 - 1e-2 * 0.05));
}

TEST(AdamW, SingleScalarHandOracle) {
  // one parameter, one step, worked by hand
  ParamStore<double> params;
  params.tensors.emplace("head.text", Tensor<double>({1}, {0.5}));
  AdamState<double> opt;
  std::map<std::string, Tensor<double>> grads;
  grads.emplace("head.text", Tensor<double>({1}, {0.3}));
  const double lr = 1e-3;
  adamw_step(params, grads, opt, 0.0, lr);

  const double m = 0.1 * 0.3;           // (1-beta1) g
  const double v = 0.05 * 0.3 * 0.3;    // (1-beta2) g^2
  const double mhat = m / (1 - 0.9);
  const double vhat = v / (1 - 0.95);
  const double expected = 0.5 - lr * (mhat / (std::sqrt(vhat) + 1e-8) + 0.05 * 0.5);
  EXPECT_NEAR(params.at("head.text").data[0], expected, 1e-12);
}

TEST(AdamW, ZeroGenLrLeavesGenBitwiseUnchanged) {
  ModelConfig cfg = train_cfg();
  auto params = init_params<float>(cfg, 2);
  auto reference = params;
  AdamState<float> opt;
  std::map<std::string, Tensor<float>> grads;
  Rng rng(3);
  for (const auto& [name, t] : params.tensors)
    grads.emplace(name, Tensor<float>::randn(t.shape, rng));
  adamw_step(params, grads, opt, /*lr_gen=*/0.0, /*lr_und=*/1e-3);
  for (const auto& [name, t] : params.tensors) {
    const auto& ref = reference.at(name);
    if (expert_of_param(name) == kGen) {
      ASSERT_EQ(0, std::memcmp(t.data.data(), ref.data.data(), t.data.size() * sizeof(float)))
          << name;
    } else {
      EXPECT_NE(t.data, ref.data) << name;
    }
  }
}

TEST(AdamW, NonFiniteGradientAbortsUntouched) {
  ModelConfig cfg = train_cfg();
  auto params = init_params<float>(cfg, 4);
  auto reference = params;
  AdamState<float> opt;
  std::map<std::string, Tensor<float>> grads;
  grads.emplace("head.text", Tensor<float>(params.at("head.text").shape));
  grads.at("head.text").data[0] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(adamw_step(params, grads, opt, 1e-3, 1e-3), GradientError);
  EXPECT_EQ(opt.step, 0);
  for (const auto& [name, t] : params.tensors)
    EXPECT_EQ(t.data, reference.at(name).data) << name;
}

TEST(AdamW, UpdateOrderIndependent) {
  // identical grads applied through two maps with different insertion
  // orders must produce identical parameters
  ModelConfig cfg = train_cfg();
  auto a = init_params<float>(cfg, 5);
  auto b = a;
  AdamState<float> oa, ob;
  Rng rng(6);
  std::vector<std::pair<std::string, Tensor<float>>> named;
  for (const auto& [name, t] : a.tensors) named.emplace_back(name, Tensor<float>::randn(t.shape, rng));
  std::map<std::string, Tensor<float>> g1(named.begin(), named.end());
  std::map<std::string, Tensor<float>> g2(named.rbegin(), named.rend());
  adamw_step(a, g1, oa, 1e-3, 1e-3);
  adamw_step(b, g2, ob, 1e-3, 1e-3);
  for (const auto& [name, t] : a.tensors) EXPECT_EQ(t.data, b.at(name).data) << name;
}

TEST(Sampling, DegenerateRatioAlwaysPicksThatKind) {
  StageConfig s = tiny_stage(1, 10);
  s.ratios = {0, 0, 0, 1.0, 0, 0};
  DataSet data = synthesize_dataset(1, 3, 2, 1, data_opts());
  for (int i = 0; i < 50; ++i) {
    Rng d = stream_rng(9, "data", i);
    Rng p = stream_rng(9, "dropout", i);
    EXPECT_EQ(sample_task(s, data, d, p).kind, TaskKind::M2T);
  }
}

TEST(Sampling, StageThreeFrequenciesMatchRatios) {
  const StageConfig s3 = default_stages()[2];
  DataSet data = synthesize_dataset(2, 3, 2, 1, data_opts());
  std::array<long, 6> counts{};
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    Rng d = stream_rng(31, "data", i);
    Rng p = stream_rng(31, "dropout", i);
    counts[static_cast<int>(sample_task(s3, data, d, p).kind)] += 1;
  }
  const std::array<double, 4> expect = {0.05, 0.3, 0.5, 0.15};
  for (int k = 0; k < 4; ++k)
    EXPECT_NEAR(static_cast<double>(counts[k]) / n, expect[k], 0.01) << k;
  EXPECT_EQ(counts[4], 0);
  EXPECT_EQ(counts[5], 0);
}

TEST(Sampling, DropoutStreamDoesNotPerturbDataStream) {
  StageConfig with_drop = default_stages()[2];  // p_drop 0.5
  StageConfig no_drop = with_drop;
  no_drop.p_drop = 0.0;
  DataSet data = synthesize_dataset(3, 3, 2, 1, data_opts());
  for (int i = 0; i < 200; ++i) {
    Rng d1 = stream_rng(7, "data", i), p1 = stream_rng(7, "dropout", i);
    Rng d2 = stream_rng(7, "data", i), p2 = stream_rng(7, "dropout", i);
    const TaskDraw a = sample_task(with_drop, data, d1, p1);
    const TaskDraw b = sample_task(no_drop, data, d2, p2);
    EXPECT_EQ(a.kind, b.kind);
    EXPECT_EQ(a.index, b.index);
    EXPECT_FALSE(b.drop_images);
  }
}

TEST(RunStage, ZeroStepsLeavesStateUntouched) {
  ModelConfig cfg = train_cfg();
  auto state = init_train_state<float>(cfg, 11);
  const auto reference = state.params;
  StageConfig s = tiny_stage(1, 0);
  DataSet data = synthesize_dataset(4, 2, 1, 1, data_opts());
  auto log = run_stage(state, s, data);
  EXPECT_TRUE(log.empty());
  EXPECT_EQ(state.global_step, 0);
  for (const auto& [name, t] : state.params.tensors)
    EXPECT_EQ(t.data, reference.at(name).data);
}

TEST(RunStage, FixedSeedGivesIdenticalLossLogs) {
  auto run = [] {
    ModelConfig cfg = train_cfg();
    auto state = init_train_state<float>(cfg, 21);
    StageConfig s = tiny_stage(2, 6);
    DataSet data = synthesize_dataset(5, 3, 2, 2, data_opts());
    std::ostringstream csv;
    run_stage(state, s, data, {.csv = &csv});
    return csv.str();
  };
  const std::string a = run();
  const std::string b = run();
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, b);
}

TEST(RunStage, StageOneKeepsEveryGenParameterBitwise) {
  ModelConfig cfg = train_cfg();
  auto state = init_train_state<float>(cfg, 31);
  const auto reference = state.params;
  StageConfig s1 = default_stages()[0];
  s1.steps = 8;
  DataSet data = synthesize_dataset(6, 3, 1, 1, data_opts());
  auto log = run_stage(state, s1, data);
  EXPECT_EQ(log.size(), 8u);
  int gen_count = 0;
  for (const auto& [name, t] : state.params.tensors) {
    if (expert_of_param(name) != kGen) continue;
    ++gen_count;
    const auto& ref = reference.at(name);
    ASSERT_EQ(0, std::memcmp(t.data.data(), ref.data.data(), t.data.size() * sizeof(float)))
        << name;
  }
  EXPECT_GT(gen_count, 10);
  // stage-1 rows carry CE only
  for (const auto& row : log) {
    EXPECT_TRUE(row.l_ce.has_value());
    EXPECT_FALSE(row.l_fm[0].has_value());
  }
}

TEST(RunStage, CsvRowShapeAndHeader) {
  EXPECT_STREQ(kLossCsvHeader,
               "step,stage,lr_gen,lr_und,l_ce,l_fm_structure,l_fm_shape,l_fm_material,total");
  LossRow row;
  row.step = 12;
  row.stage = 5;
  row.lr_gen = 5e-6;
  row.lr_und = 1e-6;
  row.l_fm = {2.5, std::nullopt, 1.25};
  row.total = 3.75;
  EXPECT_EQ(loss_row_csv(row), "12,5,5e-06,1e-06,,2.5,,1.25,3.75");
}

TEST(TrainState, CheckpointRoundTripByteIdentical) {
  ModelConfig cfg = train_cfg();
  auto state = init_train_state<float>(cfg, 41);
  StageConfig s = tiny_stage(2, 3);
  DataSet data = synthesize_dataset(7, 2, 1, 1, data_opts());
  run_stage(state, s, data);
  const std::string once = serialize_train_state(state);
  TrainState<float> loaded = parse_train_state(once, cfg);
  EXPECT_EQ(serialize_train_state(loaded), once);
  EXPECT_EQ(loaded.global_step, state.global_step);
  EXPECT_EQ(loaded.opt.step, state.opt.step);
  EXPECT_EQ(loaded.seed, state.seed);
}

TEST(TrainState, ResumeContinuesExactly) {
  ModelConfig cfg = train_cfg();
  DataSet data = synthesize_dataset(8, 2, 1, 1, data_opts());
  StageConfig s = tiny_stage(2, 6);

  auto full = init_train_state<float>(cfg, 51);
  std::ostringstream full_csv;
  run_stage(full, s, data, {.csv = &full_csv});

  auto part = init_train_state<float>(cfg, 51);
  std::ostringstream part_csv;
  run_stage(part, s, data, {.csv = &part_csv, .halt_after = 3});
  TrainState<float> resumed = parse_train_state(serialize_train_state(part), cfg);
  run_stage(resumed, s, data, {.csv = &part_csv});

  EXPECT_EQ(part_csv.str(), full_csv.str());
  EXPECT_EQ(serialize_train_state(resumed), serialize_train_state(full));
}

// memorization oracle: a tiny model overfit on labeled primitives
// reproduces every caption exactly via greedy decoding
TEST(Memorization, CaptionsOnEightPrimitives) {
  ModelConfig cfg = train_cfg();
  auto state = init_train_state<float>(cfg, 61);
  DataSet data = synthesize_dataset(9, 8, 0, 1, data_opts());
  ASSERT_EQ(data.statics.size(), 8u);

  StageConfig s;
  s.id = 1;
  s.lr_gen = 0.0;
  s.lr_und = 3e-3;
  s.steps = 6000;
  s.w_ce = 1.0;
  s.w_mse = 0.0;
  s.ratios = {0, 0, 0, 1.0, 0, 0};

  int exact = 0;
  for (int round = 0; round < 12 && exact < 8; ++round) {
    run_stage(state, s, data, {.halt_after = 500});
    exact = 0;
    for (const auto& item : data.statics)
      exact += (caption(cfg, state.params, item.asset, 64) == item.caption);
  }
  EXPECT_EQ(exact, 8) << "captions not memorized";
}

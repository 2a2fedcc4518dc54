#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "unsq/experiments.hpp"

#include "test_helpers.hpp"

using namespace unsq;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

SynthConfig micro_data(std::uint64_t seed, Eigen::Index n) {
  SynthConfig d;
  d.num_images = n;
  d.h = 32;
  d.w = 32;
  d.min_radius = 3.0;
  d.max_radius = 6.0;
  d.seed = seed;
  return d;
}

ExperimentSpec micro_spec(const fs::path& out, std::uint64_t seed) {
  ExperimentSpec spec;
  spec.kind = ExperimentKind::SingleRun;
  spec.modes = {DistillMode::HardOnly};
  spec.student_depth = 2;
  spec.data = micro_data(seed, 5);
  spec.out_dir = out.string();
  spec.seed = seed;
  spec.plan.max_iterations = 8;
  spec.plan.eval_every = 4;
  spec.plan.batch_size = 4;
  return spec;
}

fs::path save_teacher(const fs::path& dir, std::uint64_t seed) {
  UnetConfig cfg;
  cfg.start_channels = 2;
  auto teacher = UnetModel<double>::build(cfg, seed);
  const auto path = dir / "teacher.ckpt";
  save_checkpoint(teacher, path);
  return path;
}

}  // namespace

TEST_CASE("experiment kind names round trip") {
  for (auto k : {ExperimentKind::DepthSweep, ExperimentKind::TemperatureSweep,
                 ExperimentKind::FinalComparison, ExperimentKind::SingleRun}) {
    CHECK(experiment_kind_from_string(to_string(k)) == k);
  }
  CHECK(to_string(ExperimentKind::DepthSweep) == "depth-sweep");
  CHECK_THROWS_WITH_AS(experiment_kind_from_string("sweep"), doctest::Contains("unknown experiment kind"),
                       Error);
}

TEST_CASE("experiment spec json round trip") {
  const auto dir = testutil::scratch_dir("exp_spec");
  ExperimentSpec spec;
  spec.kind = ExperimentKind::TemperatureSweep;
  spec.depths = {4};
  spec.temperatures = {2.5, 10.0};
  spec.modes = {DistillMode::Mixed, DistillMode::VanillaSoft};
  spec.student_depth = 3;
  spec.teacher_depth = 5;
  spec.student_batch_norm = false;
  spec.auto_class_weights = false;
  spec.plan.mode = DistillMode::Mixed;
  spec.plan.t_transfer = 7.5;
  spec.plan.mix_alpha = 0.25;
  spec.plan.class_weights = ClassWeights{12.5, 0.5};
  spec.plan.optimizer.kind = OptimizerKind::SgdMomentum;
  spec.plan.optimizer.learning_rate = 0.02;
  spec.plan.optimizer.weight_decay = 1e-4;
  spec.plan.max_iterations = 123;
  spec.plan.eval_every = 7;
  spec.plan.switch_iteration = 50;
  spec.plan.batch_size = 3;
  spec.plan.data_seed = 99;
  spec.plan.expected_teacher_hash = 0xabc123ull;
  spec.data.num_images = 9;
  spec.data.foreground_fraction = 0.11;
  spec.data.seed = 5;
  spec.dataset_root = "/tmp/somewhere";
  spec.teacher_checkpoint = "/tmp/teacher.ckpt";
  spec.out_dir = "outdir";
  spec.seed = 77;

  save_experiment_spec(spec, dir / "spec.json");
  auto back = load_experiment_spec(dir / "spec.json");
  CHECK(back.kind == spec.kind);
  CHECK(back.depths == spec.depths);
  CHECK(back.temperatures == spec.temperatures);
  CHECK(back.modes == spec.modes);
  CHECK(back.student_depth == 3);
  CHECK(back.teacher_depth == 5);
  CHECK(back.student_batch_norm == false);
  CHECK(back.auto_class_weights == false);
  CHECK(back.plan.mode == DistillMode::Mixed);
  CHECK(back.plan.t_transfer == 7.5);
  CHECK(back.plan.mix_alpha == 0.25);
  CHECK(back.plan.class_weights.foreground == 12.5);
  CHECK(back.plan.class_weights.background == 0.5);
  CHECK(back.plan.optimizer.kind == OptimizerKind::SgdMomentum);
  CHECK(back.plan.optimizer.learning_rate == 0.02);
  CHECK(back.plan.optimizer.weight_decay == 1e-4);
  CHECK(back.plan.max_iterations == 123);
  CHECK(back.plan.eval_every == 7);
  CHECK(back.plan.switch_iteration == 50);
  CHECK(back.plan.batch_size == 3);
  CHECK(back.plan.data_seed == 99);
  CHECK(back.plan.expected_teacher_hash == 0xabc123ull);
  CHECK(back.data.num_images == 9);
  CHECK(back.data.foreground_fraction == 0.11);
  CHECK(back.data.seed == 5);
  CHECK(back.dataset_root == "/tmp/somewhere");
  CHECK(back.teacher_checkpoint == "/tmp/teacher.ckpt");
  CHECK(back.out_dir == "outdir");
  CHECK(back.seed == 77);

  CHECK_THROWS_AS(load_experiment_spec(dir / "absent.json"), MissingFileError);
}

TEST_CASE("experiment validation stops before any work") {
  const auto base = testutil::scratch_dir("exp_validate");
  SUBCASE("empty depth grid") {
    auto spec = micro_spec(base / "out_a", 1);
    spec.kind = ExperimentKind::DepthSweep;
    spec.depths.clear();
    CHECK_THROWS_WITH_AS(run_experiment(spec), doctest::Contains("depth grid"), Error);
    CHECK(!fs::exists(base / "out_a"));
  }
  SUBCASE("empty mode grid") {
    auto spec = micro_spec(base / "out_b", 1);
    spec.modes.clear();
    CHECK_THROWS_AS(run_experiment(spec), Error);
    CHECK(!fs::exists(base / "out_b"));
  }
  SUBCASE("temperature sweep requires the teacher up front") {
    auto spec = micro_spec(base / "out_c", 1);
    spec.kind = ExperimentKind::TemperatureSweep;
    spec.teacher_checkpoint = (base / "no_such.ckpt").string();
    CHECK_THROWS_WITH_AS(run_experiment(spec), doctest::Contains("teacher checkpoint"), Error);
    CHECK(!fs::exists(base / "out_c"));
  }
  SUBCASE("empty out dir") {
    auto spec = micro_spec(base / "out_d", 1);
    spec.out_dir.clear();
    CHECK_THROWS_AS(run_experiment(spec), Error);
  }
  SUBCASE("bad plan") {
    auto spec = micro_spec(base / "out_e", 1);
    spec.plan.optimizer.learning_rate = 0.0;
    CHECK_THROWS_AS(run_experiment(spec), Error);
    CHECK(!fs::exists(base / "out_e"));
  }
  SUBCASE("single-run distillation without a teacher") {
    // caught after data prep but before any model is built
    auto spec = micro_spec(base / "out_f", 1);
    spec.modes = {DistillMode::VanillaSoft};
    CHECK_THROWS_WITH_AS(run_experiment(spec), doctest::Contains("teacher checkpoint"), Error);
    CHECK(!fs::exists(base / "out_f" / "runs"));
  }
}

TEST_CASE("single-run experiment produces artifacts and replays bit-identically") {
  const auto base = testutil::scratch_dir("exp_replay");
  auto spec = micro_spec(base / "out1", 7);
  auto rows = run_experiment(spec);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].label == "hard-only");
  UnetConfig expect_cfg;
  expect_cfg.start_channels = 2;
  expect_cfg.batch_norm_contracting = true;
  CHECK(rows[0].params == count_params(expect_cfg));

  const auto out1 = base / "out1";
  CHECK(fs::exists(out1 / "experiment_spec.json"));
  CHECK(fs::exists(out1 / "data" / "train" / "manifest.json"));
  CHECK(fs::exists(out1 / "data" / "test" / "manifest.json"));
  CHECK(fs::exists(out1 / "runs" / "hard-only" / "best.ckpt"));
  CHECK(fs::exists(out1 / "runs" / "hard-only" / "report.csv"));
  CHECK(fs::exists(out1 / "runs" / "hard-only" / "run_manifest.json"));
  CHECK(fs::exists(out1 / "metrics.csv"));

  auto replay = load_experiment_spec(out1 / "experiment_spec.json");
  CHECK(replay.seed == spec.seed);
  CHECK(replay.data.seed == spec.data.seed);
  replay.out_dir = (base / "out2").string();
  auto rows2 = run_experiment(replay);
  REQUIRE(rows2.size() == 1);
  CHECK(rows2[0].test_loss == rows[0].test_loss);
  CHECK(rows2[0].iou_score == rows[0].iou_score);
  CHECK(slurp(base / "out2" / "metrics.csv") == slurp(out1 / "metrics.csv"));
  CHECK(slurp(base / "out2" / "runs" / "hard-only" / "report.csv") ==
        slurp(out1 / "runs" / "hard-only" / "report.csv"));
}

TEST_CASE("depth sweep writes its table") {
  const auto base = testutil::scratch_dir("exp_depth");
  auto spec = micro_spec(base / "out", 3);
  spec.kind = ExperimentKind::DepthSweep;
  spec.depths = {1, 2};
  spec.plan.max_iterations = 2;
  spec.plan.eval_every = 1;
  auto rows = run_experiment(spec);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].label == "original-1-unet");
  CHECK(rows[1].label == "original-2-unet");
  CHECK(rows[0].params < rows[1].params);
  const std::string table = slurp(base / "out" / "depth_sweep.csv");
  CHECK(table.rfind("model,batch_norm,weighted_loss,train_loss,test_loss,iterations\n", 0) == 0);
  CHECK(table.find("original-1-unet,no,no,") != std::string::npos);
}

TEST_CASE("temperature sweep trains one student per T") {
  const auto base = testutil::scratch_dir("exp_temp");
  auto spec = micro_spec(base / "out", 5);
  spec.kind = ExperimentKind::TemperatureSweep;
  spec.temperatures = {2.0, 5.0};
  spec.teacher_checkpoint = save_teacher(base, 123).string();
  spec.plan.max_iterations = 2;
  spec.plan.eval_every = 1;
  auto rows = run_experiment(spec);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].label == "mixed-T2");
  CHECK(rows[1].label == "mixed-T5");
  const std::string table = slurp(base / "out" / "temperature_sweep.csv");
  CHECK(table.rfind("t_transfer,test_loss,train_hard,train_soft_t2\n", 0) == 0);
  CHECK(fs::exists(base / "out" / "runs" / "mixed-T2" / "report.csv"));
}

TEST_CASE("final comparison covers all four rows") {
  const auto base = testutil::scratch_dir("exp_final");
  auto spec = micro_spec(base / "out", 9);
  spec.kind = ExperimentKind::FinalComparison;
  spec.teacher_depth = 2;
  spec.teacher_checkpoint = save_teacher(base, 321).string();
  spec.plan.max_iterations = 2;
  spec.plan.eval_every = 1;
  spec.plan.t_transfer = 3.0;
  auto rows = run_experiment(spec);
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].label == "teacher-2-unet");
  CHECK(rows[1].label == "student-soft-only");
  CHECK(rows[2].label == "student-mixed");
  CHECK(rows[3].label == "no-distill-baseline");
  const std::string table = slurp(base / "out" / "final_comparison.csv");
  CHECK(table.rfind("model,params_paper_compat,iou,test_loss\n", 0) == 0);
  // the student rows report the paper-compatible count for C=2
  CHECK(table.find("student-mixed,30902,") != std::string::npos);
}

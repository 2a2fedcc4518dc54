// unsq: train, distill, and evaluate small U-nets on synthetic segmentation
// data. Every subcommand is a thin wrapper over the library; all heavy state
// lives in files (datasets, checkpoints, soft-target sets, CSV reports).
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "unsq/data.hpp"
#include "unsq/distill.hpp"
#include "unsq/experiments.hpp"
#include "unsq/gradcheck_battery.hpp"
#include "unsq/metrics.hpp"
#include "unsq/unet.hpp"

namespace {

using namespace unsq;

std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

// "auto" resolves against the train split; otherwise "WF:WB".
ClassWeights resolve_class_weights(const std::string& s, const Dataset& train_split) {
  if (s == "auto") return compute_class_weight(train_split);
  const auto pos = s.find(':');
  ClassWeights w;
  w.foreground = std::stod(s.substr(0, pos));
  w.background = std::stod(s.substr(pos + 1));
  w.validate();
  return w;
}

std::string check_class_weights(const std::string& s) {
  if (s == "auto") return "";
  const auto pos = s.find(':');
  if (pos == std::string::npos) return "expected 'auto' or 'WF:WB', got '" + s + "'";
  try {
    ClassWeights w;
    w.foreground = std::stod(s.substr(0, pos));
    w.background = std::stod(s.substr(pos + 1));
    w.validate();
  } catch (const std::exception& e) {
    return std::string("bad class weights '") + s + "': " + e.what();
  }
  return "";
}

const EvalRow& best_row(const TrainReport& report) {
  for (const auto& r : report.rows) {
    if (r.iteration == report.best_iteration) return r;
  }
  throw Error("report has no row for its best iteration");
}

void print_train_summary(const TrainResult& res, const std::string& out_dir) {
  const EvalRow& r = best_row(res.report);
  std::cout << "iterations: " << res.report.rows.back().iteration << "\n"
            << "best iteration: " << res.report.best_iteration << "\n"
            << "best test loss: " << fmt(r.test_loss) << "\n"
            << "test iou at best: " << fmt(r.test_iou) << "\n";
  if (!out_dir.empty()) std::cout << "artifacts: " << out_dir << "\n";
}

struct TrainFlags {
  std::string data_dir;
  std::string out_dir;
  Eigen::Index depth = 2;
  bool batch_norm = false;
  std::int64_t iterations = 1000;
  std::int64_t eval_every = 100;
  Eigen::Index batch_size = 4;
  std::string optimizer = "adam";
  double lr = 1e-3;
  double momentum = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.0;
  std::string class_weights = "1:1";
  std::uint64_t seed = 1;
  std::uint64_t data_seed = 1;

  void add_to(CLI::App* cmd, bool with_model_flags = true) {
    cmd->add_option("--data", data_dir, "dataset root containing train/ and test/")->required();
    cmd->add_option("--out", out_dir, "output directory for best.ckpt, report.csv, run_manifest.json");
    if (with_model_flags) {
      cmd->add_option("--depth", depth, "starting channel depth C")->capture_default_str();
      cmd->add_flag("--batch-norm,!--no-batch-norm", batch_norm, "batch norm on the contracting path");
    }
    cmd->add_option("--iterations", iterations, "training iterations")->capture_default_str();
    cmd->add_option("--eval-every", eval_every, "evaluation interval")->capture_default_str();
    cmd->add_option("--batch-size", batch_size, "minibatch size")->capture_default_str();
    cmd->add_option("--optimizer", optimizer)
        ->check(CLI::IsMember({"adam", "sgd-momentum"}))
        ->capture_default_str();
    cmd->add_option("--lr", lr, "learning rate")->capture_default_str();
    cmd->add_option("--momentum", momentum, "momentum (sgd) / beta1 (adam)")->capture_default_str();
    cmd->add_option("--beta2", beta2, "adam second-moment decay")->capture_default_str();
    cmd->add_option("--weight-decay", weight_decay)->capture_default_str();
    cmd->add_option("--class-weights", class_weights, "'auto' or 'WF:WB'")
        ->check(check_class_weights)
        ->capture_default_str();
    cmd->add_option("--seed", seed, "model init seed")->capture_default_str();
    cmd->add_option("--data-seed", data_seed, "shuffle seed")->capture_default_str();
  }

  DistillPlan plan(const Dataset& train_split) const {
    DistillPlan p;
    p.optimizer.kind = optimizer == "adam" ? OptimizerKind::Adam : OptimizerKind::SgdMomentum;
    p.optimizer.learning_rate = lr;
    p.optimizer.momentum = momentum;
    p.optimizer.beta2 = beta2;
    p.optimizer.weight_decay = weight_decay;
    p.max_iterations = iterations;
    p.eval_every = eval_every;
    p.batch_size = batch_size;
    p.data_seed = data_seed;
    p.class_weights = resolve_class_weights(class_weights, train_split);
    return p;
  }

  UnetModel<double> build_model() const {
    UnetConfig cfg;
    cfg.start_channels = depth;
    cfg.batch_norm_contracting = batch_norm;
    return UnetModel<double>::build(cfg, seed);
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"unsq: small U-net training, distillation, and evaluation"};
  app.require_subcommand(1);
  app.footer(
      "environment:\n"
      "  UNSQ_DETERMINISTIC=1   single-threaded deterministic math\n"
      "  UNSQ_CHECK_FINITE=1    abort on the first non-finite value");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic blob-segmentation dataset");
  std::string gen_out;
  std::vector<std::string> gen_splits = {"train", "test"};
  SynthConfig synth;
  gen->add_option("--out", gen_out, "dataset root; each split becomes a subdirectory")->required();
  gen->add_option("--splits", gen_splits, "split names")->delimiter(',')->capture_default_str();
  gen->add_option("--num-images", synth.num_images)->capture_default_str();
  gen->add_option("--height", synth.h)->capture_default_str();
  gen->add_option("--width", synth.w)->capture_default_str();
  gen->add_option("--foreground-fraction", synth.foreground_fraction)->capture_default_str();
  gen->add_option("--min-blobs", synth.min_blobs)->capture_default_str();
  gen->add_option("--max-blobs", synth.max_blobs)->capture_default_str();
  gen->add_option("--min-radius", synth.min_radius)->capture_default_str();
  gen->add_option("--max-radius", synth.max_radius)->capture_default_str();
  gen->add_option("--noise-std", synth.noise_std)->capture_default_str();
  gen->add_option("--seed", synth.seed)->capture_default_str();
  gen->callback([&] {
    for (const auto& split : gen_splits) {
      const auto dir = std::filesystem::path(gen_out) / split;
      const DatasetManifest m = generate_synthetic(synth, dir, split);
      const double total = static_cast<double>(m.foreground_pixels + m.background_pixels);
      std::cout << split << ": " << m.entries.size() << " images, foreground fraction "
                << fmt(static_cast<double>(m.foreground_pixels) / total) << " -> " << dir.string()
                << "\n";
    }
  });

  // count-params
  auto* cp = app.add_subcommand("count-params", "print the trainable parameter count of a U-net");
  Eigen::Index cp_depth = 64;
  std::string cp_mode = "plain";
  bool cp_bn = false;
  cp->add_option("--depth", cp_depth, "starting channel depth C")->required();
  cp->add_option("--mode", cp_mode)->check(CLI::IsMember({"plain", "paper-compat"}))->capture_default_str();
  cp->add_flag("--batch-norm", cp_bn, "count contracting-path batch-norm parameters");
  cp->callback([&] {
    UnetConfig cfg;
    cfg.start_channels = cp_depth;
    cfg.batch_norm_contracting = cp_bn;
    cfg.param_count_mode = cp_mode == "plain" ? ParamCountMode::Plain : ParamCountMode::PaperCompat;
    std::cout << count_params(cfg) << "\n";
  });

  // grad-check
  auto* gc = app.add_subcommand("grad-check", "finite-difference check of every layer's gradients");
  BatteryOptions gc_opt;
  bool gc_skip_unet = false;
  gc->add_option("--seeds", gc_opt.seeds)->capture_default_str();
  gc->add_option("--base-seed", gc_opt.base_seed)->capture_default_str();
  gc->add_option("--epsilon", gc_opt.epsilon)->capture_default_str();
  gc->add_option("--tolerance", gc_opt.tolerance)->capture_default_str();
  gc->add_flag("--skip-unet", gc_skip_unet, "skip the end-to-end U-net checks");
  gc->callback([&] {
    gc_opt.include_unet = !gc_skip_unet;
    const BatteryResult result = run_gradcheck_battery(gc_opt);
    for (const auto& c : result.cases) {
      std::printf("%-28s max-rel %9.3e  checked %5lld  skipped %3lld  [%s]\n", c.name.c_str(),
                  c.report.max_rel_error, static_cast<long long>(c.report.checked),
                  static_cast<long long>(c.report.skipped), c.report.pass ? "ok" : "FAIL");
    }
    std::printf("max relative error: %.3e\n", result.max_rel_error);
    if (!result.pass) throw Error("gradient check battery failed");
    std::cout << "all gradient checks passed\n";
  });

  // train
  auto* tr = app.add_subcommand("train", "train a U-net on the hard labels");
  TrainFlags tr_flags;
  tr_flags.add_to(tr);
  tr->callback([&] {
    const Dataset train_split = load_dataset(std::filesystem::path(tr_flags.data_dir) / "train" / "manifest.json");
    const Dataset test_split = load_dataset(std::filesystem::path(tr_flags.data_dir) / "test" / "manifest.json");
    DistillPlan plan = tr_flags.plan(train_split);
    plan.mode = DistillMode::HardOnly;
    auto model = tr_flags.build_model();
    const TrainResult res = train(model, plan, train_split, test_split, nullptr, tr_flags.out_dir);
    print_train_summary(res, tr_flags.out_dir);
  });

  // make-soft-targets
  auto* mk = app.add_subcommand("make-soft-targets", "precompute teacher probability maps");
  std::string mk_teacher, mk_data, mk_out, mk_split = "train";
  double mk_temperature = 5.0;
  Eigen::Index mk_batch = 8;
  mk->add_option("--teacher", mk_teacher, "teacher checkpoint")->required();
  mk->add_option("--data", mk_data, "dataset root")->required();
  mk->add_option("--split", mk_split)->capture_default_str();
  mk->add_option("--out", mk_out, "output directory for the soft-target set")->required();
  mk->add_option("--temperature", mk_temperature, "transfer temperature")->capture_default_str();
  mk->add_option("--batch-size", mk_batch)->capture_default_str();
  mk->callback([&] {
    auto teacher = load_checkpoint(mk_teacher);
    const Dataset split = load_dataset(std::filesystem::path(mk_data) / mk_split / "manifest.json");
    const SoftTargetSet set = generate_soft_targets(teacher, split, mk_temperature, mk_batch);
    save_soft_targets(set, mk_out);
    std::cout << "soft targets: " << set.size() << " samples at T=" << fmt(set.temperature) << " -> "
              << mk_out << "\n"
              << "teacher hash: " << to_hex(set.teacher_hash) << "\n"
              << "set hash: " << to_hex(set.set_hash) << "\n";
  });

  // distill
  auto* di = app.add_subcommand("distill", "train a student against a teacher's soft targets");
  TrainFlags di_flags;
  di_flags.class_weights = "auto";
  di_flags.batch_norm = true;
  std::string di_teacher, di_soft, di_mode = "mixed";
  double di_temperature = 5.0, di_alpha = 0.5;
  std::int64_t di_switch = 0;
  di_flags.add_to(di);
  di->add_option("--teacher", di_teacher, "teacher checkpoint")->required();
  di->add_option("--soft", di_soft, "precomputed soft-target directory (default: generate in memory)");
  di->add_option("--mode", di_mode)
      ->check(CLI::IsMember({"vanilla-soft", "mixed", "sequential-soft-then-hard",
                             "sequential-hard-then-soft"}))
      ->capture_default_str();
  di->add_option("--temperature", di_temperature, "transfer temperature")->capture_default_str();
  di->add_option("--alpha", di_alpha, "hard-loss weight for mixed mode")->capture_default_str();
  di->add_option("--switch-iteration", di_switch, "phase switch for sequential modes")
      ->capture_default_str();
  di->callback([&] {
    const Dataset train_split = load_dataset(std::filesystem::path(di_flags.data_dir) / "train" / "manifest.json");
    const Dataset test_split = load_dataset(std::filesystem::path(di_flags.data_dir) / "test" / "manifest.json");
    auto teacher = load_checkpoint(di_teacher);
    DistillPlan plan = di_flags.plan(train_split);
    plan.mode = distill_mode_from_string(di_mode);
    plan.t_transfer = di_temperature;
    plan.mix_alpha = di_alpha;
    plan.switch_iteration = di_switch;
    plan.expected_teacher_hash = state_hash(teacher);
    const SoftTargetSet soft = di_soft.empty() ? generate_soft_targets(teacher, train_split, di_temperature)
                                               : load_soft_targets(di_soft);
    auto student = di_flags.build_model();
    const TrainResult res = train(student, plan, train_split, test_split, &soft, di_flags.out_dir);
    print_train_summary(res, di_flags.out_dir);
  });

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on one split");
  std::string ev_ckpt, ev_data, ev_split = "test", ev_weights = "1:1";
  bool ev_class_avg = false;
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--data", ev_data, "dataset root")->required();
  ev->add_option("--split", ev_split)->capture_default_str();
  ev->add_option("--class-weights", ev_weights, "'auto' or 'WF:WB'")
      ->check(check_class_weights)
      ->capture_default_str();
  ev->add_flag("--class-averaged", ev_class_avg, "also print class-averaged IoU");
  ev->callback([&] {
    auto model = load_checkpoint(ev_ckpt);
    const Dataset split = load_dataset(std::filesystem::path(ev_data) / ev_split / "manifest.json");
    const SplitMetrics m = evaluate(model, split, resolve_class_weights(ev_weights, split));
    std::cout << "loss: " << fmt(m.loss) << "\n"
              << "loss-unweighted: " << fmt(m.loss_unweighted) << "\n"
              << "iou: " << fmt(m.iou_score) << "\n";
    if (ev_class_avg) std::cout << "iou-class-averaged: " << fmt(m.iou_class_averaged) << "\n";
  });

  // experiment
  auto* ex = app.add_subcommand("experiment", "run a replayable experiment grid");
  std::string ex_spec, ex_kind, ex_out, ex_data, ex_teacher;
  std::vector<Eigen::Index> ex_depths;
  std::vector<double> ex_temperatures;
  std::vector<std::string> ex_modes;
  std::int64_t ex_iterations = 0, ex_eval_every = 0;
  std::uint64_t ex_seed = 0;
  double ex_temperature = 0, ex_alpha = 0, ex_lr = 0;
  Eigen::Index ex_num_images = 0, ex_student_depth = 0, ex_teacher_depth = 0;
  ex->add_option("--spec", ex_spec, "experiment spec JSON (replay)");
  ex->add_option("--kind", ex_kind)
      ->check(CLI::IsMember({"depth-sweep", "temperature-sweep", "final-comparison", "single-run"}));
  ex->add_option("--out", ex_out, "output directory");
  ex->add_option("--data", ex_data, "existing dataset root (default: generate one)");
  ex->add_option("--teacher", ex_teacher, "teacher checkpoint");
  ex->add_option("--depths", ex_depths, "depth-sweep grid")->delimiter(',');
  ex->add_option("--temperatures", ex_temperatures, "temperature-sweep grid")->delimiter(',');
  ex->add_option("--modes", ex_modes, "single-run mode grid")->delimiter(',');
  ex->add_option("--student-depth", ex_student_depth);
  ex->add_option("--teacher-depth", ex_teacher_depth);
  ex->add_option("--iterations", ex_iterations);
  ex->add_option("--eval-every", ex_eval_every);
  ex->add_option("--temperature", ex_temperature, "transfer temperature");
  ex->add_option("--alpha", ex_alpha, "hard-loss weight for mixed mode");
  ex->add_option("--lr", ex_lr);
  ex->add_option("--num-images", ex_num_images, "per split, when generating data");
  ex->add_option("--seed", ex_seed);
  ex->callback([&] {
    if (ex_spec.empty() && ex_kind.empty()) {
      throw CLI::ValidationError("experiment", "pass --spec or --kind");
    }
    ExperimentSpec spec;
    if (!ex_spec.empty()) spec = load_experiment_spec(ex_spec);
    if (!ex_kind.empty()) spec.kind = experiment_kind_from_string(ex_kind);
    if (!ex_out.empty()) spec.out_dir = ex_out;
    if (!ex_data.empty()) spec.dataset_root = ex_data;
    if (!ex_teacher.empty()) spec.teacher_checkpoint = ex_teacher;
    if (!ex_depths.empty()) spec.depths = ex_depths;
    if (!ex_temperatures.empty()) spec.temperatures = ex_temperatures;
    if (!ex_modes.empty()) {
      spec.modes.clear();
      for (const auto& m : ex_modes) spec.modes.push_back(distill_mode_from_string(m));
    }
    if (ex_student_depth > 0) spec.student_depth = ex_student_depth;
    if (ex_teacher_depth > 0) spec.teacher_depth = ex_teacher_depth;
    if (ex_iterations > 0) spec.plan.max_iterations = ex_iterations;
    if (ex_eval_every > 0) spec.plan.eval_every = ex_eval_every;
    if (ex_temperature > 0) spec.plan.t_transfer = ex_temperature;
    if (ex->count("--alpha") > 0) spec.plan.mix_alpha = ex_alpha;
    if (ex_lr > 0) spec.plan.optimizer.learning_rate = ex_lr;
    if (ex_num_images > 0) spec.data.num_images = ex_num_images;
    if (ex->count("--seed") > 0) spec.seed = ex_seed;
    const std::vector<MetricsRow> rows = run_experiment(spec);
    std::printf("%-26s %12s %10s %12s %10s\n", "model", "params", "iou", "test_loss", "best_iter");
    for (const auto& r : rows) {
      std::printf("%-26s %12lld %10.4f %12.5f %10lld\n", r.label.c_str(),
                  static_cast<long long>(r.params), r.iou_score, r.test_loss,
                  static_cast<long long>(r.best_iteration));
    }
    std::cout << "artifacts: " << spec.out_dir << "\n";
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const unsq::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

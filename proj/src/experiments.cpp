#include "unsq/experiments.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "unsq/metrics.hpp"

namespace unsq {

using nlohmann::json;

std::string to_string(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::DepthSweep: return "depth-sweep";
    case ExperimentKind::TemperatureSweep: return "temperature-sweep";
    case ExperimentKind::FinalComparison: return "final-comparison";
    case ExperimentKind::SingleRun: return "single-run";
  }
  throw Error("to_string: unknown experiment kind");
}

ExperimentKind experiment_kind_from_string(const std::string& name) {
  for (auto k : {ExperimentKind::DepthSweep, ExperimentKind::TemperatureSweep,
                 ExperimentKind::FinalComparison, ExperimentKind::SingleRun}) {
    if (to_string(k) == name) return k;
  }
  throw Error("unknown experiment kind '" + name + "'");
}

void ExperimentSpec::validate() const {
  if (out_dir.empty()) throw Error("experiment: out_dir must be set");
  if (kind == ExperimentKind::DepthSweep && depths.empty()) {
    throw Error("experiment: depth-sweep needs a non-empty depth grid");
  }
  if (kind == ExperimentKind::TemperatureSweep) {
    if (temperatures.empty()) throw Error("experiment: temperature-sweep needs a non-empty T grid");
    if (teacher_checkpoint.empty() || !std::filesystem::exists(teacher_checkpoint)) {
      throw Error("experiment: temperature-sweep needs an existing teacher checkpoint, got '" +
                  teacher_checkpoint + "'");
    }
  }
  if (kind == ExperimentKind::SingleRun && modes.empty()) {
    throw Error("experiment: single-run needs a non-empty mode grid");
  }
  if (student_depth < 1 || teacher_depth < 1) throw Error("experiment: depths must be >= 1");
  plan.validate();
}

namespace {

json plan_to_json(const DistillPlan& p) {
  return json{{"mode", to_string(p.mode)},
              {"t_transfer", p.t_transfer},
              {"mix_alpha", p.mix_alpha},
              {"class_weight_foreground", p.class_weights.foreground},
              {"class_weight_background", p.class_weights.background},
              {"optimizer_kind", p.optimizer.kind == OptimizerKind::Adam ? "adam" : "sgd-momentum"},
              {"learning_rate", p.optimizer.learning_rate},
              {"momentum", p.optimizer.momentum},
              {"beta2", p.optimizer.beta2},
              {"weight_decay", p.optimizer.weight_decay},
              {"max_iterations", p.max_iterations},
              {"eval_every", p.eval_every},
              {"switch_iteration", p.switch_iteration},
              {"batch_size", p.batch_size},
              {"data_seed", p.data_seed},
              {"expected_teacher_hash", to_hex(p.expected_teacher_hash)}};
}

DistillPlan plan_from_json(const json& j) {
  DistillPlan p;
  p.mode = distill_mode_from_string(j.at("mode").get<std::string>());
  p.t_transfer = j.at("t_transfer").get<double>();
  p.mix_alpha = j.at("mix_alpha").get<double>();
  p.class_weights.foreground = j.at("class_weight_foreground").get<double>();
  p.class_weights.background = j.at("class_weight_background").get<double>();
  p.optimizer.kind =
      j.at("optimizer_kind").get<std::string>() == "adam" ? OptimizerKind::Adam : OptimizerKind::SgdMomentum;
  p.optimizer.learning_rate = j.at("learning_rate").get<double>();
  p.optimizer.momentum = j.at("momentum").get<double>();
  p.optimizer.beta2 = j.at("beta2").get<double>();
  p.optimizer.weight_decay = j.at("weight_decay").get<double>();
  p.max_iterations = j.at("max_iterations").get<std::int64_t>();
  p.eval_every = j.at("eval_every").get<std::int64_t>();
  p.switch_iteration = j.at("switch_iteration").get<std::int64_t>();
  p.batch_size = j.at("batch_size").get<Eigen::Index>();
  p.data_seed = j.at("data_seed").get<std::uint64_t>();
  p.expected_teacher_hash = std::stoull(j.at("expected_teacher_hash").get<std::string>(), nullptr, 16);
  return p;
}

json synth_to_json(const SynthConfig& c) {
  return json{{"num_images", c.num_images},
              {"h", c.h},
              {"w", c.w},
              {"foreground_fraction", c.foreground_fraction},
              {"min_blobs", c.min_blobs},
              {"max_blobs", c.max_blobs},
              {"min_radius", c.min_radius},
              {"max_radius", c.max_radius},
              {"noise_std", c.noise_std},
              {"background_level", c.background_level},
              {"foreground_level", c.foreground_level},
              {"texture_amplitude", c.texture_amplitude},
              {"seed", c.seed}};
}

SynthConfig synth_from_json(const json& j) {
  SynthConfig c;
  c.num_images = j.at("num_images").get<Eigen::Index>();
  c.h = j.at("h").get<Eigen::Index>();
  c.w = j.at("w").get<Eigen::Index>();
  c.foreground_fraction = j.at("foreground_fraction").get<double>();
  c.min_blobs = j.at("min_blobs").get<int>();
  c.max_blobs = j.at("max_blobs").get<int>();
  c.min_radius = j.at("min_radius").get<double>();
  c.max_radius = j.at("max_radius").get<double>();
  c.noise_std = j.at("noise_std").get<double>();
  c.background_level = j.at("background_level").get<double>();
  c.foreground_level = j.at("foreground_level").get<double>();
  c.texture_amplitude = j.at("texture_amplitude").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

}  // namespace

void save_experiment_spec(const ExperimentSpec& spec, const std::filesystem::path& path) {
  json j;
  j["format"] = "unsqueeze-experiment/1";
  j["kind"] = to_string(spec.kind);
  j["depths"] = spec.depths;
  j["temperatures"] = spec.temperatures;
  j["modes"] = json::array();
  for (auto m : spec.modes) j["modes"].push_back(to_string(m));
  j["student_depth"] = spec.student_depth;
  j["teacher_depth"] = spec.teacher_depth;
  j["student_batch_norm"] = spec.student_batch_norm;
  j["auto_class_weights"] = spec.auto_class_weights;
  j["plan"] = plan_to_json(spec.plan);
  j["data"] = synth_to_json(spec.data);
  j["dataset_root"] = spec.dataset_root;
  j["teacher_checkpoint"] = spec.teacher_checkpoint;
  j["out_dir"] = spec.out_dir;
  j["seed"] = spec.seed;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("save_experiment_spec: cannot write " + path.string());
  out << j.dump(2) << "\n";
}

ExperimentSpec load_experiment_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingFileError("load_experiment_spec: cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error("load_experiment_spec: " + path.string() + ": " + e.what());
  }
  ExperimentSpec s;
  try {
    if (j.at("format").get<std::string>() != "unsqueeze-experiment/1") {
      throw Error("load_experiment_spec: unknown format in " + path.string());
    }
    s.kind = experiment_kind_from_string(j.at("kind").get<std::string>());
    s.depths = j.at("depths").get<std::vector<Eigen::Index>>();
    s.temperatures = j.at("temperatures").get<std::vector<double>>();
    s.modes.clear();
    for (const auto& m : j.at("modes")) s.modes.push_back(distill_mode_from_string(m.get<std::string>()));
    s.student_depth = j.at("student_depth").get<Eigen::Index>();
    s.teacher_depth = j.at("teacher_depth").get<Eigen::Index>();
    s.student_batch_norm = j.at("student_batch_norm").get<bool>();
    s.auto_class_weights = j.at("auto_class_weights").get<bool>();
    s.plan = plan_from_json(j.at("plan"));
    s.data = synth_from_json(j.at("data"));
    s.dataset_root = j.at("dataset_root").get<std::string>();
    s.teacher_checkpoint = j.at("teacher_checkpoint").get<std::string>();
    s.out_dir = j.at("out_dir").get<std::string>();
    s.seed = j.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw Error("load_experiment_spec: bad schema in " + path.string() + ": " + e.what());
  }
  return s;
}

namespace {

struct SplitPair {
  Dataset train;
  Dataset test;
};

SplitPair prepare_data(const ExperimentSpec& spec) {
  std::filesystem::path root;
  if (!spec.dataset_root.empty()) {
    root = spec.dataset_root;
  } else {
    root = std::filesystem::path(spec.out_dir) / "data";
    if (!std::filesystem::exists(root / "train" / "manifest.json")) {
      generate_synthetic(spec.data, root / "train", "train");
      generate_synthetic(spec.data, root / "test", "test");
    }
  }
  SplitPair p;
  p.train = load_dataset(root / "train" / "manifest.json");
  p.test = load_dataset(root / "test" / "manifest.json");
  return p;
}

UnetConfig original_config(Eigen::Index depth) {
  UnetConfig cfg;
  cfg.start_channels = depth;
  cfg.batch_norm_contracting = false;
  return cfg;
}

std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

const EvalRow& best_row(const TrainReport& report) {
  for (const auto& r : report.rows) {
    if (r.iteration == report.best_iteration) return r;
  }
  throw Error("experiment: report has no row for its best iteration");
}

MetricsRow to_metrics_row(const std::string& label, UnetModel<double>& model, const TrainReport& report) {
  const EvalRow& r = best_row(report);
  MetricsRow row;
  row.label = label;
  row.params = model.enumerated_param_count(ParamCountMode::Plain);
  row.iou_score = r.test_iou;
  row.test_loss = r.test_loss;
  row.best_iteration = report.best_iteration;
  return row;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("experiment: cannot write " + path.string());
  out << text;
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows) {
  std::string csv = "model,params,iou,test_loss,best_iteration\n";
  for (const auto& r : rows) {
    csv += r.label + "," + std::to_string(r.params) + "," + fmt(r.iou_score) + "," + fmt(r.test_loss) +
           "," + std::to_string(r.best_iteration) + "\n";
  }
  write_text(path, csv);
}

}  // namespace

std::vector<MetricsRow> run_experiment(const ExperimentSpec& spec) {
  spec.validate();
  const std::filesystem::path out(spec.out_dir);
  std::filesystem::create_directories(out);
  save_experiment_spec(spec, out / "experiment_spec.json");
  SplitPair data = prepare_data(spec);

  std::vector<MetricsRow> rows;

  if (spec.kind == ExperimentKind::DepthSweep) {
    // From-scratch runs of the original (no batch norm, unit weights) nets.
    std::string table = "model,batch_norm,weighted_loss,train_loss,test_loss,iterations\n";
    for (const Eigen::Index depth : spec.depths) {
      DistillPlan plan = spec.plan;
      plan.mode = DistillMode::HardOnly;
      plan.class_weights = ClassWeights{1.0, 1.0};
      auto model = UnetModel<double>::build(original_config(depth), spec.seed + static_cast<std::uint64_t>(depth));
      const std::string label = "original-" + std::to_string(depth) + "-unet";
      TrainResult res = train(model, plan, data.train, data.test, nullptr, out / "runs" / label);
      const EvalRow& br = best_row(res.report);
      table += label + ",no,no," + fmt(br.train_hard_weighted) + "," + fmt(br.test_loss) + "," +
               std::to_string(res.report.best_iteration) + "\n";
      rows.push_back(to_metrics_row(label, res.best_model, res.report));
    }
    write_text(out / "depth_sweep.csv", table);
  } else if (spec.kind == ExperimentKind::TemperatureSweep) {
    // Mixed distillation of the modified student across transfer temperatures.
    auto teacher = load_checkpoint(spec.teacher_checkpoint);
    const std::uint64_t teacher_hash = state_hash(teacher);
    const ClassWeights weights =
        spec.auto_class_weights ? compute_class_weight(data.train) : spec.plan.class_weights;
    std::string table = "t_transfer,test_loss,train_hard,train_soft_t2\n";
    for (const double T : spec.temperatures) {
      const SoftTargetSet soft = generate_soft_targets(teacher, data.train, T);
      DistillPlan plan = spec.plan;
      plan.mode = DistillMode::Mixed;
      plan.t_transfer = T;
      plan.class_weights = weights;
      plan.expected_teacher_hash = teacher_hash;
      UnetConfig cfg = original_config(spec.student_depth);
      cfg.batch_norm_contracting = spec.student_batch_norm;
      auto student = UnetModel<double>::build(cfg, spec.seed);
      const std::string label = "mixed-T" + std::to_string(static_cast<long long>(T));
      TrainResult res = train(student, plan, data.train, data.test, &soft, out / "runs" / label);
      const EvalRow& br = best_row(res.report);
      table += fmt(T) + "," + fmt(br.test_loss) + "," + fmt(br.train_hard_weighted) + "," +
               fmt(br.train_soft_t2) + "\n";
      rows.push_back(to_metrics_row(label, res.best_model, res.report));
    }
    write_text(out / "temperature_sweep.csv", table);
  } else if (spec.kind == ExperimentKind::FinalComparison) {
    // Teacher from scratch, two distilled students, and the no-distillation
    // modified baseline under the same budget.
    DistillPlan teacher_plan = spec.plan;
    teacher_plan.mode = DistillMode::HardOnly;
    teacher_plan.class_weights = ClassWeights{1.0, 1.0};
    UnetModel<double> teacher = spec.teacher_checkpoint.empty()
                                    ? UnetModel<double>::build(original_config(spec.teacher_depth),
                                                               spec.seed + 17)
                                    : load_checkpoint(spec.teacher_checkpoint);
    std::int64_t teacher_best = 0;
    if (spec.teacher_checkpoint.empty()) {
      TrainResult res = train(teacher, teacher_plan, data.train, data.test, nullptr,
                              out / "runs" / "teacher");
      teacher = res.best_model.clone();
      teacher_best = res.report.best_iteration;
    }
    const std::uint64_t teacher_hash = state_hash(teacher);
    const SoftTargetSet soft = generate_soft_targets(teacher, data.train, spec.plan.t_transfer);
    const ClassWeights weights =
        spec.auto_class_weights ? compute_class_weight(data.train) : spec.plan.class_weights;

    // teacher row, evaluated directly
    {
      DistillPlan eval_plan = teacher_plan;
      eval_plan.max_iterations = 0;
      auto teacher_eval = teacher.clone();
      TrainResult res = train(teacher_eval, eval_plan, data.train, data.test, nullptr, {});
      MetricsRow row = to_metrics_row("teacher-" + std::to_string(spec.teacher_depth) + "-unet", teacher,
                                      res.report);
      row.best_iteration = teacher_best;
      rows.push_back(row);
    }

    UnetConfig student_cfg = original_config(spec.student_depth);
    student_cfg.batch_norm_contracting = spec.student_batch_norm;
    auto run_student = [&](const std::string& label, DistillMode mode, const SoftTargetSet* soft_set) {
      DistillPlan plan = spec.plan;
      plan.mode = mode;
      plan.class_weights = weights;
      plan.expected_teacher_hash = soft_set != nullptr ? teacher_hash : 0;
      auto student = UnetModel<double>::build(student_cfg, spec.seed + 29);
      TrainResult res = train(student, plan, data.train, data.test, soft_set, out / "runs" / label);
      rows.push_back(to_metrics_row(label, res.best_model, res.report));
    };
    run_student("student-soft-only", DistillMode::VanillaSoft, &soft);
    run_student("student-mixed", DistillMode::Mixed, &soft);
    run_student("no-distill-baseline", DistillMode::HardOnly, nullptr);

    std::string table = "model,params_paper_compat,iou,test_loss\n";
    for (const auto& r : rows) {
      UnetConfig cfg = r.label.rfind("teacher", 0) == 0 ? original_config(spec.teacher_depth) : student_cfg;
      cfg.param_count_mode = ParamCountMode::PaperCompat;
      table += r.label + "," + std::to_string(count_params(cfg)) + "," + fmt(r.iou_score) + "," +
               fmt(r.test_loss) + "\n";
    }
    write_text(out / "final_comparison.csv", table);
  } else {
    // single-run: one training per mode in the grid
    const ClassWeights weights =
        spec.auto_class_weights ? compute_class_weight(data.train) : spec.plan.class_weights;
    UnetConfig cfg = original_config(spec.student_depth);
    cfg.batch_norm_contracting = spec.student_batch_norm;
    SoftTargetSet soft;
    const bool needs_soft = std::any_of(spec.modes.begin(), spec.modes.end(),
                                        [](DistillMode m) { return m != DistillMode::HardOnly; });
    std::uint64_t teacher_hash = 0;
    if (needs_soft) {
      if (spec.teacher_checkpoint.empty() || !std::filesystem::exists(spec.teacher_checkpoint)) {
        throw Error("experiment: single-run with distillation modes needs an existing teacher checkpoint");
      }
      auto teacher = load_checkpoint(spec.teacher_checkpoint);
      teacher_hash = state_hash(teacher);
      soft = generate_soft_targets(teacher, data.train, spec.plan.t_transfer);
    }
    for (const DistillMode mode : spec.modes) {
      DistillPlan plan = spec.plan;
      plan.mode = mode;
      plan.class_weights = weights;
      plan.expected_teacher_hash = mode != DistillMode::HardOnly ? teacher_hash : 0;
      auto student = UnetModel<double>::build(cfg, spec.seed);
      const std::string label = to_string(mode);
      TrainResult res = train(student, plan, data.train, data.test,
                              mode != DistillMode::HardOnly ? &soft : nullptr, out / "runs" / label);
      rows.push_back(to_metrics_row(label, res.best_model, res.report));
    }
  }

  write_metrics_csv(out / "metrics.csv", rows);
  return rows;
}

}  // namespace unsq

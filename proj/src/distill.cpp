#include "unsq/distill.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <nlohmann/json.hpp>

#include "unsq/metrics.hpp"

namespace unsq {

using nlohmann::json;

std::string to_string(DistillMode mode) {
  switch (mode) {
    case DistillMode::HardOnly: return "hard-only";
    case DistillMode::VanillaSoft: return "vanilla-soft";
    case DistillMode::Mixed: return "mixed";
    case DistillMode::SequentialSoftThenHard: return "sequential-soft-then-hard";
    case DistillMode::SequentialHardThenSoft: return "sequential-hard-then-soft";
  }
  throw Error("to_string: unknown distill mode");
}

DistillMode distill_mode_from_string(const std::string& name) {
  for (auto m : {DistillMode::HardOnly, DistillMode::VanillaSoft, DistillMode::Mixed,
                 DistillMode::SequentialSoftThenHard, DistillMode::SequentialHardThenSoft}) {
    if (to_string(m) == name) return m;
  }
  throw Error("unknown distill mode '" + name + "'");
}

void DistillPlan::validate() const {
  optimizer.validate();
  if (!(t_transfer > 0)) throw Error("plan: T_transfer must be positive");
  class_weights.validate();
  if (mode == DistillMode::Mixed && !(mix_alpha >= 0.0 && mix_alpha <= 1.0)) {
    throw Error("plan: mix_alpha must be in [0,1]");
  }
  if (max_iterations < 0) throw Error("plan: max_iterations must be non-negative");
  if (eval_every < 1) throw Error("plan: eval_every must be >= 1");
  if (is_sequential() && !(switch_iteration > 0 && switch_iteration < max_iterations)) {
    throw Error("plan: sequential modes need 0 < switch_iteration < max_iterations");
  }
  if (batch_size < 1) throw Error("plan: batch_size must be >= 1");
}

TrainingLoss training_loss(Tape<double>& tape, const DistillPlan& plan, const TensorXd& student_logits,
                           const TensorXd& hard_targets, const TensorXd* soft_batch,
                           std::uint64_t soft_teacher_hash, std::int64_t iteration) {
  TensorXd hard = weighted_cross_entropy(tape, student_logits, hard_targets, plan.class_weights);
  LossBreakdown bd;
  bd.hard = hard.item();

  TensorXd soft_raw;
  if (plan.uses_soft()) {
    if (soft_batch == nullptr || !soft_batch->defined()) {
      throw Error("training_loss: soft targets required for mode " + to_string(plan.mode));
    }
    if (plan.expected_teacher_hash != 0 && soft_teacher_hash != plan.expected_teacher_hash) {
      throw Error("training_loss: stale soft targets (teacher hash " + to_hex(soft_teacher_hash) +
                  ", plan expects " + to_hex(plan.expected_teacher_hash) + ")");
    }
    soft_raw = soft_cross_entropy(tape, student_logits, *soft_batch, plan.t_transfer, plan.class_weights);
    bd.soft = soft_raw.item();
  }

  const double t2 = plan.t_transfer * plan.t_transfer;
  TensorXd total;
  switch (plan.mode) {
    case DistillMode::HardOnly:
      total = hard;
      break;
    case DistillMode::VanillaSoft:
      total = scalar_mul(tape, soft_raw, t2);
      break;
    case DistillMode::Mixed:
      total = add(tape, scalar_mul(tape, hard, plan.mix_alpha),
                  scalar_mul(tape, scalar_mul(tape, soft_raw, t2), 1.0 - plan.mix_alpha));
      break;
    case DistillMode::SequentialSoftThenHard:
      total = iteration < plan.switch_iteration ? scalar_mul(tape, soft_raw, t2) : hard;
      break;
    case DistillMode::SequentialHardThenSoft:
      total = iteration < plan.switch_iteration ? hard : scalar_mul(tape, soft_raw, t2);
      break;
  }
  return {total, bd};
}

ClassWeights compute_class_weight(const DatasetManifest& manifest) {
  if (manifest.foreground_pixels <= 0) {
    throw DataError("compute_class_weight: split has no foreground pixels, w_f is undefined");
  }
  return ClassWeights{static_cast<double>(manifest.background_pixels) /
                          static_cast<double>(manifest.foreground_pixels),
                      1.0};
}

ClassWeights compute_class_weight(const Dataset& ds) {
  std::int64_t fg = 0;
  for (Eigen::Index i = 0; i < ds.masks.size(); ++i) fg += ds.masks.data()[i] == 1.0 ? 1 : 0;
  if (fg == 0) throw DataError("compute_class_weight: split has no foreground pixels, w_f is undefined");
  return ClassWeights{static_cast<double>(ds.masks.size() - fg) / static_cast<double>(fg), 1.0};
}

SoftTargetSet generate_soft_targets(UnetModel<double>& teacher, const Dataset& split, double temperature,
                                    Eigen::Index batch_size) {
  if (!(temperature > 0)) throw Error("generate_soft_targets: temperature must be positive");
  const Shape s = split.images.shape();
  auto probs = TensorXd::zeros(Shape{s.n, 2, s.h, s.w});
  Tape<double> tape(false);
  for (Eigen::Index start = 0; start < s.n; start += batch_size) {
    const Eigen::Index end = std::min(s.n, start + batch_size);
    std::vector<Eigen::Index> idx;
    for (Eigen::Index i = start; i < end; ++i) idx.push_back(i);
    const TensorXd logits = teacher.forward(tape, gather_batch(split.images, idx), Mode::Eval);
    const TensorXd p = softmax_temperature(tape, logits, temperature);
    std::copy_n(p.data(), p.size(), probs.data() + start * 2 * s.plane());
  }
  SoftTargetSet set;
  set.probs = probs;
  set.temperature = temperature;
  set.teacher_hash = state_hash(teacher);
  set.set_hash = soft_set_hash(probs);
  return set;
}

namespace {

std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct SplitEval {
  double hard_weighted = 0;
  double hard_unweighted = 0;
  double soft = std::numeric_limits<double>::quiet_NaN();
  double iou_score = 0;
};

SplitEval eval_split(UnetModel<double>& model, const DistillPlan& plan, const Dataset& ds,
                     const SoftTargetSet* soft, bool with_iou) {
  const Shape s = ds.images.shape();
  const ClassWeights unit{1.0, 1.0};
  Tape<double> tape(false);
  SplitEval out;
  double soft_acc = 0;
  TensorXd pred;
  if (with_iou) pred = TensorXd::zeros(Shape{s.n, 1, s.h, s.w});
  const Eigen::Index bs = 8;
  for (Eigen::Index start = 0; start < s.n; start += bs) {
    const Eigen::Index end = std::min(s.n, start + bs);
    std::vector<Eigen::Index> idx;
    for (Eigen::Index i = start; i < end; ++i) idx.push_back(i);
    const double frac = static_cast<double>(end - start) / static_cast<double>(s.n);
    const TensorXd images = gather_batch(ds.images, idx);
    const TensorXd masks = gather_batch(ds.masks, idx);
    const TensorXd logits = model.forward(tape, images, Mode::Eval);
    out.hard_weighted += frac * weighted_cross_entropy(tape, logits, masks, plan.class_weights).item();
    out.hard_unweighted += frac * weighted_cross_entropy(tape, logits, masks, unit).item();
    if (soft != nullptr) {
      const TensorXd soft_batch = gather_batch(soft->probs, idx);
      soft_acc += frac * soft_cross_entropy(tape, logits, soft_batch, plan.t_transfer, plan.class_weights)
                             .item();
    }
    if (with_iou) {
      const TensorXd m = predict_mask_from_logits(logits);
      std::copy_n(m.data(), m.size(), pred.data() + start * s.plane());
    }
  }
  if (soft != nullptr) out.soft = soft_acc;
  if (with_iou) out.iou_score = iou(pred, ds.masks);
  return out;
}

}  // namespace

SplitMetrics evaluate(UnetModel<double>& model, const Dataset& split, const ClassWeights& weights) {
  if (split.size() == 0) throw DataError("evaluate: empty split");
  DistillPlan plan;
  plan.class_weights = weights;
  const SplitEval ev = eval_split(model, plan, split, nullptr, true);
  SplitMetrics m;
  m.loss = ev.hard_weighted;
  m.loss_unweighted = ev.hard_unweighted;
  m.iou_score = ev.iou_score;
  const TensorXd pred = predict_mask(model, split.images);
  m.iou_class_averaged = iou_class_averaged(pred, split.masks);
  return m;
}

std::string TrainReport::csv() const {
  std::string out =
      "iteration,train_hard_weighted,train_hard_unweighted,train_soft,train_soft_t2,test_loss,test_iou\n";
  for (const auto& r : rows) {
    out += std::to_string(r.iteration) + "," + fmt(r.train_hard_weighted) + "," +
           fmt(r.train_hard_unweighted) + "," + fmt(r.train_soft) + "," + fmt(r.train_soft_t2) + "," +
           fmt(r.test_loss) + "," + fmt(r.test_iou) + "\n";
  }
  return out;
}

TrainResult train(UnetModel<double>& student, const DistillPlan& plan, const Dataset& train_split,
                  const Dataset& test_split, const SoftTargetSet* soft,
                  const std::filesystem::path& out_dir) {
  plan.validate();
  if (plan.mode == DistillMode::Mixed && !(plan.mix_alpha > 0.0 && plan.mix_alpha < 1.0)) {
    throw Error("train: mixed runs need mix_alpha strictly inside (0,1)");
  }
  if (train_split.size() == 0 || test_split.size() == 0) throw DataError("train: dataset empty");
  if (plan.uses_soft()) {
    if (soft == nullptr || !soft->probs.defined()) {
      throw Error("train: soft targets required for mode " + to_string(plan.mode));
    }
    const Shape ss = soft->probs.shape(), ts = train_split.images.shape();
    if (ss.n != ts.n || ss.h != ts.h || ss.w != ts.w) {
      throw ShapeError("train: soft targets " + ss.str() + " do not line up with the train split " +
                       ts.str());
    }
    if (soft->temperature != plan.t_transfer) {
      throw Error("train: soft targets were generated at T=" + std::to_string(soft->temperature) +
                  " but the plan transfers at T=" + std::to_string(plan.t_transfer));
    }
    if (plan.expected_teacher_hash != 0 && soft->teacher_hash != plan.expected_teacher_hash) {
      throw Error("train: stale soft targets (teacher hash " + to_hex(soft->teacher_hash) +
                  ", plan expects " + to_hex(plan.expected_teacher_hash) + ")");
    }
  }

  const auto t0 = std::chrono::steady_clock::now();
  auto params = student.parameters();
  OptimizerState<double> state;
  BatchStream stream(train_split.size(), plan.batch_size, plan.data_seed, true);

  TrainResult result{TrainReport{}, student.clone()};
  TrainReport& report = result.report;
  report.data_seed = plan.data_seed;
  report.model_seed = student.build_seed;

  auto evaluate = [&](std::int64_t iteration) {
    const SplitEval tr = eval_split(student, plan, train_split, plan.uses_soft() ? soft : nullptr, false);
    const SplitEval te = eval_split(student, plan, test_split, nullptr, true);
    EvalRow row;
    row.iteration = iteration;
    row.train_hard_weighted = tr.hard_weighted;
    row.train_hard_unweighted = tr.hard_unweighted;
    row.train_soft = tr.soft;
    row.train_soft_t2 = plan.t_transfer * plan.t_transfer * tr.soft;
    row.test_loss = te.hard_weighted;
    row.test_iou = te.iou_score;
    report.rows.push_back(row);
    if (row.test_loss < report.best_test_loss) {
      report.best_test_loss = row.test_loss;
      report.best_iteration = iteration;
      result.best_model = student.clone();
    }
  };

  evaluate(0);
  for (std::int64_t step = 1; step <= plan.max_iterations; ++step) {
    const auto& idx = stream.next();
    const TensorXd images = gather_batch(train_split.images, idx);
    const TensorXd masks = gather_batch(train_split.masks, idx);
    TensorXd soft_batch;
    if (plan.uses_soft()) soft_batch = gather_batch(soft->probs, idx);

    Tape<double> tape;
    for (auto& p : params) tape.register_leaf(p);
    zero_grads(params);
    const TensorXd logits = student.forward(tape, images, Mode::Train);
    const TrainingLoss loss = training_loss(tape, plan, logits, masks,
                                            plan.uses_soft() ? &soft_batch : nullptr,
                                            soft != nullptr ? soft->teacher_hash : 0, step - 1);
    const double value = loss.total.item();
    if (!std::isfinite(value)) {
      throw TrainAbortError("train: non-finite loss " + std::to_string(value) + " at iteration " +
                            std::to_string(step) + " (lr=" + std::to_string(plan.optimizer.learning_rate) +
                            ", mode=" + to_string(plan.mode) + ")");
    }
    tape.backward(loss.total);
    optimizer_step(params, plan.optimizer, state);

    if (step % plan.eval_every == 0 || step == plan.max_iterations) evaluate(step);
  }
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    const auto ckpt = out_dir / "best.ckpt";
    save_checkpoint(result.best_model, ckpt);
    report.checkpoint_path = ckpt.string();

    std::ofstream csv_out(out_dir / "report.csv", std::ios::trunc);
    if (!csv_out) throw Error("train: cannot write " + (out_dir / "report.csv").string());
    csv_out << report.csv();

    json j;
    j["plan"] = {{"mode", to_string(plan.mode)},
                 {"t_transfer", plan.t_transfer},
                 {"mix_alpha", plan.mix_alpha},
                 {"class_weights", {{"foreground", plan.class_weights.foreground},
                                    {"background", plan.class_weights.background}}},
                 {"optimizer", {{"kind", plan.optimizer.kind == OptimizerKind::Adam ? "adam" : "sgd-momentum"},
                                {"learning_rate", plan.optimizer.learning_rate},
                                {"momentum", plan.optimizer.momentum},
                                {"beta2", plan.optimizer.beta2},
                                {"weight_decay", plan.optimizer.weight_decay}}},
                 {"max_iterations", plan.max_iterations},
                 {"eval_every", plan.eval_every},
                 {"switch_iteration", plan.switch_iteration},
                 {"batch_size", plan.batch_size},
                 {"data_seed", plan.data_seed},
                 {"expected_teacher_hash", to_hex(plan.expected_teacher_hash)}};
    j["model_seed"] = report.model_seed;
    j["train_dataset_hash"] = to_hex(train_split.manifest.content_hash);
    j["test_dataset_hash"] = to_hex(test_split.manifest.content_hash);
    if (soft != nullptr) j["teacher_hash"] = to_hex(soft->teacher_hash);
    j["best_iteration"] = report.best_iteration;
    j["best_test_loss"] = report.best_test_loss;
    j["checkpoint"] = "best.ckpt";
    j["wall_seconds"] = report.wall_seconds;
    std::ofstream man_out(out_dir / "run_manifest.json", std::ios::trunc);
    if (!man_out) throw Error("train: cannot write " + (out_dir / "run_manifest.json").string());
    man_out << j.dump(2) << "\n";
  }
  return result;
}

}  // namespace unsq

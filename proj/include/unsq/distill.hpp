#pragma once

#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "unsq/data.hpp"
#include "unsq/layers.hpp"
#include "unsq/optim.hpp"
#include "unsq/unet.hpp"

namespace unsq {

enum class DistillMode { HardOnly, VanillaSoft, Mixed, SequentialSoftThenHard, SequentialHardThenSoft };

std::string to_string(DistillMode mode);
DistillMode distill_mode_from_string(const std::string& name);

struct DistillPlan {
  DistillMode mode = DistillMode::HardOnly;
  double t_transfer = 1.0;
  double mix_alpha = 0.5;  // weight on the hard term
  ClassWeights class_weights;
  OptimizerSpec optimizer;
  std::int64_t max_iterations = 1000;
  std::int64_t eval_every = 100;
  std::int64_t switch_iteration = 0;  // sequential modes only
  Eigen::Index batch_size = 4;
  std::uint64_t data_seed = 1;
  std::uint64_t expected_teacher_hash = 0;  // 0 disables the staleness check

  bool uses_soft() const { return mode != DistillMode::HardOnly; }
  bool is_sequential() const {
    return mode == DistillMode::SequentialSoftThenHard || mode == DistillMode::SequentialHardThenSoft;
  }
  void validate() const;
};

struct LossBreakdown {
  double hard = std::numeric_limits<double>::quiet_NaN();  // weighted, T=1
  double soft = std::numeric_limits<double>::quiet_NaN();  // raw, before the T^2 factor
};

struct TrainingLoss {
  TensorXd total;
  LossBreakdown breakdown;
};

// Scheduled loss on one batch:
//   hard-only            L_hard
//   vanilla-soft         T^2 * L_soft
//   mixed                alpha * L_hard + (1 - alpha) * (T^2 * L_soft)
//   sequential           soft-phase or hard-phase term picked by iteration
// L_soft is evaluated at plan.t_transfer, L_hard always at T=1.
TrainingLoss training_loss(Tape<double>& tape, const DistillPlan& plan, const TensorXd& student_logits,
                           const TensorXd& hard_targets, const TensorXd* soft_batch,
                           std::uint64_t soft_teacher_hash, std::int64_t iteration);

struct EvalRow {
  std::int64_t iteration = 0;
  double train_hard_weighted = 0;
  double train_hard_unweighted = 0;
  double train_soft = 0;
  double train_soft_t2 = 0;
  double test_loss = 0;  // weighted hard CE at T=1
  double test_iou = 0;
};

struct TrainReport {
  std::vector<EvalRow> rows;
  std::int64_t best_iteration = 0;
  double best_test_loss = std::numeric_limits<double>::infinity();
  std::string checkpoint_path;  // empty when the run was not persisted
  std::uint64_t data_seed = 0;
  std::uint64_t model_seed = 0;
  double wall_seconds = 0;  // excluded from the CSV so reruns are bit-identical

  std::string csv() const;
};

struct TrainResult {
  TrainReport report;
  UnetModel<double> best_model;
};

// w_f = background/foreground pixel ratio over the split, w_b = 1.
ClassWeights compute_class_weight(const DatasetManifest& manifest);
ClassWeights compute_class_weight(const Dataset& ds);

// Teacher probability maps at the transfer temperature, eval mode, tagged
// with the teacher's state hash so staleness is detectable.
SoftTargetSet generate_soft_targets(UnetModel<double>& teacher, const Dataset& split, double temperature,
                                    Eigen::Index batch_size = 8);

// One-shot evaluation of a model over a split, eval mode.
struct SplitMetrics {
  double loss = 0;  // weighted hard cross-entropy
  double loss_unweighted = 0;
  double iou_score = 0;
  double iou_class_averaged = 0;
};
SplitMetrics evaluate(UnetModel<double>& model, const Dataset& split, const ClassWeights& weights);

// Minibatch training with periodic evaluation: records an eval row at
// iteration 0, every eval_every steps, and at the end; tracks the
// best-test-loss checkpoint (ties keep the earliest); aborts on NaN loss.
// When out_dir is non-empty, writes best.ckpt, report.csv, run_manifest.json.
TrainResult train(UnetModel<double>& student, const DistillPlan& plan, const Dataset& train_split,
                  const Dataset& test_split, const SoftTargetSet* soft = nullptr,
                  const std::filesystem::path& out_dir = {});

}  // namespace unsq

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "unsq/distill.hpp"

namespace unsq {

enum class ExperimentKind { DepthSweep, TemperatureSweep, FinalComparison, SingleRun };

std::string to_string(ExperimentKind kind);
ExperimentKind experiment_kind_from_string(const std::string& name);

struct MetricsRow {
  std::string label;
  std::int64_t params = 0;  // trainable parameters, plain enumeration
  double iou_score = 0;
  double test_loss = 0;
  std::int64_t best_iteration = 0;
};

// A fully replayable experiment description: the JSON written next to the
// artifacts reloads into an identical run.
struct ExperimentSpec {
  ExperimentKind kind = ExperimentKind::SingleRun;
  std::vector<Eigen::Index> depths = {4, 2};                 // depth-sweep grid
  std::vector<double> temperatures = {2, 5, 10, 15, 20};     // temperature-sweep grid
  std::vector<DistillMode> modes = {DistillMode::HardOnly};  // single-run grid
  Eigen::Index student_depth = 2;
  Eigen::Index teacher_depth = 4;
  bool student_batch_norm = true;
  bool auto_class_weights = true;  // compute w_f from the train split for modified students
  DistillPlan plan;                // shared defaults
  SynthConfig data;                // used when dataset_root is empty
  std::string dataset_root;        // existing dataset with train/ and test/ splits
  std::string teacher_checkpoint;  // required for temperature-sweep
  std::string out_dir = "experiment_out";
  std::uint64_t seed = 1;          // base seed for model builds

  void validate() const;
};

void save_experiment_spec(const ExperimentSpec& spec, const std::filesystem::path& path);
ExperimentSpec load_experiment_spec(const std::filesystem::path& path);

// Runs the grid, writes per-run artifacts plus a table CSV whose column
// order mirrors the corresponding paper table, and returns one row per run.
std::vector<MetricsRow> run_experiment(const ExperimentSpec& spec);

}  // namespace unsq

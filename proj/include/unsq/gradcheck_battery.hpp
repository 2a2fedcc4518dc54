#pragma once

#include <string>
#include <vector>

#include "unsq/gradcheck.hpp"

namespace unsq {

struct BatteryCase {
  std::string name;
  GradCheckReport report;  // aggregated over seeds and probe tensors
};

struct BatteryOptions {
  std::uint64_t base_seed = 1;
  int seeds = 5;
  double epsilon = 1e-5;
  double tolerance = 1e-4;
  bool include_unet = true;  // end-to-end 2-Unet loss checks (the slow part)
};

struct BatteryResult {
  std::vector<BatteryCase> cases;
  double max_rel_error = 0.0;
  bool pass = true;

  const BatteryCase* worst() const;
};

// Finite-difference battery over every differentiable layer plus the
// end-to-end 2-Unet weighted-CE loss (with and without batch norm).
BatteryResult run_gradcheck_battery(const BatteryOptions& opt = {});

}  // namespace unsq

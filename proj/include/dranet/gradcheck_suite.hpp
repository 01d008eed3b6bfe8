// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dranet/autodiff.hpp"

#include <string>
#include <vector>

namespace dranet {

struct GradcheckResult {
  std::string name;
  std::string group;  // primitive | block | loss | model
  FiniteDiffReport report;
  bool passed = false;
};

constexpr double kGradcheckTolerance = 1e-4;

/// Names of every item the suite can check, in run order.
std::vector<std::string> gradcheck_names();

/// Runs one named item, or every item for "all". Throws ConfigError for an
/// unknown name.
std::vector<GradcheckResult> run_gradcheck(const std::string& scope = "all");

}  // namespace dranet

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace mast {

struct GradcheckCase {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

struct GradcheckReport {
  std::vector<GradcheckCase> cases;
  double seconds = 0.0;
  bool passed() const;
};

/// Worst elementwise |a-n| / max(|a|, |n|, floor).
double max_relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric,
                          double floor);

/// Compares reverse-mode gradients against central differences in 64-bit
/// mode: every differentiable primitive (h=1e-6, tolerance 1e-4) and the
/// composite loss on a 4-sample, d=8, K=2 model (h=1e-4, tolerance 1e-3).
/// Denominators are floored at 1e-6 (primitives) and 1e-5 (loss).
GradcheckReport gradcheck(std::uint64_t seed = 0);

nlohmann::json to_json(const GradcheckReport& r);

}  // namespace mast

#pragma once

#include <string>
#include <vector>

namespace pvmc {

struct OpCheck {
  std::string name;
  double max_rel_err = 0.0;
  double tol = 0.0;
  bool pass = false;
};

/// Result of the full gradient verification suite: per-op central finite
/// difference checks (64-bit, h = 1e-5), the composite-loss check on a small
/// net, the three-way PVMC comparison (closed form vs autodiff vs finite
/// differences), and a deliberately corrupted gradient rule that the
/// comparator must flag (negative control).
struct GradcheckReport {
  std::vector<OpCheck> ops;
  double pvmc_analytic_vs_autodiff = 0.0;
  double pvmc_analytic_vs_fd = 0.0;
  double pvmc_k_analytic_vs_autodiff = 0.0;
  int pvmc_patches_checked = 0;
  bool negative_control_detected = false;
  bool all_pass = false;
};

GradcheckReport run_gradcheck();

void print_gradcheck(const GradcheckReport& rep);

}  // namespace pvmc

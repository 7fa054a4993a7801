#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace sff {

struct GradcheckOptions {
  std::uint64_t seed = 7;
  double step = 1e-5;
  double threshold = 1e-4;
  std::string corrupt_op;  // forwarded to ad::testing::set_corrupted_op for the duration of the run
};

struct GradcheckEntry {
  std::string op;
  double max_rel_error = 0.0;
  std::size_t checked = 0;  // number of scalar partial derivatives compared
  bool passed = false;
};

struct GradcheckReport {
  double threshold = 0.0;
  std::vector<GradcheckEntry> entries;

  bool passed() const;
};

// Names of every differentiable tensor op plus the two full-model cases, in report order.
const std::vector<std::string>& gradcheck_cases();

// Central differences against reverse-mode gradients of a fixed random
// projection of each op's output. Relative error is
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-3).
GradcheckReport run_gradcheck(const GradcheckOptions& options = {});

// One "op  max_rel_error  checked  PASS|FAIL" line per entry.
std::string format_gradcheck(const GradcheckReport& report);

}  // namespace sff

#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "arcd/random.hpp"
#include "arcd/tensor.hpp"

namespace arcd {

struct NamedTensor {
  std::string name;
  Tensor<double> value;  // leaf with requires_grad
};

/// One draw of a case: leaves to differentiate and a forward closure over
/// them. `state` keeps whatever module the closure refers to alive.
struct GradcheckCase {
  std::vector<NamedTensor> inputs;
  std::function<Tensor<double>()> forward;
  std::shared_ptr<void> state;
};

using CaseFactory = std::function<GradcheckCase(Rng&)>;

struct GradcheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Denominator floor for the relative error |a-n| / max(|a|, |n|, floor).
  double floor = 1e-6;
  /// Coordinates checked per input; 0 checks all of them.
  int coordinates = 0;
  /// Resample when the smallest |relu input| is below this (0 disables).
  double kink_margin = 0;
  int max_resamples = 25;
};

struct GradcheckEntry {
  std::string input;
  double max_rel_error = 0;
  std::int64_t checked = 0;
  std::int64_t skipped = 0;  // coordinates whose perturbation crossed a relu kink
  double worst_analytic = 0, worst_numeric = 0;
  bool passed = false;
};

struct GradcheckReport {
  std::string name;
  double tolerance = 0;
  int resamples = 0;
  bool sampled = false;  // false if no kink-free draw was found
  std::vector<GradcheckEntry> entries;

  bool passed() const;
  double max_rel_error() const;
};

/// Central finite differences of sum(forward() * R) with a fixed random R,
/// compared against reverse mode. Coordinates whose perturbation flips a
/// relu are replaced by others; with `coordinates` = 0 (check everything)
/// any flip discards the whole draw. Deterministic given `seed`.
GradcheckReport gradcheck(const std::string& name, const CaseFactory& factory, std::uint64_t seed,
                          const GradcheckOptions& options = {});

struct GradcheckSuiteEntry {
  std::string name;
  bool composite;
  CaseFactory factory;
  GradcheckOptions options;
};

/// Every primitive plus the composite blocks and the full network on 32x32.
std::vector<GradcheckSuiteEntry> gradcheck_suite();

std::string format_report(const GradcheckReport& report);

}  // namespace arcd

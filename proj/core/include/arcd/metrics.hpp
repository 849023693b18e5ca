#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>

namespace arcd {

/// Pixel counts with "changed" as the positive class.
struct ConfusionMatrix {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }
  ConfusionMatrix& merge(const ConfusionMatrix& other);
  bool operator==(const ConfusionMatrix&) const = default;
};

/// Binary maps as 0/1 bytes (any nonzero counts as 1). Throws DimensionError
/// on a length mismatch.
ConfusionMatrix confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);

struct Scores {
  double kappa = 0, iou = 0, f1 = 0, rec = 0, pre = 0, oa = 0;
  // set when the matching denominator was zero and the value reported as 0
  bool kappa_degenerate = false, iou_degenerate = false, f1_degenerate = false;
  bool rec_degenerate = false, pre_degenerate = false;
};

/// Throws ContractError on an empty matrix.
Scores score(const ConfusionMatrix& cm);

struct UncertaintySeparation {
  double mean_u_on_errors = 0;
  double mean_u_on_correct = 0;
  std::uint64_t error_pixels = 0;
  std::uint64_t correct_pixels = 0;
  bool errors_empty = false;
  bool correct_empty = false;

  bool valid() const { return !errors_empty && !correct_empty; }
};

/// Accumulating form so several images can be pooled.
class SeparationAccumulator {
 public:
  void add(std::span<const double> p_u, std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);
  UncertaintySeparation result() const;

 private:
  double sum_err_ = 0, sum_ok_ = 0;
  std::uint64_t n_err_ = 0, n_ok_ = 0;
};

UncertaintySeparation uncertainty_separation(std::span<const double> p_u, std::span<const std::uint8_t> pred,
                                             std::span<const std::uint8_t> gt);

/// Human-readable table followed by key=value lines.
void write_report(std::ostream& os, const ConfusionMatrix& cm, const Scores& s);
std::string format_report(const ConfusionMatrix& cm);

}  // namespace arcd

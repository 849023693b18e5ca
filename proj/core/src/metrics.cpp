#include "arcd/metrics.hpp"

#include <cstdio>
#include <ostream>
#include <sstream>

#include "arcd/error.hpp"

namespace arcd {

ConfusionMatrix& ConfusionMatrix::merge(const ConfusionMatrix& other) {
  tp += other.tp;
  fp += other.fp;
  fn += other.fn;
  tn += other.tn;
  return *this;
}

ConfusionMatrix confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  if (pred.size() != gt.size())
    throw DimensionError("confusion: prediction has " + std::to_string(pred.size()) + " pixels, ground truth " +
                         std::to_string(gt.size()));
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    if (p && g) ++cm.tp;
    else if (p) ++cm.fp;
    else if (g) ++cm.fn;
    else ++cm.tn;
  }
  return cm;
}

namespace {

double ratio(double num, double den, bool& degenerate) {
  if (den == 0) {
    degenerate = true;
    return 0;
  }
  return num / den;
}

}  // namespace

Scores score(const ConfusionMatrix& cm) {
  const auto n = static_cast<double>(cm.total());
  if (n == 0) throw ContractError("score: empty confusion matrix");
  const double tp = cm.tp, fp = cm.fp, fn = cm.fn, tn = cm.tn;
  Scores s;
  s.pre = ratio(tp, tp + fp, s.pre_degenerate);
  s.rec = ratio(tp, tp + fn, s.rec_degenerate);
  s.f1 = ratio(2 * s.pre * s.rec, s.pre + s.rec, s.f1_degenerate);
  s.iou = ratio(tp, tp + fp + fn, s.iou_degenerate);
  s.oa = (tp + tn) / n;
  const double pe = ((tp + fp) * (tp + fn) + (fn + tn) * (fp + tn)) / (n * n);
  s.kappa = ratio(s.oa - pe, 1 - pe, s.kappa_degenerate);
  return s;
}

void SeparationAccumulator::add(std::span<const double> p_u, std::span<const std::uint8_t> pred,
                                std::span<const std::uint8_t> gt) {
  if (p_u.size() != pred.size() || pred.size() != gt.size())
    throw DimensionError("uncertainty_separation: map sizes differ");
  for (std::size_t i = 0; i < p_u.size(); ++i) {
    if ((pred[i] != 0) != (gt[i] != 0)) {
      sum_err_ += p_u[i];
      ++n_err_;
    } else {
      sum_ok_ += p_u[i];
      ++n_ok_;
    }
  }
}

UncertaintySeparation SeparationAccumulator::result() const {
  UncertaintySeparation r;
  r.error_pixels = n_err_;
  r.correct_pixels = n_ok_;
  r.errors_empty = n_err_ == 0;
  r.correct_empty = n_ok_ == 0;
  if (n_err_) r.mean_u_on_errors = sum_err_ / static_cast<double>(n_err_);
  if (n_ok_) r.mean_u_on_correct = sum_ok_ / static_cast<double>(n_ok_);
  return r;
}

UncertaintySeparation uncertainty_separation(std::span<const double> p_u, std::span<const std::uint8_t> pred,
                                             std::span<const std::uint8_t> gt) {
  SeparationAccumulator acc;
  acc.add(p_u, pred, gt);
  return acc.result();
}

void write_report(std::ostream& os, const ConfusionMatrix& cm, const Scores& s) {
  char line[128];
  os << "metric   value\n";
  const std::pair<const char*, double> rows[] = {{"kappa", s.kappa}, {"iou", s.iou}, {"f1", s.f1},
                                                  {"rec", s.rec},     {"pre", s.pre}, {"oa", s.oa}};
  for (const auto& [name, v] : rows) {
    std::snprintf(line, sizeof line, "%-8s %.6f\n", name, v);
    os << line;
  }
  os << "pixels   tp=" << cm.tp << " fp=" << cm.fp << " fn=" << cm.fn << " tn=" << cm.tn << "\n";
  for (const auto& [name, v] : rows) {
    std::snprintf(line, sizeof line, "%s=%.17g\n", name, v);
    os << line;
  }
  os << "tp=" << cm.tp << "\nfp=" << cm.fp << "\nfn=" << cm.fn << "\ntn=" << cm.tn << "\n";
  std::string flags;
  if (s.kappa_degenerate) flags += "kappa,";
  if (s.iou_degenerate) flags += "iou,";
  if (s.f1_degenerate) flags += "f1,";
  if (s.rec_degenerate) flags += "rec,";
  if (s.pre_degenerate) flags += "pre,";
  if (!flags.empty()) {
    flags.pop_back();
    os << "degenerate=" << flags << "\n";
  }
}

std::string format_report(const ConfusionMatrix& cm) {
  std::ostringstream os;
  write_report(os, cm, score(cm));
  return os.str();
}

}  // namespace arcd

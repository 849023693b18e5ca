#include "arcd/loss.hpp"

#include <algorithm>
#include <cmath>

#include "arcd/error.hpp"
#include "arcd/ops.hpp"

namespace arcd {

namespace {

template <typename T>
void require_same(const Tensor<T>& p, const Tensor<T>& g, const char* op) {
  if (p.shape() != g.shape())
    throw DimensionError(std::string(op) + ": prediction " + to_string(p.shape()) + " vs target " + to_string(g.shape()));
}

template <typename T>
void require_finite(const Tensor<T>& x, const char* op) {
  for (T v : x.data())
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
}

}  // namespace

template <typename T>
Tensor<T> bce(const Tensor<T>& p, const Tensor<T>& target) {
  require_same(p, target, "bce");
  require_finite(p, "bce");
  const T lo = T(kProbabilityClamp), hi = T(1) - T(kProbabilityClamp);
  const auto count = static_cast<double>(p.numel());
  double acc = 0;
  for (std::int64_t i = 0; i < p.numel(); ++i) {
    const double pc = std::clamp(p.data()[i], lo, hi);
    const double g = target.data()[i];
    acc -= g * std::log(pc) + (1.0 - g) * std::log(1.0 - pc);
  }
  Tensor<T> detached_target = target.detach();
  return detail::record<T>(Shape{1}, std::vector<T>{T(acc / count)}, {&p},
                           [target = std::move(detached_target), lo, hi, count](TensorNode<T>& self) {
                             const auto& pn = self.inputs[0];
                             if (!detail::wants_grad(pn)) return;
                             auto& gp = pn->grad_buffer();
                             const T scale = self.grad[0] / T(count);
                             for (std::size_t i = 0; i < gp.size(); ++i) {
                               const T pv = pn->data[i];
                               if (pv < lo || pv > hi) continue;
                               const T g = target.data()[i];
                               gp[i] += scale * (-g / pv + (T(1) - g) / (T(1) - pv));
                             }
                           });
}

template <typename T>
Tensor<T> dice(const Tensor<T>& p, const Tensor<T>& target) {
  require_same(p, target, "dice");
  require_finite(p, "dice");
  double inter = 0, sp = 0, sg = 0;
  for (std::int64_t i = 0; i < p.numel(); ++i) {
    inter += static_cast<double>(p.data()[i]) * target.data()[i];
    sp += p.data()[i];
    sg += target.data()[i];
  }
  const double eps = kDiceSmoothing;
  const double num = 2.0 * inter + eps;
  const double den = sp + sg + eps;
  Tensor<T> detached_target = target.detach();
  return detail::record<T>(Shape{1}, std::vector<T>{T(1.0 - num / den)}, {&p},
                           [target = std::move(detached_target), num, den](TensorNode<T>& self) {
                             const auto& pn = self.inputs[0];
                             if (!detail::wants_grad(pn)) return;
                             auto& gp = pn->grad_buffer();
                             const double up = self.grad[0];
                             for (std::size_t i = 0; i < gp.size(); ++i) {
                               const double g = target.data()[i];
                               gp[i] += T(-up * (2.0 * g * den - num) / (den * den));
                             }
                           });
}

template <typename T>
Tensor<T> uncertainty_target(const Tensor<T>& p_change, const Tensor<T>& g_change) {
  require_same(p_change, g_change, "uncertainty_target");
  std::vector<T> out(static_cast<std::size_t>(p_change.numel()));
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T p = p_change.data()[i], g = g_change.data()[i];
    out[i] = p * (T(1) - g) + g * (T(1) - p);
  }
  return Tensor<T>(p_change.shape(), std::move(out));
}

template <typename T>
Tensor<T> boundary_target(const Tensor<T>& g_change) {
  const auto& s = g_change.shape();
  std::int64_t planes, h, w;
  if (s.size() == 2) {
    planes = 1, h = s[0], w = s[1];
  } else if (s.size() == 4 && s[1] == 1) {
    planes = s[0], h = s[2], w = s[3];
  } else {
    throw DimensionError("boundary_target: expected [H,W] or [N,1,H,W], got " + to_string(s));
  }
  std::vector<T> out(static_cast<std::size_t>(g_change.numel()), T(0));
  const auto g = g_change.data();
  for (std::int64_t p = 0; p < planes; ++p) {
    const std::int64_t base = p * h * w;
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        const T c = g[base + y * w + x];
        const bool edge = (y > 0 && g[base + (y - 1) * w + x] != c) || (y + 1 < h && g[base + (y + 1) * w + x] != c) ||
                          (x > 0 && g[base + y * w + x - 1] != c) || (x + 1 < w && g[base + y * w + x + 1] != c);
        out[base + y * w + x] = edge ? T(1) : T(0);
      }
  }
  return Tensor<T>(s, std::move(out));
}

template <typename T>
LossBundle<T> total_loss(const PredictionBundle<T>& prediction, const Tensor<T>& g_change, const AblationConfig& cfg) {
  std::vector<const Tensor<T>*> supervised;
  for (const auto& p : prediction.level_probabilities) supervised.push_back(&p);
  for (const auto& p : prediction.refined_probabilities) supervised.push_back(&p);
  supervised.push_back(&prediction.change);

  LossBundle<T> out;
  Tensor<T> total;
  for (const auto* p : supervised) {
    auto b = bce(*p, g_change);
    auto d = dice(*p, g_change);
    out.l_bce += b.item();
    out.l_dice += d.item();
    auto term = add(b, d);
    total = total.defined() ? add(total, term) : term;
  }
  out.supervised_maps = static_cast<int>(supervised.size());
  out.l_c = out.l_bce + out.l_dice;

  if (cfg.use_oue) {
    if (!prediction.uncertainty.defined()) throw ContractError("total_loss: uncertainty branch enabled but p^u missing");
    auto target = cfg.uncertainty_supervision == UncertaintySupervision::prediction_error
                      ? uncertainty_target(prediction.change.detach(), g_change)
                      : boundary_target(g_change);
    auto lu = bce(prediction.uncertainty, target);
    out.l_u = lu.item();
    total = add(total, lu);
  }
  out.total = total;
  out.total_value = total.item();
  if (!std::isfinite(out.total_value)) throw NumericError("total_loss: non-finite loss");
  return out;
}

#define ARCD_INSTANTIATE_LOSS(T)                                                                         \
  template Tensor<T> bce(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> dice(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> uncertainty_target(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> boundary_target(const Tensor<T>&);                                                  \
  template LossBundle<T> total_loss(const PredictionBundle<T>&, const Tensor<T>&, const AblationConfig&);

ARCD_INSTANTIATE_LOSS(float)
ARCD_INSTANTIATE_LOSS(double)

}  // namespace arcd

#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "arcd/tensor.hpp"

namespace arcd {

// --- convolution -----------------------------------------------------------
// Cross-correlation (no kernel flip). `bias` may be undefined.

/// x[N,C,H,W] * w[K,C,kh,kw] -> [N,K,H',W'], H' = (H + 2p - kh) / stride + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride = 1,
                 int padding = 0);

/// x[N,C,D,H,W] * w[K,C,kd,kh,kw] -> [N,K,D',H',W'] with unit stride and
/// per-axis zero padding (depth, height, width).
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::array<int, 3> padding = {0, 0, 0});

// --- normalization ---------------------------------------------------------

template <typename T>
struct RunningStats {
  std::vector<T> mean;
  std::vector<T> var;

  explicit RunningStats(std::size_t channels = 0) : mean(channels, T{0}), var(channels, T{1}) {}
};

enum class NormMode { train, eval };

/// Per-channel normalization of x[N,C,...]. Train mode uses biased batch
/// statistics and folds the unbiased variance into `stats` with `momentum`.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     RunningStats<T>& stats, NormMode mode, T momentum = T(0.1), T eps = T(1e-5));

// --- elementwise -----------------------------------------------------------
// Binary ops require identical shapes; use the explicit scale_* ops for the
// per-channel and per-pixel broadcasts.

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T s);
template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T s);
/// 1 - x
template <typename T>
Tensor<T> one_minus(const Tensor<T>& x);
template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);

/// x[N,C,H,W] scaled by s[N,C] (broadcast over pixels).
template <typename T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& s);
/// x[N,C,H,W] scaled by m[N,1,H,W] (broadcast over channels).
template <typename T>
Tensor<T> scale_pixels(const Tensor<T>& x, const Tensor<T>& m);

// --- structural ------------------------------------------------------------

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
/// Bilinear resize of x[N,C,H,W] by an integer factor, half-pixel centers
/// with edge clamping (align_corners = false). Factor 1 is the identity.
template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, int factor);
template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, int factor);
/// x[N,C,H,W] -> [N,C]
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);
/// x[N,C] -> x W^T + b, W[K,C], b[K] (b may be undefined).
template <typename T>
Tensor<T> matvec(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

// --- reductions ------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);
/// sum(x * r) with r held constant.
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& x, std::span<const T> r);

// --- kink monitoring (gradcheck support) -----------------------------------

/// While installed on a thread, every relu() appends the sign pattern of
/// its input and tracks the smallest |input| seen.
struct KinkMonitor {
  std::vector<std::uint8_t> signs;
  double min_abs = 1e300;
};

class KinkMonitorScope {
 public:
  explicit KinkMonitorScope(KinkMonitor& monitor);
  ~KinkMonitorScope();
  KinkMonitorScope(const KinkMonitorScope&) = delete;
  KinkMonitorScope& operator=(const KinkMonitorScope&) = delete;

 private:
  KinkMonitor* previous_;
};

}  // namespace arcd

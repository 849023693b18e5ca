#include "arcd/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "arcd/error.hpp"

namespace arcd {

namespace {

thread_local KinkMonitor* t_kink_monitor = nullptr;

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

void require_rank(const Shape& s, std::size_t rank, const char* op, const char* what) {
  if (s.size() != rank)
    throw DimensionError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                         ", got " + to_string(s));
}

void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return;
  if (a.size() != b.size())
    throw DimensionError(std::string(op) + ": rank mismatch " + to_string(a) + " vs " + to_string(b));
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i])
      throw DimensionError(std::string(op) + ": axis " + std::to_string(i) + " mismatch (" +
                           std::to_string(a[i]) + " vs " + std::to_string(b[i]) + ")");
}

// Geometry shared by conv2d (depth 1) and conv3d.
struct ConvGeometry {
  std::int64_t channels, depth, height, width;
  std::int64_t kd, kh, kw;
  std::int64_t sd, sh, sw;
  std::int64_t pd, ph, pw;
  std::int64_t out_d, out_h, out_w;

  std::int64_t col_rows() const { return channels * kd * kh * kw; }
  std::int64_t col_cols() const { return out_d * out_h * out_w; }
  std::int64_t in_plane() const { return channels * depth * height * width; }
  bool pointwise() const {
    return kd == 1 && kh == 1 && kw == 1 && sd == 1 && sh == 1 && sw == 1 && pd == 0 && ph == 0 && pw == 0;
  }
};

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const std::int64_t cols = g.col_cols();
  std::int64_t row = 0;
  for (std::int64_t c = 0; c < g.channels; ++c)
    for (std::int64_t a = 0; a < g.kd; ++a)
      for (std::int64_t b = 0; b < g.kh; ++b)
        for (std::int64_t e = 0; e < g.kw; ++e, ++row) {
          T* out = col + row * cols;
          for (std::int64_t od = 0; od < g.out_d; ++od) {
            const std::int64_t id = od * g.sd - g.pd + a;
            for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
              const std::int64_t ih = oh * g.sh - g.ph + b;
              T* dst = out + (od * g.out_h + oh) * g.out_w;
              if (id < 0 || id >= g.depth || ih < 0 || ih >= g.height) {
                std::fill(dst, dst + g.out_w, T{0});
                continue;
              }
              const T* src = x + ((c * g.depth + id) * g.height + ih) * g.width;
              for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
                const std::int64_t iw = ow * g.sw - g.pw + e;
                dst[ow] = (iw >= 0 && iw < g.width) ? src[iw] : T{0};
              }
            }
          }
        }
}

template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* dx) {
  const std::int64_t cols = g.col_cols();
  std::int64_t row = 0;
  for (std::int64_t c = 0; c < g.channels; ++c)
    for (std::int64_t a = 0; a < g.kd; ++a)
      for (std::int64_t b = 0; b < g.kh; ++b)
        for (std::int64_t e = 0; e < g.kw; ++e, ++row) {
          const T* in = col + row * cols;
          for (std::int64_t od = 0; od < g.out_d; ++od) {
            const std::int64_t id = od * g.sd - g.pd + a;
            if (id < 0 || id >= g.depth) continue;
            for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
              const std::int64_t ih = oh * g.sh - g.ph + b;
              if (ih < 0 || ih >= g.height) continue;
              const T* src = in + (od * g.out_h + oh) * g.out_w;
              T* dst = dx + ((c * g.depth + id) * g.height + ih) * g.width;
              for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
                const std::int64_t iw = ow * g.sw - g.pw + e;
                if (iw >= 0 && iw < g.width) dst[iw] += src[ow];
              }
            }
          }
        }
}

// x[N, C, D, H, W] (D may be folded to 1), weight [K, C*kd*kh*kw].
template <typename T>
Tensor<T> conv_impl(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, ConvGeometry g,
                    std::int64_t batch, std::int64_t out_channels, Shape out_shape) {
  const std::int64_t rows = g.col_rows();
  const std::int64_t cols = g.col_cols();
  std::vector<T> out(static_cast<std::size_t>(batch * out_channels * cols));
  std::vector<T> col;
  if (!g.pointwise()) col.resize(static_cast<std::size_t>(rows * cols));
  CMapR<T> w(weight.data().data(), out_channels, rows);
  for (std::int64_t n = 0; n < batch; ++n) {
    const T* xn = x.data().data() + n * g.in_plane();
    const T* colp = xn;
    if (!g.pointwise()) {
      im2col(xn, g, col.data());
      colp = col.data();
    }
    MapR<T> y(out.data() + n * out_channels * cols, out_channels, cols);
    y.noalias() = w * CMapR<T>(colp, rows, cols);
    if (bias.defined()) {
      for (std::int64_t k = 0; k < out_channels; ++k) y.row(k).array() += bias.data()[k];
    }
  }

  return detail::record<T>(
      std::move(out_shape), std::move(out), {&x, &weight, &bias},
      [g, batch, out_channels](TensorNode<T>& self) {
        const auto& xin = self.inputs[0];
        const auto& win = self.inputs[1];
        const auto& bin = self.inputs[2];
        const std::int64_t rows = g.col_rows();
        const std::int64_t cols = g.col_cols();
        std::vector<T> col;
        if (!g.pointwise()) col.resize(static_cast<std::size_t>(rows * cols));
        std::vector<T> dcol(static_cast<std::size_t>(rows * cols));
        CMapR<T> w(win->data.data(), out_channels, rows);
        for (std::int64_t n = 0; n < batch; ++n) {
          CMapR<T> dy(self.grad.data() + n * out_channels * cols, out_channels, cols);
          const T* xn = xin->data.data() + n * g.in_plane();
          if (detail::wants_grad(win)) {
            const T* colp = xn;
            if (!g.pointwise()) {
              im2col(xn, g, col.data());
              colp = col.data();
            }
            MapR<T> dw(win->grad_buffer().data(), out_channels, rows);
            dw.noalias() += dy * CMapR<T>(colp, rows, cols).transpose();
          }
          if (detail::wants_grad(bin)) {
            auto& db = bin->grad_buffer();
            for (std::int64_t k = 0; k < out_channels; ++k) db[k] += dy.row(k).sum();
          }
          if (detail::wants_grad(xin)) {
            T* dxn = xin->grad_buffer().data() + n * g.in_plane();
            if (g.pointwise()) {
              MapR<T>(dxn, rows, cols).noalias() += w.transpose() * dy;
            } else {
              MapR<T> dc(dcol.data(), rows, cols);
              dc.noalias() = w.transpose() * dy;
              col2im(dcol.data(), g, dxn);
            }
          }
        }
      });
}

template <typename T>
void check_bias(const Tensor<T>& bias, std::int64_t k, const char* op) {
  if (!bias.defined()) return;
  if (bias.rank() != 1 || bias.dim(0) != k)
    throw DimensionError(std::string(op) + ": bias axis 0 must equal output channels " + std::to_string(k) +
                         ", got " + to_string(bias.shape()));
}

template <typename T, typename F>
Tensor<T> unary(const Tensor<T>& x, F f, BackwardFn<T> fn) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = f(v);
  return detail::record<T>(x.shape(), std::move(out), {&x}, std::move(fn));
}

}  // namespace

KinkMonitorScope::KinkMonitorScope(KinkMonitor& monitor) : previous_(t_kink_monitor) {
  t_kink_monitor = &monitor;
}
KinkMonitorScope::~KinkMonitorScope() { t_kink_monitor = previous_; }

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride,
                 int padding) {
  require_rank(x.shape(), 4, "conv2d", "input");
  require_rank(weight.shape(), 4, "conv2d", "weight");
  if (stride < 1) throw ContractError("conv2d: stride must be positive");
  if (padding < 0) throw ContractError("conv2d: padding must be non-negative");
  const auto& xs = x.shape();
  const auto& ws = weight.shape();
  if (xs[1] != ws[1])
    throw DimensionError("conv2d: channel axis 1 mismatch (input " + std::to_string(xs[1]) + ", weight " +
                         std::to_string(ws[1]) + ")");
  if (ws[2] > xs[2] + 2 * padding)
    throw DimensionError("conv2d: kernel height " + std::to_string(ws[2]) + " exceeds padded input height (axis 2)");
  if (ws[3] > xs[3] + 2 * padding)
    throw DimensionError("conv2d: kernel width " + std::to_string(ws[3]) + " exceeds padded input width (axis 3)");
  check_bias(bias, ws[0], "conv2d");
  ConvGeometry g{xs[1], 1, xs[2], xs[3], 1, ws[2], ws[3], 1, stride, stride, 0, padding, padding, 1, 0, 0};
  g.out_h = (xs[2] + 2 * padding - ws[2]) / stride + 1;
  g.out_w = (xs[3] + 2 * padding - ws[3]) / stride + 1;
  return conv_impl(x, weight, bias, g, xs[0], ws[0], Shape{xs[0], ws[0], g.out_h, g.out_w});
}

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::array<int, 3> padding) {
  require_rank(x.shape(), 5, "conv3d", "input");
  require_rank(weight.shape(), 5, "conv3d", "weight");
  const auto& xs = x.shape();
  const auto& ws = weight.shape();
  if (xs[1] != ws[1])
    throw DimensionError("conv3d: channel axis 1 mismatch (input " + std::to_string(xs[1]) + ", weight " +
                         std::to_string(ws[1]) + ")");
  for (int a = 0; a < 3; ++a) {
    if (padding[a] < 0) throw ContractError("conv3d: padding must be non-negative");
    if (ws[2 + a] > xs[2 + a] + 2 * padding[a])
      throw DimensionError("conv3d: kernel extent exceeds padded input on axis " + std::to_string(2 + a));
  }
  check_bias(bias, ws[0], "conv3d");
  ConvGeometry g{xs[1], xs[2], xs[3], xs[4], ws[2], ws[3], ws[4], 1, 1, 1, padding[0], padding[1], padding[2], 0, 0, 0};
  g.out_d = xs[2] + 2 * padding[0] - ws[2] + 1;
  g.out_h = xs[3] + 2 * padding[1] - ws[3] + 1;
  g.out_w = xs[4] + 2 * padding[2] - ws[4] + 1;
  return conv_impl(x, weight, bias, g, xs[0], ws[0], Shape{xs[0], ws[0], g.out_d, g.out_h, g.out_w});
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, RunningStats<T>& stats,
                     NormMode mode, T momentum, T eps) {
  if (x.rank() < 2) throw DimensionError("batch_norm: input must have rank >= 2, got " + to_string(x.shape()));
  const std::int64_t n = x.dim(0);
  const std::int64_t c = x.dim(1);
  const std::int64_t spatial = x.numel() / (n * c);
  if (gamma.numel() != c || beta.numel() != c)
    throw DimensionError("batch_norm: channel axis 1 (" + std::to_string(c) + ") does not match gamma/beta");
  if (stats.mean.size() != static_cast<std::size_t>(c) || stats.var.size() != static_cast<std::size_t>(c))
    throw DimensionError("batch_norm: channel axis 1 (" + std::to_string(c) + ") does not match running stats");
  const std::int64_t m = n * spatial;
  if (mode == NormMode::train && m <= 1)
    throw ContractError("batch_norm: train mode needs more than one value per channel, got N*spatial = " +
                        std::to_string(m));

  const T* xd = x.data().data();
  std::vector<T> invstd(static_cast<std::size_t>(c));
  std::vector<T> xhat(x.data().size());
  for (std::int64_t ch = 0; ch < c; ++ch) {
    T mu, var;
    if (mode == NormMode::train) {
      T s = 0;
      for (std::int64_t i = 0; i < n; ++i) {
        const T* p = xd + (i * c + ch) * spatial;
        for (std::int64_t k = 0; k < spatial; ++k) s += p[k];
      }
      mu = s / T(m);
      T ss = 0;
      for (std::int64_t i = 0; i < n; ++i) {
        const T* p = xd + (i * c + ch) * spatial;
        for (std::int64_t k = 0; k < spatial; ++k) ss += (p[k] - mu) * (p[k] - mu);
      }
      var = ss / T(m);
      stats.mean[ch] = (T{1} - momentum) * stats.mean[ch] + momentum * mu;
      stats.var[ch] = (T{1} - momentum) * stats.var[ch] + momentum * var * T(m) / T(m - 1);
    } else {
      mu = stats.mean[ch];
      var = stats.var[ch];
    }
    const T is = T{1} / std::sqrt(var + eps);
    invstd[ch] = is;
    for (std::int64_t i = 0; i < n; ++i) {
      const std::int64_t off = (i * c + ch) * spatial;
      for (std::int64_t k = 0; k < spatial; ++k) xhat[off + k] = (xd[off + k] - mu) * is;
    }
  }
  std::vector<T> out(xhat.size());
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const std::int64_t off = (i * c + ch) * spatial;
      const T g = gamma.data()[ch], b = beta.data()[ch];
      for (std::int64_t k = 0; k < spatial; ++k) out[off + k] = g * xhat[off + k] + b;
    }

  const bool train = mode == NormMode::train;
  return detail::record<T>(
      x.shape(), std::move(out), {&x, &gamma, &beta},
      [xhat = std::move(xhat), invstd = std::move(invstd), n, c, spatial, m, train](TensorNode<T>& self) {
        const auto& xin = self.inputs[0];
        const auto& gin = self.inputs[1];
        const auto& bin = self.inputs[2];
        const T* dy = self.grad.data();
        for (std::int64_t ch = 0; ch < c; ++ch) {
          T sdy = 0, sdyx = 0;
          for (std::int64_t i = 0; i < n; ++i) {
            const std::int64_t off = (i * c + ch) * spatial;
            for (std::int64_t k = 0; k < spatial; ++k) {
              sdy += dy[off + k];
              sdyx += dy[off + k] * xhat[off + k];
            }
          }
          if (detail::wants_grad(gin)) gin->grad_buffer()[ch] += sdyx;
          if (detail::wants_grad(bin)) bin->grad_buffer()[ch] += sdy;
          if (!detail::wants_grad(xin)) continue;
          T* dx = xin->grad_buffer().data();
          const T g = gin->data[ch];
          const T is = invstd[ch];
          for (std::int64_t i = 0; i < n; ++i) {
            const std::int64_t off = (i * c + ch) * spatial;
            for (std::int64_t k = 0; k < spatial; ++k) {
              if (train)
                dx[off + k] += g * is / T(m) * (T(m) * dy[off + k] - sdy - xhat[off + k] * sdyx);
              else
                dx[off + k] += g * is * dy[off + k];
            }
          }
        }
      });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a.shape(), b.shape(), "add");
  std::vector<T> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.data()[i];
  return detail::record<T>(a.shape(), std::move(out), {&a, &b}, [](TensorNode<T>& self) {
    for (int k = 0; k < 2; ++k) {
      const auto& in = self.inputs[k];
      if (!detail::wants_grad(in)) continue;
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.data()[i];
  return detail::record<T>(a.shape(), std::move(out), {&a, &b}, [](TensorNode<T>& self) {
    if (detail::wants_grad(self.inputs[0])) {
      auto& g = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (detail::wants_grad(self.inputs[1])) {
      auto& g = self.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.data()[i];
  return detail::record<T>(a.shape(), std::move(out), {&a, &b}, [](TensorNode<T>& self) {
    const auto& an = self.inputs[0];
    const auto& bn = self.inputs[1];
    if (detail::wants_grad(an)) {
      auto& g = an->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->data[i];
    }
    if (detail::wants_grad(bn)) {
      auto& g = bn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->data[i];
    }
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return unary<T>(x, [s](T v) { return v + s; }, [](TensorNode<T>& self) {
    if (!detail::wants_grad(self.inputs[0])) return;
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T s) {
  return unary<T>(x, [s](T v) { return v * s; }, [s](TensorNode<T>& self) {
    if (!detail::wants_grad(self.inputs[0])) return;
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

template <typename T>
Tensor<T> one_minus(const Tensor<T>& x) {
  return unary<T>(x, [](T v) { return T{1} - v; }, [](TensorNode<T>& self) {
    if (!detail::wants_grad(self.inputs[0])) return;
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  if (KinkMonitor* mon = t_kink_monitor) {
    for (T v : x.data()) {
      mon->signs.push_back(v > T{0} ? 1 : 0);
      mon->min_abs = std::min(mon->min_abs, static_cast<double>(std::abs(v)));
    }
  }
  return unary<T>(x, [](T v) { return v > T{0} ? v : T{0}; }, [](TensorNode<T>& self) {
    if (!detail::wants_grad(self.inputs[0])) return;
    auto& g = self.inputs[0]->grad_buffer();
    const auto& xd = self.inputs[0]->data;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xd[i] > T{0}) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary<T>(
      x,
      [](T v) {
        if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
        const T e = std::exp(v);
        return e / (T{1} + e);
      },
      [](TensorNode<T>& self) {
        if (!detail::wants_grad(self.inputs[0])) return;
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T s = self.data[i];
          g[i] += self.grad[i] * s * (T{1} - s);
        }
      });
}

template <typename T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& s) {
  require_rank(x.shape(), 4, "scale_channels", "input");
  require_rank(s.shape(), 2, "scale_channels", "scale");
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (s.dim(0) != n) throw DimensionError("scale_channels: batch axis 0 mismatch");
  if (s.dim(1) != c) throw DimensionError("scale_channels: channel axis 1 mismatch");
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::int64_t i = 0; i < n * c; ++i) {
    const T f = s.data()[i];
    for (std::int64_t k = 0; k < hw; ++k) out[i * hw + k] *= f;
  }
  return detail::record<T>(x.shape(), std::move(out), {&x, &s}, [n, c, hw](TensorNode<T>& self) {
    const auto& xn = self.inputs[0];
    const auto& sn = self.inputs[1];
    for (std::int64_t i = 0; i < n * c; ++i) {
      const T* dy = self.grad.data() + i * hw;
      if (detail::wants_grad(xn)) {
        T* dx = xn->grad_buffer().data() + i * hw;
        const T f = sn->data[i];
        for (std::int64_t k = 0; k < hw; ++k) dx[k] += dy[k] * f;
      }
      if (detail::wants_grad(sn)) {
        const T* xv = xn->data.data() + i * hw;
        T acc = 0;
        for (std::int64_t k = 0; k < hw; ++k) acc += dy[k] * xv[k];
        sn->grad_buffer()[i] += acc;
      }
    }
  });
}

template <typename T>
Tensor<T> scale_pixels(const Tensor<T>& x, const Tensor<T>& m) {
  require_rank(x.shape(), 4, "scale_pixels", "input");
  require_rank(m.shape(), 4, "scale_pixels", "map");
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (m.dim(0) != n) throw DimensionError("scale_pixels: batch axis 0 mismatch");
  if (m.dim(1) != 1) throw DimensionError("scale_pixels: map axis 1 must be 1");
  if (m.dim(2) != x.dim(2)) throw DimensionError("scale_pixels: height axis 2 mismatch");
  if (m.dim(3) != x.dim(3)) throw DimensionError("scale_pixels: width axis 3 mismatch");
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t k = 0; k < hw; ++k) out[(i * c + ch) * hw + k] *= m.data()[i * hw + k];
  return detail::record<T>(x.shape(), std::move(out), {&x, &m}, [n, c, hw](TensorNode<T>& self) {
    const auto& xn = self.inputs[0];
    const auto& mn = self.inputs[1];
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const std::int64_t off = (i * c + ch) * hw;
        if (detail::wants_grad(xn)) {
          T* dx = xn->grad_buffer().data() + off;
          for (std::int64_t k = 0; k < hw; ++k) dx[k] += self.grad[off + k] * mn->data[i * hw + k];
        }
        if (detail::wants_grad(mn)) {
          T* dm = mn->grad_buffer().data() + i * hw;
          for (std::int64_t k = 0; k < hw; ++k) dm[k] += self.grad[off + k] * xn->data[off + k];
        }
      }
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const int rank = parts[0].rank();
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw DimensionError("concat: axis out of range");
  Shape shape = parts[0].shape();
  std::int64_t total = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& s = parts[p].shape();
    if (static_cast<int>(s.size()) != rank) throw DimensionError("concat: rank mismatch in input " + std::to_string(p));
    for (int a = 0; a < rank; ++a)
      if (a != axis && s[a] != shape[a])
        throw DimensionError("concat: axis " + std::to_string(a) + " mismatch in input " + std::to_string(p) +
                             " (" + std::to_string(s[a]) + " vs " + std::to_string(shape[a]) + ")");
    total += s[axis];
  }
  shape[axis] = total;
  std::int64_t outer = 1, inner = 1;
  for (int a = 0; a < axis; ++a) outer *= shape[a];
  for (int a = axis + 1; a < rank; ++a) inner *= shape[a];
  std::vector<std::int64_t> widths;
  for (const auto& p : parts) widths.push_back(p.dim(axis) * inner);
  const std::int64_t row = total * inner;
  std::vector<T> out(static_cast<std::size_t>(outer * row));
  std::int64_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const T* src = parts[p].data().data();
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy(src + o * widths[p], src + (o + 1) * widths[p], out.data() + o * row + offset);
    offset += widths[p];
  }
  return detail::record<T>(std::move(shape), std::move(out), parts, [widths, outer, row](TensorNode<T>& self) {
    std::int64_t offset = 0;
    for (std::size_t p = 0; p < self.inputs.size(); ++p) {
      const auto& in = self.inputs[p];
      if (detail::wants_grad(in)) {
        T* g = in->grad_buffer().data();
        for (std::int64_t o = 0; o < outer; ++o) {
          const T* src = self.grad.data() + o * row + offset;
          for (std::int64_t k = 0; k < widths[p]; ++k) g[o * widths[p] + k] += src[k];
        }
      }
      offset += widths[p];
    }
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel())
    throw DimensionError("reshape: " + to_string(x.shape()) + " cannot become " + to_string(shape));
  std::vector<T> out(x.data().begin(), x.data().end());
  return detail::record<T>(std::move(shape), std::move(out), {&x}, [](TensorNode<T>& self) {
    if (!detail::wants_grad(self.inputs[0])) return;
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

namespace {

struct Tap {
  std::int64_t i0, i1;
  double w0, w1;
};

std::vector<Tap> bilinear_taps(std::int64_t in, int factor) {
  std::vector<Tap> taps(static_cast<std::size_t>(in * factor));
  for (std::int64_t o = 0; o < in * factor; ++o) {
    double src = (static_cast<double>(o) + 0.5) / factor - 0.5;
    if (src < 0) src = 0;
    auto i0 = static_cast<std::int64_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const std::int64_t i1 = std::min(i0 + 1, in - 1);
    const double l = src - static_cast<double>(i0);
    taps[o] = {i0, i1, 1.0 - l, l};
  }
  return taps;
}

}  // namespace

template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, int factor) {
  require_rank(x.shape(), 4, "upsample_bilinear", "input");
  if (factor < 1) throw ContractError("upsample_bilinear: factor must be positive");
  if (factor == 1) return reshape(x, x.shape());
  const std::int64_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t oh = h * factor, ow = w * factor;
  auto ty = bilinear_taps(h, factor);
  auto tx = bilinear_taps(w, factor);
  std::vector<T> out(static_cast<std::size_t>(planes * oh * ow));
  for (std::int64_t p = 0; p < planes; ++p) {
    const T* src = x.data().data() + p * h * w;
    T* dst = out.data() + p * oh * ow;
    for (std::int64_t y = 0; y < oh; ++y) {
      const auto& a = ty[y];
      for (std::int64_t xx = 0; xx < ow; ++xx) {
        const auto& b = tx[xx];
        dst[y * ow + xx] = T(a.w0 * b.w0) * src[a.i0 * w + b.i0] + T(a.w0 * b.w1) * src[a.i0 * w + b.i1] +
                           T(a.w1 * b.w0) * src[a.i1 * w + b.i0] + T(a.w1 * b.w1) * src[a.i1 * w + b.i1];
      }
    }
  }
  Shape shape{x.dim(0), x.dim(1), oh, ow};
  return detail::record<T>(std::move(shape), std::move(out), {&x},
                           [ty = std::move(ty), tx = std::move(tx), planes, h, w, oh, ow](TensorNode<T>& self) {
                             if (!detail::wants_grad(self.inputs[0])) return;
                             T* g = self.inputs[0]->grad_buffer().data();
                             for (std::int64_t p = 0; p < planes; ++p) {
                               const T* dy = self.grad.data() + p * oh * ow;
                               T* dx = g + p * h * w;
                               for (std::int64_t y = 0; y < oh; ++y) {
                                 const auto& a = ty[y];
                                 for (std::int64_t xx = 0; xx < ow; ++xx) {
                                   const auto& b = tx[xx];
                                   const T d = dy[y * ow + xx];
                                   dx[a.i0 * w + b.i0] += T(a.w0 * b.w0) * d;
                                   dx[a.i0 * w + b.i1] += T(a.w0 * b.w1) * d;
                                   dx[a.i1 * w + b.i0] += T(a.w1 * b.w0) * d;
                                   dx[a.i1 * w + b.i1] += T(a.w1 * b.w1) * d;
                                 }
                               }
                             }
                           });
}

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, int factor) {
  require_rank(x.shape(), 4, "upsample_nearest", "input");
  if (factor < 1) throw ContractError("upsample_nearest: factor must be positive");
  const std::int64_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t oh = h * factor, ow = w * factor;
  std::vector<T> out(static_cast<std::size_t>(planes * oh * ow));
  for (std::int64_t p = 0; p < planes; ++p)
    for (std::int64_t y = 0; y < oh; ++y)
      for (std::int64_t xx = 0; xx < ow; ++xx)
        out[(p * oh + y) * ow + xx] = x.data()[(p * h + y / factor) * w + xx / factor];
  Shape shape{x.dim(0), x.dim(1), oh, ow};
  return detail::record<T>(std::move(shape), std::move(out), {&x}, [planes, h, w, oh, ow, factor](TensorNode<T>& self) {
    if (!detail::wants_grad(self.inputs[0])) return;
    T* g = self.inputs[0]->grad_buffer().data();
    for (std::int64_t p = 0; p < planes; ++p)
      for (std::int64_t y = 0; y < oh; ++y)
        for (std::int64_t xx = 0; xx < ow; ++xx)
          g[(p * h + y / factor) * w + xx / factor] += self.grad[(p * oh + y) * ow + xx];
  });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require_rank(x.shape(), 4, "global_avg_pool", "input");
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> out(static_cast<std::size_t>(n * c));
  for (std::int64_t i = 0; i < n * c; ++i) {
    T s = 0;
    for (std::int64_t k = 0; k < hw; ++k) s += x.data()[i * hw + k];
    out[i] = s / T(hw);
  }
  return detail::record<T>(Shape{n, c}, std::move(out), {&x}, [n, c, hw](TensorNode<T>& self) {
    if (!detail::wants_grad(self.inputs[0])) return;
    T* g = self.inputs[0]->grad_buffer().data();
    for (std::int64_t i = 0; i < n * c; ++i) {
      const T d = self.grad[i] / T(hw);
      for (std::int64_t k = 0; k < hw; ++k) g[i * hw + k] += d;
    }
  });
}

template <typename T>
Tensor<T> matvec(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank(x.shape(), 2, "matvec", "input");
  require_rank(weight.shape(), 2, "matvec", "weight");
  const std::int64_t n = x.dim(0), c = x.dim(1), k = weight.dim(0);
  if (weight.dim(1) != c) throw DimensionError("matvec: weight axis 1 must equal input axis 1 (" + std::to_string(c) + ")");
  check_bias(bias, k, "matvec");
  std::vector<T> out(static_cast<std::size_t>(n * k));
  MapR<T> y(out.data(), n, k);
  y.noalias() = CMapR<T>(x.data().data(), n, c) * CMapR<T>(weight.data().data(), k, c).transpose();
  if (bias.defined())
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < k; ++j) y(i, j) += bias.data()[j];
  return detail::record<T>(Shape{n, k}, std::move(out), {&x, &weight, &bias}, [n, c, k](TensorNode<T>& self) {
    const auto& xn = self.inputs[0];
    const auto& wn = self.inputs[1];
    const auto& bn = self.inputs[2];
    CMapR<T> dy(self.grad.data(), n, k);
    if (detail::wants_grad(xn))
      MapR<T>(xn->grad_buffer().data(), n, c).noalias() += dy * CMapR<T>(wn->data.data(), k, c);
    if (detail::wants_grad(wn))
      MapR<T>(wn->grad_buffer().data(), k, c).noalias() += dy.transpose() * CMapR<T>(xn->data.data(), n, c);
    if (detail::wants_grad(bn)) {
      auto& db = bn->grad_buffer();
      for (std::int64_t j = 0; j < k; ++j) db[j] += dy.col(j).sum();
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  return detail::record<T>(Shape{1}, std::vector<T>{s}, {&x}, [](TensorNode<T>& self) {
    if (!detail::wants_grad(self.inputs[0])) return;
    auto& g = self.inputs[0]->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  const T count = T(x.numel());
  return detail::record<T>(Shape{1}, std::vector<T>{s / count}, {&x}, [count](TensorNode<T>& self) {
    if (!detail::wants_grad(self.inputs[0])) return;
    auto& g = self.inputs[0]->grad_buffer();
    for (auto& v : g) v += self.grad[0] / count;
  });
}

template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& x, std::span<const T> r) {
  if (static_cast<std::int64_t>(r.size()) != x.numel())
    throw DimensionError("weighted_sum: weight length does not match input " + to_string(x.shape()));
  T s = 0;
  for (std::size_t i = 0; i < r.size(); ++i) s += x.data()[i] * r[i];
  std::vector<T> weights(r.begin(), r.end());
  return detail::record<T>(Shape{1}, std::vector<T>{s}, {&x}, [weights = std::move(weights)](TensorNode<T>& self) {
    if (!detail::wants_grad(self.inputs[0])) return;
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * weights[i];
  });
}

#define ARCD_INSTANTIATE_OPS(T)                                                                            \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);              \
  template Tensor<T> conv3d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::array<int, 3>);    \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, RunningStats<T>&,   \
                                NormMode, T, T);                                                          \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                                     \
  template Tensor<T> mul_scalar(const Tensor<T>&, T);                                                     \
  template Tensor<T> one_minus(const Tensor<T>&);                                                         \
  template Tensor<T> relu(const Tensor<T>&);                                                              \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                           \
  template Tensor<T> scale_channels(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> scale_pixels(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                                          \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                    \
  template Tensor<T> upsample_bilinear(const Tensor<T>&, int);                                            \
  template Tensor<T> upsample_nearest(const Tensor<T>&, int);                                             \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                                   \
  template Tensor<T> matvec(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> sum(const Tensor<T>&);                                                               \
  template Tensor<T> mean(const Tensor<T>&);                                                              \
  template Tensor<T> weighted_sum(const Tensor<T>&, std::span<const T>);

ARCD_INSTANTIATE_OPS(float)
ARCD_INSTANTIATE_OPS(double)

}  // namespace arcd

#pragma once

#include <array>
#include <string>
#include <vector>

#include "arcd/ops.hpp"
#include "arcd/random.hpp"
#include "arcd/tensor.hpp"

namespace arcd {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  bool decay;  // false for biases and norm affine terms
};

template <typename T>
struct NormBuffer {
  std::string name;
  RunningStats<T>* stats;
};

/// Flat, ordered view of a model's trainable tensors and BN buffers.
/// Order is construction order and doubles as the checkpoint order.
template <typename T>
struct ParameterSet {
  std::vector<Parameter<T>> params;
  std::vector<NormBuffer<T>> norms;

  void add(const std::string& name, const Tensor<T>& value, bool decay) { params.push_back({name, value, decay}); }
  void add_norm(const std::string& name, RunningStats<T>& stats) { norms.push_back({name, &stats}); }
  std::int64_t count() const {
    std::int64_t n = 0;
    for (const auto& p : params) n += p.value.numel();
    return n;
  }
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), trainable.
template <typename T>
Tensor<T> fan_in_uniform(Shape shape, std::int64_t fan_in, Rng& rng);

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int in, int out, int kernel, int stride, int padding, Rng& rng, bool with_bias = true);
  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, stride_, padding_); }
  void collect(ParameterSet<T>& set, const std::string& prefix) const;

  Tensor<T> weight;
  Tensor<T> bias;

 private:
  int stride_ = 1;
  int padding_ = 0;
};

template <typename T>
class Conv3d {
 public:
  Conv3d() = default;
  Conv3d(int in, int out, std::array<int, 3> kernel, std::array<int, 3> padding, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& x) const { return conv3d(x, weight, bias, padding_); }
  void collect(ParameterSet<T>& set, const std::string& prefix) const;

  Tensor<T> weight;
  Tensor<T> bias;

 private:
  std::array<int, 3> padding_{};
};

template <typename T>
class BatchNorm {
 public:
  BatchNorm() = default;
  explicit BatchNorm(int channels);
  Tensor<T> operator()(const Tensor<T>& x, bool training);
  void collect(ParameterSet<T>& set, const std::string& prefix);

  Tensor<T> gamma;
  Tensor<T> beta;
  RunningStats<T> stats;
};

/// 3x3 (or kxk) conv without bias, then BN and ReLU.
template <typename T>
class ConvBnRelu {
 public:
  ConvBnRelu() = default;
  ConvBnRelu(int in, int out, int kernel, int stride, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& x, bool training) { return relu(bn(conv(x), training)); }
  void collect(ParameterSet<T>& set, const std::string& prefix);

  Conv2d<T> conv;
  BatchNorm<T> bn;
};

/// Squeeze-and-excitation: global pool, C -> C/r -> C bottleneck, sigmoid
/// gate per channel.
template <typename T>
class ChannelAttention {
 public:
  ChannelAttention() = default;
  ChannelAttention(int channels, int reduction, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& x) const;
  void collect(ParameterSet<T>& set, const std::string& prefix) const;

  Tensor<T> squeeze_w, squeeze_b, excite_w, excite_b;
};

}  // namespace arcd

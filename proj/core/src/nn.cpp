#include "arcd/nn.hpp"

#include <cmath>

#include "arcd/error.hpp"

namespace arcd {

template <typename T>
Tensor<T> fan_in_uniform(Shape shape, std::int64_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<T> values(static_cast<std::size_t>(numel(shape)));
  for (auto& v : values) v = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>(std::move(shape), std::move(values), true);
}

template <typename T>
Conv2d<T>::Conv2d(int in, int out, int kernel, int stride, int padding, Rng& rng, bool with_bias)
    : stride_(stride), padding_(padding) {
  const std::int64_t fan_in = static_cast<std::int64_t>(in) * kernel * kernel;
  weight = fan_in_uniform<T>({out, in, kernel, kernel}, fan_in, rng);
  if (with_bias) bias = fan_in_uniform<T>({out}, fan_in, rng);
}

template <typename T>
void Conv2d<T>::collect(ParameterSet<T>& set, const std::string& prefix) const {
  set.add(prefix + ".weight", weight, true);
  if (bias.defined()) set.add(prefix + ".bias", bias, false);
}

template <typename T>
Conv3d<T>::Conv3d(int in, int out, std::array<int, 3> kernel, std::array<int, 3> padding, Rng& rng)
    : padding_(padding) {
  const std::int64_t fan_in = static_cast<std::int64_t>(in) * kernel[0] * kernel[1] * kernel[2];
  weight = fan_in_uniform<T>({out, in, kernel[0], kernel[1], kernel[2]}, fan_in, rng);
  bias = fan_in_uniform<T>({out}, fan_in, rng);
}

template <typename T>
void Conv3d<T>::collect(ParameterSet<T>& set, const std::string& prefix) const {
  set.add(prefix + ".weight", weight, true);
  set.add(prefix + ".bias", bias, false);
}

template <typename T>
BatchNorm<T>::BatchNorm(int channels)
    : gamma(Shape{channels}, T{1}, true), beta(Shape{channels}, T{0}, true), stats(static_cast<std::size_t>(channels)) {}

template <typename T>
Tensor<T> BatchNorm<T>::operator()(const Tensor<T>& x, bool training) {
  return batch_norm(x, gamma, beta, stats, training ? NormMode::train : NormMode::eval);
}

template <typename T>
void BatchNorm<T>::collect(ParameterSet<T>& set, const std::string& prefix) {
  set.add(prefix + ".gamma", gamma, false);
  set.add(prefix + ".beta", beta, false);
  set.add_norm(prefix, stats);
}

template <typename T>
ConvBnRelu<T>::ConvBnRelu(int in, int out, int kernel, int stride, Rng& rng)
    : conv(in, out, kernel, stride, kernel / 2, rng, false), bn(out) {}

template <typename T>
void ConvBnRelu<T>::collect(ParameterSet<T>& set, const std::string& prefix) {
  conv.collect(set, prefix + ".conv");
  bn.collect(set, prefix + ".bn");
}

template <typename T>
ChannelAttention<T>::ChannelAttention(int channels, int reduction, Rng& rng) {
  const int hidden = std::max(1, channels / reduction);
  squeeze_w = fan_in_uniform<T>({hidden, channels}, channels, rng);
  squeeze_b = fan_in_uniform<T>({hidden}, channels, rng);
  excite_w = fan_in_uniform<T>({channels, hidden}, hidden, rng);
  excite_b = fan_in_uniform<T>({channels}, hidden, rng);
}

template <typename T>
Tensor<T> ChannelAttention<T>::operator()(const Tensor<T>& x) const {
  auto pooled = global_avg_pool(x);
  auto hidden = relu(matvec(pooled, squeeze_w, squeeze_b));
  auto gate = sigmoid(matvec(hidden, excite_w, excite_b));
  return scale_channels(x, gate);
}

template <typename T>
void ChannelAttention<T>::collect(ParameterSet<T>& set, const std::string& prefix) const {
  set.add(prefix + ".squeeze.weight", squeeze_w, true);
  set.add(prefix + ".squeeze.bias", squeeze_b, false);
  set.add(prefix + ".excite.weight", excite_w, true);
  set.add(prefix + ".excite.bias", excite_b, false);
}

#define ARCD_INSTANTIATE_NN(T)                                              \
  template Tensor<T> fan_in_uniform<T>(Shape, std::int64_t, Rng&);         \
  template class Conv2d<T>;                                                 \
  template class Conv3d<T>;                                                 \
  template class BatchNorm<T>;                                              \
  template class ConvBnRelu<T>;                                             \
  template class ChannelAttention<T>;

ARCD_INSTANTIATE_NN(float)
ARCD_INSTANTIATE_NN(double)

}  // namespace arcd

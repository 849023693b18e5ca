#include "arcd/arch.hpp"

#include <algorithm>

#include "arcd/error.hpp"

namespace arcd {

namespace {

constexpr std::array<std::string_view, 9> kVariantNames = {
    "full",   "fam-wo-gate", "wo-oue",      "oue-wo-ual",     "oue-boundary-sup",
    "wo-krm", "krm-wo-coa",  "krm-wo-rea", "krm-wo-coa-rea"};

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a.size() != b.size()) throw DimensionError(std::string(op) + ": rank mismatch " + to_string(a) + " vs " + to_string(b));
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i])
      throw DimensionError(std::string(op) + ": axis " + std::to_string(i) + " mismatch " + to_string(a) + " vs " +
                           to_string(b));
}

template <typename T>
void check_channels(const Tensor<T>& x, int channels, const char* op, const char* what) {
  if (x.rank() != 4) throw DimensionError(std::string(op) + ": " + what + " must be [N,C,H,W], got " + to_string(x.shape()));
  if (x.dim(1) != channels)
    throw DimensionError(std::string(op) + ": " + what + " channel axis 1 is " + std::to_string(x.dim(1)) +
                         ", expected " + std::to_string(channels));
}

}  // namespace

AblationConfig AblationConfig::from_variant(std::string_view name) {
  AblationConfig c;
  if (name == "full") return c;
  if (name == "fam-wo-gate") {
    c.use_fam_gate = false;
  } else if (name == "wo-oue") {
    c.use_oue = false;
    c.use_uncertainty_aware_fusion = false;
  } else if (name == "oue-wo-ual") {
    c.use_uncertainty_aware_fusion = false;
  } else if (name == "oue-boundary-sup") {
    c.uncertainty_supervision = UncertaintySupervision::boundary;
  } else if (name == "wo-krm") {
    c.use_krm = false;
    c.use_conflict_attention = false;
    c.use_reverse_attention = false;
  } else if (name == "krm-wo-coa") {
    c.use_conflict_attention = false;
  } else if (name == "krm-wo-rea") {
    c.use_reverse_attention = false;
  } else if (name == "krm-wo-coa-rea") {
    c.use_conflict_attention = false;
    c.use_reverse_attention = false;
  } else {
    std::string list;
    for (auto v : kVariantNames) list += (list.empty() ? "" : ", ") + std::string(v);
    throw ContractError("unknown variant '" + std::string(name) + "'; valid: " + list);
  }
  return c;
}

std::span<const std::string_view> AblationConfig::variant_names() { return kVariantNames; }

std::optional<std::string_view> AblationConfig::variant() const {
  for (auto v : kVariantNames)
    if (from_variant(v) == *this) return v;
  return std::nullopt;
}

void AblationConfig::validate() const {
  if (use_uncertainty_aware_fusion && !use_oue)
    throw ContractError("uncertainty-aware fusion requires the uncertainty branch");
  if (!use_krm && (use_conflict_attention || use_reverse_attention))
    throw ContractError("attention switches require the knowledge review modules");
}

template <typename T>
Tensor<T> conflict_attention(const Tensor<T>& p_low, const Tensor<T>& p_high_up) {
  return add(mul(p_low, one_minus(p_high_up)), mul(p_high_up, one_minus(p_low)));
}

template <typename T>
Tensor<T> reverse_attention(const Tensor<T>& p_high_up) {
  return one_minus(p_high_up);
}

std::int64_t spatial_ratio(const Shape& fine, const Shape& coarse, const char* op) {
  if (fine.size() != 4 || coarse.size() != 4)
    throw DimensionError(std::string(op) + ": expected [N,C,H,W] maps, got " + to_string(fine) + " and " + to_string(coarse));
  if (fine[0] != coarse[0]) throw DimensionError(std::string(op) + ": batch axis 0 mismatch");
  const std::int64_t r = fine[2] / coarse[2];
  if (r < 1 || coarse[2] * r != fine[2])
    throw DimensionError(std::string(op) + ": height axis 2 (" + std::to_string(fine[2]) + ") is not a multiple of " +
                         std::to_string(coarse[2]));
  if (coarse[3] * r != fine[3])
    throw DimensionError(std::string(op) + ": width axis 3 (" + std::to_string(fine[3]) + ") does not match ratio " +
                         std::to_string(r) + " of " + std::to_string(coarse[3]));
  return r;
}

// --- FeatureAggregation ----------------------------------------------------

template <typename T>
FeatureAggregation<T>::FeatureAggregation(int high_channels, int low_channels, int out_channels, bool gated, Rng& rng)
    : high_channels_(high_channels), low_channels_(low_channels), gated_(gated) {
  if (gated) gate = Conv2d<T>(high_channels, low_channels, 1, 1, 0, rng);
  fuse = ConvBnRelu<T>(high_channels + low_channels, out_channels, 3, 1, rng);
}

template <typename T>
Tensor<T> FeatureAggregation<T>::operator()(const Tensor<T>& high, const Tensor<T>& low, bool training) {
  check_channels(high, high_channels_, "fam", "high");
  check_channels(low, low_channels_, "fam", "low");
  const auto ratio = spatial_ratio(low.shape(), high.shape(), "fam");
  auto up = upsample_bilinear(high, static_cast<int>(ratio));
  Tensor<T> calibrated = low;
  if (gated_) calibrated = mul(low, sigmoid(gate(up)));
  return fuse(concat<T>({up, calibrated}, 1), training);
}

template <typename T>
void FeatureAggregation<T>::collect(ParameterSet<T>& set, const std::string& prefix) {
  if (gated_) gate.collect(set, prefix + ".gate");
  fuse.collect(set, prefix + ".fuse");
}

// --- TemporalDifference ----------------------------------------------------

template <typename T>
TemporalDifference<T>::TemporalDifference(int channels, Rng& rng)
    : temporal(channels, channels, {2, 3, 3}, {0, 1, 1}, rng), bn(channels), project(channels, channels, 1, 1, 0, rng) {}

template <typename T>
Tensor<T> TemporalDifference<T>::response(const Tensor<T>& first, const Tensor<T>& second, bool training) {
  const auto& s = first.shape();
  Shape stacked{s[0], s[1], 1, s[2], s[3]};
  auto pair = concat<T>({reshape(first, stacked), reshape(second, stacked)}, 2);
  auto r = relu(bn(temporal(pair), training));
  return reshape(r, s);
}

template <typename T>
Tensor<T> TemporalDifference<T>::operator()(const Tensor<T>& a, const Tensor<T>& b, bool training) {
  require_same_shape(a.shape(), b.shape(), "tde");
  if (a.rank() != 4) throw DimensionError("tde: inputs must be [N,C,H,W], got " + to_string(a.shape()));
  check_channels(a, static_cast<int>(temporal.weight.dim(1)), "tde", "input");
  auto forward_order = response(a, b, training);
  auto backward_order = response(b, a, training);
  return project(add(forward_order, backward_order));
}

template <typename T>
void TemporalDifference<T>::collect(ParameterSet<T>& set, const std::string& prefix) {
  temporal.collect(set, prefix + ".temporal");
  bn.collect(set, prefix + ".bn");
  project.collect(set, prefix + ".project");
}

// --- Encoder / Decoder -----------------------------------------------------

template <typename T>
Encoder<T>::Encoder(const std::array<int, 4>& channels, Rng& rng) {
  layers_.emplace_back(3, channels[0], 3, 2, rng);
  layers_.emplace_back(channels[0], channels[0], 3, 2, rng);
  for (int s = 1; s < 4; ++s) {
    layers_.emplace_back(channels[s - 1], channels[s], 3, 2, rng);
    layers_.emplace_back(channels[s], channels[s], 3, 1, rng);
  }
}

template <typename T>
std::array<Tensor<T>, 4> Encoder<T>::operator()(const Tensor<T>& image, bool training) {
  if (image.rank() != 4 || image.dim(1) != 3)
    throw DimensionError("encode: image must be [N,3,H,W], got " + to_string(image.shape()));
  if (image.dim(2) % 32 != 0) throw DimensionError("encode: height axis 2 (" + std::to_string(image.dim(2)) + ") not divisible by 32");
  if (image.dim(3) % 32 != 0) throw DimensionError("encode: width axis 3 (" + std::to_string(image.dim(3)) + ") not divisible by 32");
  std::array<Tensor<T>, 4> out;
  auto x = layers_[1](layers_[0](image, training), training);
  out[0] = x;
  for (int s = 1; s < 4; ++s) {
    x = layers_[2 * s + 1](layers_[2 * s](x, training), training);
    out[s] = x;
  }
  return out;
}

template <typename T>
void Encoder<T>::collect(ParameterSet<T>& set, const std::string& prefix) {
  layers_[0].collect(set, prefix + ".stem0");
  layers_[1].collect(set, prefix + ".stem1");
  for (int s = 1; s < 4; ++s) {
    const std::string stage = prefix + ".stage" + std::to_string(s + 2);
    layers_[2 * s].collect(set, stage + ".down");
    layers_[2 * s + 1].collect(set, stage + ".conv");
  }
}

template <typename T>
Decoder<T>::Decoder(const std::array<int, 4>& channels, bool gated, Rng& rng)
    : project_(channels[3], channels[3], 1, 1, 0, rng) {
  for (int level = 2; level >= 0; --level)
    fuse_[2 - level] = FeatureAggregation<T>(channels[level + 1], channels[level], channels[level], gated, rng);
}

template <typename T>
std::array<Tensor<T>, 4> Decoder<T>::operator()(const std::array<Tensor<T>, 4>& features, bool training) {
  std::array<Tensor<T>, 4> out;
  out[3] = project_(features[3]);
  for (int level = 2; level >= 0; --level) out[level] = fuse_[2 - level](out[level + 1], features[level], training);
  return out;
}

template <typename T>
void Decoder<T>::collect(ParameterSet<T>& set, const std::string& prefix) {
  project_.collect(set, prefix + ".project5");
  for (int level = 2; level >= 0; --level) fuse_[2 - level].collect(set, prefix + ".fam" + std::to_string(level + 2));
}

// --- UncertaintyBranch -----------------------------------------------------

template <typename T>
UncertaintyBranch<T>::UncertaintyBranch(int difference_channels, int texture_channels, bool gated, Rng& rng) {
  texture_[0] = ConvBnRelu<T>(3, texture_channels, 3, 2, rng);
  texture_[1] = ConvBnRelu<T>(texture_channels, texture_channels, 3, 2, rng);
  texture_[2] = ConvBnRelu<T>(texture_channels, texture_channels, 3, 1, rng);
  tde_ = TemporalDifference<T>(texture_channels, rng);
  fam_ = FeatureAggregation<T>(difference_channels, texture_channels, texture_channels, gated, rng);
  head_ = Conv2d<T>(texture_channels, 1, 1, 1, 0, rng);
}

template <typename T>
UncertaintyOutput<T> UncertaintyBranch<T>::operator()(const Tensor<T>& image_t1, const Tensor<T>& image_t2,
                                                      const Tensor<T>& difference_2, bool training) {
  require_same_shape(image_t1.shape(), image_t2.shape(), "oue");
  auto texture = [&](const Tensor<T>& image) {
    auto x = image;
    for (auto& block : texture_) x = block(x, training);
    return x;
  };
  auto t1 = texture(image_t1);
  auto t2 = texture(image_t2);
  if (difference_2.rank() != 4 || difference_2.dim(2) != t1.dim(2) || difference_2.dim(3) != t1.dim(3))
    throw DimensionError("oue: D_2 " + to_string(difference_2.shape()) + " does not match texture features " +
                         to_string(t1.shape()) + " on axes 2/3");
  UncertaintyOutput<T> out;
  out.features = fam_(difference_2, tde_(t1, t2, training), training);
  const auto ratio = image_t1.dim(2) / out.features.dim(2);
  out.probability = upsample_bilinear(sigmoid(head_(out.features)), static_cast<int>(ratio));
  return out;
}

template <typename T>
void UncertaintyBranch<T>::collect(ParameterSet<T>& set, const std::string& prefix) {
  for (int i = 0; i < 3; ++i) texture_[i].collect(set, prefix + ".texture" + std::to_string(i));
  tde_.collect(set, prefix + ".tde");
  fam_.collect(set, prefix + ".fam");
  head_.collect(set, prefix + ".head");
}

// --- KnowledgeReview -------------------------------------------------------

template <typename T>
KnowledgeReview<T>::KnowledgeReview(int low_channels, int high_channels, int out_channels, int se_reduction,
                                    bool conflict, bool reverse, Rng& rng)
    : conflict_(conflict), reverse_(reverse) {
  for (auto& t : transit_) t = Conv2d<T>(low_channels + high_channels, out_channels, 1, 1, 0, rng);
  for (auto& a : attention_) a = ChannelAttention<T>(out_channels, se_reduction, rng);
  for (auto& r : refine_) r = ConvBnRelu<T>(out_channels, out_channels, 3, 1, rng);
  fuse_ = ConvBnRelu<T>(out_channels + 1, out_channels, 3, 1, rng);
  head_ = Conv2d<T>(out_channels, 1, 1, 1, 0, rng);
}

template <typename T>
ReviewOutput<T> KnowledgeReview<T>::operator()(const Tensor<T>& d_low, const Tensor<T>& d_high, const Tensor<T>& p_low,
                                               const Tensor<T>& p_high, bool training) {
  const auto ratio = static_cast<int>(spatial_ratio(d_low.shape(), d_high.shape(), "krm"));
  if (p_low.rank() != 4 || p_low.dim(1) != 1 || p_low.dim(2) != d_low.dim(2) || p_low.dim(3) != d_low.dim(3))
    throw DimensionError("krm: p_low " + to_string(p_low.shape()) + " must be [N,1,h,w] at D_low's resolution");
  if (p_high.rank() != 4 || p_high.dim(1) != 1 || p_high.dim(2) != d_high.dim(2) || p_high.dim(3) != d_high.dim(3))
    throw DimensionError("krm: p_high " + to_string(p_high.shape()) + " must be [N,1,h,w] at D_high's resolution");
  check_channels(d_low, static_cast<int>(transit_[0].weight.dim(1) - d_high.dim(1)), "krm", "D_low");

  auto high_up = upsample_bilinear(d_high, ratio);
  auto x = concat<T>({d_low, high_up}, 1);
  std::array<Tensor<T>, 3> branch;
  for (int j = 0; j < 3; ++j) branch[j] = transit_[j](x);

  if (conflict_ || reverse_) {
    auto p_high_up = upsample_bilinear(p_high, ratio);
    if (conflict_) branch[0] = add(branch[0], scale_pixels(branch[0], conflict_attention(p_low, p_high_up)));
    if (reverse_) branch[1] = add(branch[1], scale_pixels(branch[1], reverse_attention(p_high_up)));
  }
  Tensor<T> merged;
  for (int j = 0; j < 3; ++j) {
    auto refined = refine_[j](attention_[j](branch[j]), training);
    merged = j == 0 ? refined : add(merged, refined);
  }
  ReviewOutput<T> out;
  out.features = fuse_(concat<T>({p_low, merged}, 1), training);
  out.probability = sigmoid(head_(out.features));
  return out;
}

template <typename T>
void KnowledgeReview<T>::collect(ParameterSet<T>& set, const std::string& prefix) {
  for (int j = 0; j < 3; ++j) {
    const std::string b = prefix + ".branch" + std::to_string(j + 1);
    transit_[j].collect(set, b + ".transit");
    attention_[j].collect(set, b + ".ca");
    refine_[j].collect(set, b + ".refine");
  }
  fuse_.collect(set, prefix + ".fuse");
  head_.collect(set, prefix + ".head");
}

// --- LevelFusion -----------------------------------------------------------

template <typename T>
LevelFusion<T>::LevelFusion(int low_channels, int high_channels, int out_channels, Rng& rng)
    : fuse_(low_channels + high_channels, out_channels, 1, 1, rng) {}

template <typename T>
Tensor<T> LevelFusion<T>::operator()(const Tensor<T>& d_low, const Tensor<T>& d_high, bool training) {
  const auto ratio = static_cast<int>(spatial_ratio(d_low.shape(), d_high.shape(), "level_fusion"));
  return fuse_(concat<T>({d_low, upsample_bilinear(d_high, ratio)}, 1), training);
}

template <typename T>
void LevelFusion<T>::collect(ParameterSet<T>& set, const std::string& prefix) {
  fuse_.collect(set, prefix + ".fuse");
}

// --- ARCDNet ---------------------------------------------------------------

template <typename T>
ARCDNet<T>::ARCDNet(const ArchConfig& arch, const AblationConfig& ablation, std::uint64_t seed)
    : arch_(arch), ablation_(ablation) {
  ablation_.validate();
  Rng rng(seed);
  const auto& c = arch_.channels;
  const bool gated = ablation_.use_fam_gate;
  encoder_ = Encoder<T>(c, rng);
  decoder_ = Decoder<T>(c, gated, rng);
  for (int i = 0; i < 4; ++i) tde_[i] = TemporalDifference<T>(c[i], rng);
  for (int i = 0; i < 4; ++i) level_heads_[i] = Conv2d<T>(c[i], 1, 1, 1, 0, rng);
  const int r = arch_.review_channels;
  for (int k = 0; k < 3; ++k) {
    const int low = k == 0 ? c[0] : r;
    if (ablation_.use_krm)
      review_.emplace_back(low, c[k + 1], r, arch_.se_reduction, ablation_.use_conflict_attention,
                           ablation_.use_reverse_attention, rng);
    else
      fusion_.emplace_back(low, c[k + 1], r, rng);
  }
  if (ablation_.use_oue) uncertainty_.emplace(c[0], arch_.texture_channels, gated, rng);
  if (ablation_.use_uncertainty_aware_fusion) final_fusion_.emplace(r, arch_.texture_channels, r, gated, rng);
  change_head_ = Conv2d<T>(r, 1, 1, 1, 0, rng);
}

template <typename T>
PredictionBundle<T> ARCDNet<T>::forward(const Tensor<T>& image_t1, const Tensor<T>& image_t2, bool training) {
  require_same_shape(image_t1.shape(), image_t2.shape(), "forward");
  const std::int64_t height = image_t1.rank() == 4 ? image_t1.dim(2) : 0;

  auto f1 = encoder_(image_t1, training);
  auto f2 = encoder_(image_t2, training);
  auto p1 = decoder_(f1, training);
  auto p2 = decoder_(f2, training);

  PredictionBundle<T> out;
  std::array<Tensor<T>, 4> level_probs;
  for (int i = 0; i < 4; ++i) {
    out.differences[i] = tde_[i](p1[i], p2[i], training);
    level_probs[i] = sigmoid(level_heads_[i](out.differences[i]));
    out.level_probabilities[i] =
        upsample_bilinear(level_probs[i], static_cast<int>(height / level_probs[i].dim(2)));
  }

  if (uncertainty_) {
    auto u = (*uncertainty_)(image_t1, image_t2, out.differences[0], training);
    out.uncertainty_features = u.features;
    out.uncertainty = u.probability;
  }

  Tensor<T> refined = out.differences[0];
  Tensor<T> refined_prob = level_probs[0];
  for (int k = 0; k < 3; ++k) {
    if (ablation_.use_krm) {
      auto r = review_[k](refined, out.differences[k + 1], refined_prob, level_probs[k + 1], training);
      refined = r.features;
      refined_prob = r.probability;
      out.refined_probabilities.push_back(
          upsample_bilinear(r.probability, static_cast<int>(height / r.probability.dim(2))));
    } else {
      refined = fusion_[k](refined, out.differences[k + 1], training);
    }
  }

  Tensor<T> final_features = refined;
  if (final_fusion_) {
    const auto ratio = out.uncertainty_features.dim(2) / refined.dim(2);
    final_features = (*final_fusion_)(upsample_bilinear(refined, static_cast<int>(ratio)), out.uncertainty_features, training);
  }
  auto change_low = sigmoid(change_head_(final_features));
  out.change = upsample_bilinear(change_low, static_cast<int>(height / change_low.dim(2)));
  return out;
}

template <typename T>
ParameterSet<T> ARCDNet<T>::parameters() {
  ParameterSet<T> set;
  encoder_.collect(set, "encoder");
  decoder_.collect(set, "decoder");
  for (int i = 0; i < 4; ++i) tde_[i].collect(set, "tde" + std::to_string(i + 2));
  for (int i = 0; i < 4; ++i) level_heads_[i].collect(set, "head" + std::to_string(i + 2));
  for (std::size_t k = 0; k < review_.size(); ++k) review_[k].collect(set, "krm" + std::to_string(k + 1));
  for (std::size_t k = 0; k < fusion_.size(); ++k) fusion_[k].collect(set, "fusion" + std::to_string(k + 1));
  if (uncertainty_) uncertainty_->collect(set, "oue");
  if (final_fusion_) final_fusion_->collect(set, "final_fam");
  change_head_.collect(set, "change_head");
  return set;
}

template <typename T>
std::int64_t ARCDNet<T>::parameter_count() {
  return parameters().count();
}

#define ARCD_INSTANTIATE_ARCH(T)                                                        \
  template Tensor<T> conflict_attention(const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> reverse_attention(const Tensor<T>&);                               \
  template class FeatureAggregation<T>;                                                 \
  template class TemporalDifference<T>;                                                 \
  template class Encoder<T>;                                                            \
  template class Decoder<T>;                                                            \
  template class UncertaintyBranch<T>;                                                  \
  template class KnowledgeReview<T>;                                                    \
  template class LevelFusion<T>;                                                        \
  template class ARCDNet<T>;

ARCD_INSTANTIATE_ARCH(float)
ARCD_INSTANTIATE_ARCH(double)

}  // namespace arcd

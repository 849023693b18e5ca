#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "arcd/nn.hpp"

namespace arcd {

enum class UncertaintySupervision { prediction_error, boundary };

/// Component switches. The named variants reproduce the rows of the
/// ablation table (full model plus eight reduced networks).
struct AblationConfig {
  bool use_fam_gate = true;
  bool use_oue = true;
  bool use_uncertainty_aware_fusion = true;
  bool use_krm = true;
  bool use_conflict_attention = true;
  bool use_reverse_attention = true;
  UncertaintySupervision uncertainty_supervision = UncertaintySupervision::prediction_error;

  /// Throws ContractError listing the valid names for an unknown variant.
  static AblationConfig from_variant(std::string_view name);
  static std::span<const std::string_view> variant_names();
  /// Name of the matching variant, if any.
  std::optional<std::string_view> variant() const;
  void validate() const;

  bool operator==(const AblationConfig&) const = default;
};

/// Channel widths at desk scale.
struct ArchConfig {
  std::array<int, 4> channels{16, 32, 64, 128};  // levels 2..5
  int texture_channels = 16;                    // uncertainty branch
  int review_channels = 16;                     // knowledge review outputs
  int se_reduction = 4;
};

// --- stateless attention maps ---------------------------------------------

/// p_low (1 - p_high) + p_high (1 - p_low)
template <typename T>
Tensor<T> conflict_attention(const Tensor<T>& p_low, const Tensor<T>& p_high_up);
/// 1 - p_high
template <typename T>
Tensor<T> reverse_attention(const Tensor<T>& p_high_up);

/// Integer ratio between a fine and a coarse map; throws DimensionError if
/// the spatial sizes are not an exact multiple.
std::int64_t spatial_ratio(const Shape& fine, const Shape& coarse, const char* op);

// --- blocks ----------------------------------------------------------------

/// Gated fusion of a coarse and a fine map. The coarse map is resized to
/// the fine resolution; a sigmoid weight computed from it multiplies the
/// fine map before concatenation and a 3x3 conv-BN-ReLU.
template <typename T>
class FeatureAggregation {
 public:
  FeatureAggregation() = default;
  FeatureAggregation(int high_channels, int low_channels, int out_channels, bool gated, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& high, const Tensor<T>& low, bool training);
  void collect(ParameterSet<T>& set, const std::string& prefix);
  bool gated() const { return gated_; }

  Conv2d<T> gate;
  ConvBnRelu<T> fuse;

 private:
  int high_channels_ = 0;
  int low_channels_ = 0;
  bool gated_ = true;
};

/// Order-symmetric temporal difference: a shared 2x3x3 conv3d (+BN, ReLU)
/// is applied to both stackings [a,b] and [b,a]; the responses are summed
/// and projected by a 1x1 conv. tde(a, b) == tde(b, a) bit for bit.
template <typename T>
class TemporalDifference {
 public:
  TemporalDifference() = default;
  TemporalDifference(int channels, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& a, const Tensor<T>& b, bool training);
  /// Response of one temporal order, [N,C,h,w].
  Tensor<T> response(const Tensor<T>& first, const Tensor<T>& second, bool training);
  void collect(ParameterSet<T>& set, const std::string& prefix);

  Conv3d<T> temporal;
  BatchNorm<T> bn;
  Conv2d<T> project;
};

template <typename T>
class Encoder {
 public:
  Encoder() = default;
  Encoder(const std::array<int, 4>& channels, Rng& rng);
  /// F_2..F_5 at strides 4, 8, 16, 32.
  std::array<Tensor<T>, 4> operator()(const Tensor<T>& image, bool training);
  void collect(ParameterSet<T>& set, const std::string& prefix);

 private:
  std::vector<ConvBnRelu<T>> layers_;  // stem (2) + 3 stages x 2
};

template <typename T>
class Decoder {
 public:
  Decoder() = default;
  Decoder(const std::array<int, 4>& channels, bool gated, Rng& rng);
  /// P_5 = 1x1 projection of F_5; P_i = fam(P_{i+1}, F_i).
  std::array<Tensor<T>, 4> operator()(const std::array<Tensor<T>, 4>& features, bool training);
  void collect(ParameterSet<T>& set, const std::string& prefix);

 private:
  Conv2d<T> project_;
  std::array<FeatureAggregation<T>, 3> fuse_;  // levels 4, 3, 2
};

template <typename T>
struct UncertaintyOutput {
  Tensor<T> features;     // U, stride 4
  Tensor<T> probability;  // p^u, full resolution
};

/// Texture features from three down-convolution blocks, their temporal
/// difference, aggregated with D_2 into U; p^u predicted from U.
template <typename T>
class UncertaintyBranch {
 public:
  UncertaintyBranch() = default;
  UncertaintyBranch(int difference_channels, int texture_channels, bool gated, Rng& rng);
  UncertaintyOutput<T> operator()(const Tensor<T>& image_t1, const Tensor<T>& image_t2,
                                  const Tensor<T>& difference_2, bool training);
  void collect(ParameterSet<T>& set, const std::string& prefix);

 private:
  std::array<ConvBnRelu<T>, 3> texture_;
  TemporalDifference<T> tde_;
  FeatureAggregation<T> fam_;
  Conv2d<T> head_;
};

template <typename T>
struct ReviewOutput {
  Tensor<T> features;     // refined difference features at the fine resolution
  Tensor<T> probability;  // sigmoid prediction from them, same resolution
};

/// Knowledge review: three 1x1 transitions of Cat(D_low, D_high), conflict
/// and reverse attention on two branches, channel attention and a 3x3 conv
/// on each, sum, then Cat with p_low and a 3x3 conv.
template <typename T>
class KnowledgeReview {
 public:
  KnowledgeReview() = default;
  KnowledgeReview(int low_channels, int high_channels, int out_channels, int se_reduction, bool conflict,
                  bool reverse, Rng& rng);
  /// `p_low` is at D_low's resolution; `p_high` at D_high's.
  ReviewOutput<T> operator()(const Tensor<T>& d_low, const Tensor<T>& d_high, const Tensor<T>& p_low,
                             const Tensor<T>& p_high, bool training);
  void collect(ParameterSet<T>& set, const std::string& prefix);

 private:
  std::array<Conv2d<T>, 3> transit_;
  std::array<ChannelAttention<T>, 3> attention_;
  std::array<ConvBnRelu<T>, 3> refine_;
  ConvBnRelu<T> fuse_;
  Conv2d<T> head_;
  bool conflict_ = true;
  bool reverse_ = true;
};

/// Plain fusion used when the review modules are ablated:
/// 1x1 conv-BN-ReLU of Cat(D_low, D_high resized).
template <typename T>
class LevelFusion {
 public:
  LevelFusion() = default;
  LevelFusion(int low_channels, int high_channels, int out_channels, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& d_low, const Tensor<T>& d_high, bool training);
  void collect(ParameterSet<T>& set, const std::string& prefix);

 private:
  ConvBnRelu<T> fuse_;
};

template <typename T>
struct PredictionBundle {
  std::array<Tensor<T>, 4> level_probabilities;  // p_2..p_5, upsampled to [N,1,H,W]
  std::vector<Tensor<T>> refined_probabilities;  // knowledge-review predictions, [N,1,H,W]
  Tensor<T> change;                              // p^c [N,1,H,W]
  Tensor<T> uncertainty;                         // p^u [N,1,H,W]; undefined without OUE
  Tensor<T> uncertainty_features;                // U; undefined without OUE
  std::array<Tensor<T>, 4> differences;          // D_2..D_5
};

template <typename T>
class ARCDNet {
 public:
  ARCDNet(const ArchConfig& arch, const AblationConfig& ablation, std::uint64_t seed);
  ARCDNet(const ARCDNet&) = delete;
  ARCDNet& operator=(const ARCDNet&) = delete;
  ARCDNet(ARCDNet&&) = default;
  ARCDNet& operator=(ARCDNet&&) = default;

  /// Images are [N,3,H,W] with H, W divisible by 32.
  PredictionBundle<T> forward(const Tensor<T>& image_t1, const Tensor<T>& image_t2, bool training);

  /// Named parameters in a stable order, plus BN buffers.
  ParameterSet<T> parameters();
  std::int64_t parameter_count();

  const ArchConfig& arch() const { return arch_; }
  const AblationConfig& ablation() const { return ablation_; }

 private:
  ArchConfig arch_;
  AblationConfig ablation_;
  Encoder<T> encoder_;
  Decoder<T> decoder_;
  std::array<TemporalDifference<T>, 4> tde_;
  std::array<Conv2d<T>, 4> level_heads_;
  std::vector<KnowledgeReview<T>> review_;
  std::vector<LevelFusion<T>> fusion_;
  std::optional<UncertaintyBranch<T>> uncertainty_;
  std::optional<FeatureAggregation<T>> final_fusion_;
  Conv2d<T> change_head_;
};

}  // namespace arcd

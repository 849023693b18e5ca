#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "arcd/arch.hpp"
#include "arcd/data.hpp"
#include "arcd/loss.hpp"
#include "arcd/metrics.hpp"

namespace arcd {

struct TrainConfig {
  double lr0 = 5e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double power = 0.9;
  std::int64_t max_iteration = 1000;
  int batch_size = 4;
  std::uint64_t seed = 0;
  std::int64_t checkpoint_every = 0;  // 0: final checkpoint only
  std::string variant = "full";
  AugmentationPolicy augmentation{};

  void validate() const;
  AblationConfig ablation() const { return AblationConfig::from_variant(variant); }
};

struct ParsedConfig {
  TrainConfig config;
  std::vector<std::string> warnings;  // one per key left at its default
};

/// `key=value` lines; '#' starts a comment, blank lines are ignored.
/// Unknown keys and malformed lines throw ParseError carrying the line number.
ParsedConfig parse_config(const std::string& text);
ParsedConfig load_config(const std::filesystem::path& path);
std::string format_config(const TrainConfig& cfg);

/// lr0 (1 - iter/max)^power; 0 once iter >= max.
double poly_lr(std::int64_t iter, const TrainConfig& cfg);

template <typename T>
class AdamW {
 public:
  AdamW(ParameterSet<T> params, double beta1, double beta2, double eps, double weight_decay);
  /// Parameters without a gradient are skipped. Throws NumericError naming
  /// the first parameter with a non-finite gradient before touching anything.
  void step(double lr);
  std::int64_t steps() const { return steps_; }
  const std::vector<std::vector<T>>& first_moment() const { return m_; }
  const std::vector<std::vector<T>>& second_moment() const { return v_; }

 private:
  ParameterSet<T> params_;
  double beta1_, beta2_, eps_, wd_;
  std::int64_t steps_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

struct LogRow {
  std::int64_t iter = 0;
  double l_bce = 0, l_dice = 0, l_u = 0, total = 0, lr = 0;
};

std::string format_log_row(const LogRow& row);

struct TrainOptions {
  std::filesystem::path out_dir;      // empty: no files written
  std::function<void(const LogRow&)> on_iteration;
};

struct TrainResult {
  std::vector<LogRow> log;
};

/// Epoch-shuffled mini-batches with augmentation, total loss, backward,
/// AdamW with the poly schedule. With an output directory, writes
/// `loss.tsv` and `checkpoint.arck`. A non-finite loss aborts; the last
/// checkpoint on disk is left untouched.
template <typename T>
TrainResult train(ARCDNet<T>& model, const std::vector<BiTemporalSample>& data, const TrainConfig& cfg,
                  const TrainOptions& options = {});

inline constexpr double kChangeThreshold = 0.5;

struct Prediction {
  std::string id;
  Mask change;                    // p^c >= 0.5
  std::vector<double> change_probability;
  std::vector<double> uncertainty;  // empty without the uncertainty branch
};

/// Eval-mode inference, one sample at a time.
template <typename T>
std::vector<Prediction> predict(ARCDNet<T>& model, const std::vector<BiTemporalSample>& data);
template <typename T>
Prediction predict_pair(ARCDNet<T>& model, const Image& t1, const Image& t2, const std::string& id = "");

struct Evaluation {
  ConfusionMatrix cm;
  Scores scores;
  UncertaintySeparation separation;  // invalid without the uncertainty branch
};

template <typename T>
Evaluation evaluate(ARCDNet<T>& model, const std::vector<BiTemporalSample>& data);

}  // namespace arcd

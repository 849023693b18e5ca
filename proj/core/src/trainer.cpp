#include "arcd/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "arcd/checkpoint.hpp"
#include "arcd/error.hpp"
#include "arcd/tensor_io.hpp"

namespace fs = std::filesystem;

namespace arcd {

// --- config ----------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(lr0 > 0)) throw ContractError("lr0 must be positive");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ContractError("betas must lie in [0,1)");
  if (!(eps > 0)) throw ContractError("eps must be positive");
  if (weight_decay < 0) throw ContractError("weight_decay must be non-negative");
  if (max_iteration < 1) throw ContractError("max_iteration must be at least 1");
  if (batch_size < 1) throw ContractError("batch_size must be at least 1");
  if (checkpoint_every < 0) throw ContractError("checkpoint_every must be non-negative");
  if (augmentation.crop < 0 || augmentation.crop % 32 != 0) throw ContractError("crop must be 0 or a multiple of 32");
  for (double p : {augmentation.p_hflip, augmentation.p_vflip, augmentation.p_temporal_exchange})
    if (p < 0 || p > 1) throw ContractError("augmentation probabilities must lie in [0,1]");
  ablation();
}

namespace {

using Setter = std::function<void(TrainConfig&, const std::string&)>;

template <typename N>
N parse_number(const std::string& v) {
  N out{};
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw std::invalid_argument("not a number: '" + v + "'");
  return out;
}

const std::vector<std::pair<std::string, Setter>>& setters() {
  static const std::vector<std::pair<std::string, Setter>> table = {
      {"lr0", [](TrainConfig& c, const std::string& v) { c.lr0 = parse_number<double>(v); }},
      {"weight_decay", [](TrainConfig& c, const std::string& v) { c.weight_decay = parse_number<double>(v); }},
      {"beta1", [](TrainConfig& c, const std::string& v) { c.beta1 = parse_number<double>(v); }},
      {"beta2", [](TrainConfig& c, const std::string& v) { c.beta2 = parse_number<double>(v); }},
      {"eps", [](TrainConfig& c, const std::string& v) { c.eps = parse_number<double>(v); }},
      {"power", [](TrainConfig& c, const std::string& v) { c.power = parse_number<double>(v); }},
      {"max_iteration", [](TrainConfig& c, const std::string& v) { c.max_iteration = parse_number<std::int64_t>(v); }},
      {"batch_size", [](TrainConfig& c, const std::string& v) { c.batch_size = parse_number<int>(v); }},
      {"seed", [](TrainConfig& c, const std::string& v) { c.seed = parse_number<std::uint64_t>(v); }},
      {"checkpoint_every", [](TrainConfig& c, const std::string& v) { c.checkpoint_every = parse_number<std::int64_t>(v); }},
      {"variant", [](TrainConfig& c, const std::string& v) { c.variant = v; }},
      {"p_hflip", [](TrainConfig& c, const std::string& v) { c.augmentation.p_hflip = parse_number<double>(v); }},
      {"p_vflip", [](TrainConfig& c, const std::string& v) { c.augmentation.p_vflip = parse_number<double>(v); }},
      {"crop", [](TrainConfig& c, const std::string& v) { c.augmentation.crop = parse_number<int>(v); }},
      {"p_temporal_exchange",
       [](TrainConfig& c, const std::string& v) { c.augmentation.p_temporal_exchange = parse_number<double>(v); }},
  };
  return table;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

ParsedConfig parse_config(const std::string& text) {
  ParsedConfig out;
  std::map<std::string, bool> seen;
  std::istringstream ss(text);
  std::string raw;
  std::uint64_t line_no = 0;
  while (std::getline(ss, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected key=value", line_no, "line");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) throw ParseError("expected key=value", line_no, "line");
    const auto& table = setters();
    auto it = std::find_if(table.begin(), table.end(), [&](const auto& kv) { return kv.first == key; });
    if (it == table.end()) throw ParseError("unknown key '" + key + "'", line_no, "line");
    if (seen[key]) throw ParseError("duplicate key '" + key + "'", line_no, "line");
    seen[key] = true;
    try {
      it->second(out.config, value);
    } catch (const std::invalid_argument& e) {
      throw ParseError(std::string("bad value for ") + key + ": " + e.what(), line_no, "line");
    }
  }
  std::map<std::string, std::string> defaults;
  std::istringstream ds(format_config(TrainConfig{}));
  for (std::string l; std::getline(ds, l);) defaults[l.substr(0, l.find('='))] = l.substr(l.find('=') + 1);
  for (const auto& [key, _] : setters())
    if (!seen[key]) out.warnings.push_back("config key " + key + " missing, using default " + defaults[key]);
  out.config.validate();
  return out;
}

ParsedConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string format_config(const TrainConfig& c) {
  std::ostringstream os;
  os.precision(17);
  os << "lr0=" << c.lr0 << "\nweight_decay=" << c.weight_decay << "\nbeta1=" << c.beta1 << "\nbeta2=" << c.beta2
     << "\neps=" << c.eps << "\npower=" << c.power << "\nmax_iteration=" << c.max_iteration
     << "\nbatch_size=" << c.batch_size << "\nseed=" << c.seed << "\ncheckpoint_every=" << c.checkpoint_every
     << "\nvariant=" << c.variant << "\np_hflip=" << c.augmentation.p_hflip << "\np_vflip=" << c.augmentation.p_vflip
     << "\ncrop=" << c.augmentation.crop << "\np_temporal_exchange=" << c.augmentation.p_temporal_exchange << "\n";
  return os.str();
}

double poly_lr(std::int64_t iter, const TrainConfig& cfg) {
  if (iter >= cfg.max_iteration) return 0.0;
  if (iter < 0) throw ContractError("poly_lr: negative iteration");
  return cfg.lr0 * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(cfg.max_iteration), cfg.power);
}

// --- optimizer -------------------------------------------------------------

template <typename T>
AdamW<T>::AdamW(ParameterSet<T> params, double beta1, double beta2, double eps, double weight_decay)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {
  for (const auto& p : params_.params) {
    m_.emplace_back(static_cast<std::size_t>(p.value.numel()), T(0));
    v_.emplace_back(static_cast<std::size_t>(p.value.numel()), T(0));
  }
}

template <typename T>
void AdamW<T>::step(double lr) {
  for (const auto& p : params_.params) {
    if (!p.value.has_grad()) continue;
    for (T g : p.value.grad())
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + p.name);
  }
  ++steps_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  for (std::size_t k = 0; k < params_.params.size(); ++k) {
    auto& p = params_.params[k];
    if (!p.value.has_grad()) continue;
    auto w = p.value.mutable_data();
    auto g = p.value.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    const double decay = p.decay ? lr * wd_ : 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      const double mi = beta1_ * m[i] + (1 - beta1_) * gi;
      const double vi = beta2_ * v[i] + (1 - beta2_) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / bc1, vhat = vi / bc2;
      w[i] = static_cast<T>(w[i] - decay * w[i] - lr * mhat / (std::sqrt(vhat) + eps_));
    }
  }
}

// --- training loop ---------------------------------------------------------

std::string format_log_row(const LogRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%lld\t%.9g\t%.9g\t%.9g\t%.9g\t%.17g", static_cast<long long>(r.iter), r.l_bce,
                r.l_dice, r.l_u, r.total, r.lr);
  return buf;
}

namespace {

constexpr std::uint64_t kShuffleStream = 0x5348554646ull;
constexpr std::uint64_t kAugmentStream = 0x4155474dull;

}  // namespace

template <typename T>
TrainResult train(ARCDNet<T>& model, const std::vector<BiTemporalSample>& data, const TrainConfig& cfg,
                  const TrainOptions& options) {
  cfg.validate();
  if (data.empty()) throw ContractError("train: empty dataset");
  if (!(cfg.ablation() == model.ablation())) throw ContractError("train: config variant does not match the model");

  const bool write = !options.out_dir.empty();
  std::ofstream log_file;
  const fs::path ckpt = write ? options.out_dir / "checkpoint.arck" : fs::path();
  if (write) {
    fs::create_directories(options.out_dir);
    log_file.open(options.out_dir / "loss.tsv", std::ios::trunc);
    if (!log_file) throw IoError("cannot write " + (options.out_dir / "loss.tsv").string());
    log_file << "iter\tl_bce\tl_dice\tl_u\ttotal\tlr\n";
  }

  AdamW<T> opt(model.parameters(), cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
  auto params = model.parameters();
  const auto ablation = model.ablation();

  Rng shuffle = Rng::stream(cfg.seed, kShuffleStream);
  std::vector<int> order(data.size());
  std::size_t cursor = order.size();

  TrainResult result;
  for (std::int64_t iter = 0; iter < cfg.max_iteration; ++iter) {
    std::vector<BiTemporalSample> batch;
    for (int j = 0; j < cfg.batch_size; ++j) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = order.size(); i > 1; --i)
          std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
        cursor = 0;
      }
      Rng aug = Rng::stream(cfg.seed ^ kAugmentStream, static_cast<std::uint64_t>(iter * cfg.batch_size + j));
      batch.push_back(augment(data[static_cast<std::size_t>(order[cursor++])], cfg.augmentation, aug));
    }
    auto b = make_batch<T>(batch);
    const double lr = poly_lr(iter, cfg);

    for (auto& p : params.params) p.value.zero_grad();
    auto pred = model.forward(b.t1, b.t2, true);
    auto loss = total_loss(pred, b.gt, ablation);
    backward(loss.total);
    opt.step(lr);

    LogRow row{iter, loss.l_bce, loss.l_dice, loss.l_u, loss.total_value, lr};
    result.log.push_back(row);
    if (write) log_file << format_log_row(row) << "\n" << std::flush;
    if (options.on_iteration) options.on_iteration(row);
    if (write && cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0)
      save_checkpoint(ckpt, model, iter + 1);
  }
  if (write) save_checkpoint(ckpt, model, cfg.max_iteration);
  return result;
}

// --- inference and evaluation ----------------------------------------------

template <typename T>
Prediction predict_pair(ARCDNet<T>& model, const Image& t1, const Image& t2, const std::string& id) {
  if (t1.height != t2.height || t1.width != t2.width || t1.channels != t2.channels)
    throw DimensionError("predict: t1 is " + std::to_string(t1.height) + "x" + std::to_string(t1.width) + ", t2 is " +
                         std::to_string(t2.height) + "x" + std::to_string(t2.width));
  if (t1.height % 32 || t1.width % 32) throw ContractError("predict: image sides must be multiples of 32");
  NoGradGuard guard;
  auto out = model.forward(image_tensor<T>(t1), image_tensor<T>(t2), false);
  Prediction p;
  p.id = id;
  p.change = Mask(t1.height, t1.width);
  const auto pc = out.change.data();
  p.change_probability.assign(pc.begin(), pc.end());
  for (std::size_t i = 0; i < pc.size(); ++i) p.change.data[i] = pc[i] >= T(kChangeThreshold);
  if (out.uncertainty.defined()) {
    const auto pu = out.uncertainty.data();
    p.uncertainty.assign(pu.begin(), pu.end());
  }
  return p;
}

template <typename T>
std::vector<Prediction> predict(ARCDNet<T>& model, const std::vector<BiTemporalSample>& data) {
  std::vector<Prediction> out;
  out.reserve(data.size());
  for (const auto& s : data) out.push_back(predict_pair(model, s.t1, s.t2, s.id));
  return out;
}

template <typename T>
Evaluation evaluate(ARCDNet<T>& model, const std::vector<BiTemporalSample>& data) {
  if (data.empty()) throw ContractError("evaluate: empty dataset");
  Evaluation e;
  SeparationAccumulator sep;
  bool has_u = false;
  for (const auto& s : data) {
    auto p = predict_pair(model, s.t1, s.t2, s.id);
    e.cm.merge(confusion(p.change.data, s.gt.data));
    if (!p.uncertainty.empty()) {
      sep.add(p.uncertainty, p.change.data, s.gt.data);
      has_u = true;
    }
  }
  e.scores = score(e.cm);
  e.separation = sep.result();
  if (!has_u) e.separation.errors_empty = e.separation.correct_empty = true;
  return e;
}

#define ARCD_INSTANTIATE_TRAINER(T)                                                                          \
  template class AdamW<T>;                                                                                   \
  template TrainResult train(ARCDNet<T>&, const std::vector<BiTemporalSample>&, const TrainConfig&,          \
                             const TrainOptions&);                                                           \
  template Prediction predict_pair(ARCDNet<T>&, const Image&, const Image&, const std::string&);             \
  template std::vector<Prediction> predict(ARCDNet<T>&, const std::vector<BiTemporalSample>&);               \
  template Evaluation evaluate(ARCDNet<T>&, const std::vector<BiTemporalSample>&);

ARCD_INSTANTIATE_TRAINER(float)
ARCD_INSTANTIATE_TRAINER(double)

}  // namespace arcd

// arcd: synth / train / infer / eval / gradcheck / ablate.
//
// Every failure ends in exactly one stderr line
//   error: kind=<kind> message=<text>
// and a nonzero exit code.

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "arcd/checkpoint.hpp"
#include "arcd/data.hpp"
#include "arcd/error.hpp"
#include "arcd/gradcheck.hpp"
#include "arcd/metrics.hpp"
#include "arcd/tensor_io.hpp"
#include "arcd/trainer.hpp"

namespace fs = std::filesystem;
using namespace arcd;

namespace {

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  std::replace(s.begin(), s.end(), '\r', ' ');
  return s;
}

int fail(const std::string& kind, const std::string& message) {
  std::cerr << "error: kind=" << kind << " message=" << one_line(message) << '\n';
  return 2;
}

bool non_empty_dir(const fs::path& dir) { return fs::is_directory(dir) && !fs::is_empty(dir); }

// --- synth -----------------------------------------------------------------

struct SynthArgs {
  fs::path out;
  int count = 8;
  int size = 64;
  double change_fraction = 0.5;
  std::uint64_t seed = 0;
  double noise = 0.05;
  int first_id = 0;
  bool force = false;
};

int run_synth(const SynthArgs& a) {
  if (fs::exists(a.out) && !fs::is_directory(a.out)) throw IoError(a.out.string() + " exists and is not a directory");
  if (non_empty_dir(a.out)) {
    if (!a.force) throw IoError(a.out.string() + " is not empty (use --force to overwrite)");
    for (const char* sub : {"A", "B", "label"}) fs::remove_all(a.out / sub);
  }
  if (a.count < 1) throw ContractError("--count must be at least 1");
  SyntheticSceneSpec spec;
  spec.size = a.size;
  spec.change_fraction = a.change_fraction;
  spec.noise = a.noise;
  spec.seed = a.seed;
  spec.validate();
  write_dataset(a.out, generate(spec, a.count, a.first_id));
  std::cout << "wrote " << a.count << " pairs of " << a.size << "x" << a.size << " to " << a.out.string() << '\n';
  return 0;
}

// --- train / ablate ----------------------------------------------------------

TrainConfig config_from(const fs::path& path) {
  if (path.empty()) return {};
  auto parsed = load_config(path);
  for (const auto& w : parsed.warnings) std::cerr << "warning: " << w << '\n';
  return parsed.config;
}

void print_progress(const LogRow& row, std::int64_t every, std::int64_t last) {
  if (row.iter == 0 || row.iter == last || (every > 0 && row.iter % every == 0))
    std::cout << format_log_row(row) << '\n' << std::flush;
}

ARCDNet<float> train_model(const TrainConfig& cfg, const fs::path& data_dir, const fs::path& out,
                           std::int64_t log_every) {
  cfg.validate();
  auto data = read_dataset(data_dir);
  if (data.empty()) throw IoError("no samples in " + data_dir.string());
  ARCDNet<float> model(ArchConfig{}, cfg.ablation(), cfg.seed);
  std::cout << "variant=" << cfg.variant << " parameters=" << model.parameter_count() << " samples=" << data.size()
            << '\n';
  TrainOptions options;
  options.out_dir = out;
  options.on_iteration = [&](const LogRow& row) { print_progress(row, log_every, cfg.max_iteration - 1); };
  train(model, data, cfg, options);
  return model;
}

struct TrainArgs {
  fs::path config, data, out;
  std::int64_t log_every = 100;
};

int run_train(const TrainArgs& a) {
  auto cfg = config_from(a.config);
  fs::create_directories(a.out);
  train_model(cfg, a.data, a.out, a.log_every);
  std::cout << "checkpoint " << (a.out / "checkpoint.arck").string() << '\n';
  return 0;
}

struct AblateArgs {
  std::string variant;
  fs::path config, data, test_data, out;
  std::int64_t log_every = 100;
};

int run_ablate(const AblateArgs& a) {
  AblationConfig::from_variant(a.variant);  // reject unknown names before any work
  auto cfg = config_from(a.config);
  cfg.variant = a.variant;
  fs::create_directories(a.out);
  auto model = train_model(cfg, a.data, a.out, a.log_every);

  const auto& eval_dir = a.test_data.empty() ? a.data : a.test_data;
  auto ev = evaluate(model, read_dataset(eval_dir));
  std::ostringstream report;
  report << "variant=" << a.variant << '\n' << "parameters=" << model.parameter_count() << '\n';
  report << "eval_data=" << eval_dir.string() << '\n';
  write_report(report, ev.cm, ev.scores);
  if (ev.separation.valid()) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "mean_u_on_errors=%.17g\nmean_u_on_correct=%.17g\n", ev.separation.mean_u_on_errors,
                  ev.separation.mean_u_on_correct);
    report << buf;
  }
  write_file_atomic(a.out / "report.txt", report.str());
  std::cout << report.str();
  return 0;
}

// --- infer -------------------------------------------------------------------

struct InferArgs {
  fs::path checkpoint, t1, t2, out_change, out_uncertainty, out_prob;
  std::string variant;
};

int run_infer(const InferArgs& a) {
  auto load = [&] {
    if (a.variant.empty()) return load_model<float>(a.checkpoint);
    // Explicit architecture: the checkpoint must match it parameter for parameter.
    ARCDNet<float> model(read_checkpoint_info(a.checkpoint).arch, AblationConfig::from_variant(a.variant), 0);
    load_checkpoint(a.checkpoint, model);
    return model;
  };
  auto model = load();
  auto t1 = read_image(a.t1), t2 = read_image(a.t2);
  if (t1.channels != 3 || t2.channels != 3) throw DimensionError("inputs must be RGB");
  if (t1.height != t2.height || t1.width != t2.width)
    throw DimensionError("t1 is " + std::to_string(t1.height) + "x" + std::to_string(t1.width) + ", t2 is " +
                         std::to_string(t2.height) + "x" + std::to_string(t2.width));
  auto pred = predict_pair(model, t1, t2);

  if (!a.out_uncertainty.empty() && pred.uncertainty.empty())
    throw ContractError("checkpoint has no uncertainty branch; drop --out-uncertainty");
  write_mask(a.out_change, pred.change);
  if (!a.out_uncertainty.empty()) {
    std::vector<std::uint8_t> u(pred.uncertainty.size());
    for (std::size_t i = 0; i < u.size(); ++i)
      u[i] = static_cast<std::uint8_t>(std::floor(std::clamp(pred.uncertainty[i], 0.0, 1.0) * 255.0 + 0.5));
    write_gray(a.out_uncertainty, t1.height, t1.width, u);
  }
  if (!a.out_prob.empty()) {
    std::vector<float> p(pred.change_probability.begin(), pred.change_probability.end());
    save_arct(a.out_prob, Tensor<float>(Shape{1, 1, t1.height, t1.width}, std::move(p)));
  }
  std::uint64_t changed = 0;
  for (auto v : pred.change.data) changed += v;
  std::cout << "changed_pixels=" << changed << " of " << pred.change.data.size() << '\n';
  return 0;
}

// --- eval --------------------------------------------------------------------

// A dataset root (with label/) or a plain directory of masks.
fs::path mask_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError(dir.string() + " is not a directory");
  return fs::is_directory(dir / "label") ? dir / "label" : dir;
}

std::map<std::string, fs::path> masks_in(const fs::path& dir) {
  std::map<std::string, fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".pgm") out.emplace(e.path().stem().string(), e.path());
  return out;
}

struct EvalArgs {
  fs::path pred_dir, gt_dir;
};

int run_eval(const EvalArgs& a) {
  auto gt = masks_in(mask_dir(a.gt_dir));
  auto pred = masks_in(mask_dir(a.pred_dir));
  if (gt.empty()) throw IoError("no .pgm masks in " + a.gt_dir.string());
  std::vector<std::string> ids, missing;
  for (const auto& [id, path] : gt) (pred.count(id) ? ids : missing).push_back(id);
  if (!missing.empty()) {
    std::string list;
    for (const auto& id : missing) list += (list.empty() ? "" : ",") + id;
    throw IoError("missing predictions for ids: " + list);
  }
  for (const auto& [id, path] : pred)
    if (!gt.count(id)) std::cerr << "warning: prediction " << id << " has no ground truth; ignored\n";

  std::vector<ConfusionMatrix> per(ids.size());
  parallel_for(static_cast<int>(ids.size()), thread_budget(), [&](int i) {
    auto g = read_mask(gt.at(ids[i]));
    auto p = read_mask(pred.at(ids[i]));
    if (g.height != p.height || g.width != p.width)
      throw DimensionError("id " + ids[i] + ": prediction " + std::to_string(p.height) + "x" +
                           std::to_string(p.width) + " vs ground truth " + std::to_string(g.height) + "x" +
                           std::to_string(g.width));
    per[i] = confusion(p.data, g.data);
  });
  ConfusionMatrix cm;
  for (const auto& c : per) cm.merge(c);
  std::cout << "images=" << ids.size() << '\n';
  write_report(std::cout, cm, score(cm));
  return 0;
}

// --- gradcheck ---------------------------------------------------------------

int run_gradcheck(std::uint64_t seed) {
  int failed = 0, total = 0;
  for (const auto& entry : gradcheck_suite()) {
    auto report = gradcheck(entry.name, entry.factory, seed, entry.options);
    std::cout << format_report(report) << std::flush;
    ++total;
    failed += !report.passed();
  }
  std::cout << (failed ? "FAIL " : "PASS ") << total - failed << "/" << total << " cases\n";
  return failed ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bi-temporal change detection: data, training, inference, evaluation"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic bi-temporal dataset");
  s->add_option("--out", synth.out, "Output directory")->required();
  s->add_option("--count", synth.count, "Number of pairs")->required();
  s->add_option("--size", synth.size, "Image side, divisible by 32")->capture_default_str();
  s->add_option("--change-frac", synth.change_fraction, "Probability an object exists in one epoch only")
      ->capture_default_str();
  s->add_option("--seed", synth.seed)->capture_default_str();
  s->add_option("--noise", synth.noise, "Uniform texture noise amplitude")->capture_default_str();
  s->add_option("--first-id", synth.first_id, "Index of the first sample")->capture_default_str();
  s->add_flag("--force", synth.force, "Overwrite a non-empty output directory");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train the full model");
  t->add_option("--config", tr.config, "key=value config file")->required()->check(CLI::ExistingFile);
  t->add_option("--data", tr.data, "Dataset directory")->required();
  t->add_option("--out", tr.out, "Output directory (loss.tsv, checkpoint.arck)")->required();
  t->add_option("--log-every", tr.log_every)->capture_default_str();

  InferArgs inf;
  auto* i = app.add_subcommand("infer", "Predict change and uncertainty maps for one pair");
  i->add_option("--checkpoint", inf.checkpoint)->required()->check(CLI::ExistingFile);
  i->add_option("--t1", inf.t1, "PPM image, first epoch")->required();
  i->add_option("--t2", inf.t2, "PPM image, second epoch")->required();
  i->add_option("--out-change", inf.out_change, "Binary PGM change mask")->required();
  i->add_option("--out-uncertainty", inf.out_uncertainty, "PGM uncertainty map (0..255)");
  i->add_option("--out-prob", inf.out_prob, "ARCT tensor of change probabilities");
  i->add_option("--variant", inf.variant, "Build this variant and require the checkpoint to match it");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Score predicted masks against ground truth");
  e->add_option("--pred-dir", ev.pred_dir)->required();
  e->add_option("--gt-dir", ev.gt_dir, "Mask directory or dataset root")->required();

  std::uint64_t gc_seed = 0;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference check of every primitive and block");
  g->add_option("--seed", gc_seed)->capture_default_str();

  AblateArgs ab;
  auto* a = app.add_subcommand("ablate", "Train one ablation variant and report its scores");
  a->add_option("--variant", ab.variant)->required();
  a->add_option("--data", ab.data, "Training dataset")->required();
  a->add_option("--out", ab.out)->required();
  a->add_option("--config", ab.config, "key=value config file (variant is overridden)")->check(CLI::ExistingFile);
  a->add_option("--test-data", ab.test_data, "Evaluation dataset (default: the training set)");
  a->add_option("--log-every", ab.log_every)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    return fail("usage", ex.what());
  }

  try {
    if (s->parsed()) return run_synth(synth);
    if (t->parsed()) return run_train(tr);
    if (i->parsed()) return run_infer(inf);
    if (e->parsed()) return run_eval(ev);
    if (g->parsed()) return run_gradcheck(gc_seed);
    if (a->parsed()) return run_ablate(ab);
  } catch (const Error& ex) {
    return fail(ex.kind(), ex.what());
  } catch (const fs::filesystem_error& ex) {
    return fail("io", ex.what());
  } catch (const std::exception& ex) {
    return fail("internal", ex.what());
  }
  return 0;
}

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "arcd/checkpoint.hpp"
#include "arcd/error.hpp"
#include "arcd/tensor_io.hpp"
#include "arcd/trainer.hpp"

using namespace arcd;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("arcd_trainer_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

ArchConfig narrow() {
  ArchConfig a;
  a.channels = {4, 6, 8, 8};
  a.texture_channels = 4;
  a.review_channels = 4;
  a.se_reduction = 2;
  return a;
}

std::vector<BiTemporalSample> small_data(int n) {
  SyntheticSceneSpec spec;
  spec.size = 32;
  spec.seed = 3;
  return generate(spec, n);
}

TrainConfig short_run(int iters) {
  TrainConfig cfg;
  cfg.max_iteration = iters;
  cfg.batch_size = 2;
  return cfg;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(Poly, ClosedForm) {
  TrainConfig cfg;
  cfg.max_iteration = 20000;
  EXPECT_EQ(poly_lr(0, cfg), 5e-4);
  EXPECT_NEAR(poly_lr(10000, cfg), 5e-4 * std::pow(0.5, 0.9), 1e-12);
  EXPECT_NEAR(poly_lr(10000, cfg), 2.6795e-4, 1e-8);
  EXPECT_EQ(poly_lr(20000, cfg), 0.0);
  double prev = poly_lr(0, cfg);
  for (std::int64_t i : {1, 100, 5000, 19000, 19999}) {
    const double v = poly_lr(i, cfg);
    EXPECT_LT(v, prev);
    EXPECT_GT(v, 0.0);
    prev = v;
  }
}

TEST(AdamW, SingleScalarStep) {
  ParameterSet<double> set;
  auto p = Tensor<double>::scalar(1.0, true);
  set.add("p", p, true);
  AdamW<double> opt(set, 0.9, 0.99, 1e-8, 0.0);
  p.mutable_grad()[0] = 1.0;
  opt.step(0.1);
  EXPECT_NEAR(p.item(), 1.0 - 0.1 / (1 + 1e-8), 1e-12);
  EXPECT_NEAR(p.item(), 0.9, 1e-8);
}

TEST(AdamW, ZeroGradNoDecayUnchanged) {
  ParameterSet<double> set;
  auto p = Tensor<double>(Shape{3}, std::vector<double>{1, -2, 3}, true);
  set.add("p", p, true);
  AdamW<double> opt(set, 0.9, 0.99, 1e-8, 0.0);
  p.mutable_grad();
  opt.step(0.1);
  EXPECT_EQ(std::vector<double>(p.data().begin(), p.data().end()), (std::vector<double>{1, -2, 3}));
}

TEST(AdamW, DecoupledDecayShrinks) {
  ParameterSet<double> set;
  auto w = Tensor<double>::scalar(2.0, true), b = Tensor<double>::scalar(2.0, true);
  set.add("w", w, true);
  set.add("b", b, false);
  AdamW<double> opt(set, 0.9, 0.99, 1e-8, 0.01);
  w.mutable_grad(), b.mutable_grad();
  opt.step(0.1);
  EXPECT_NEAR(w.item(), 2.0 * (1 - 0.1 * 0.01), 1e-15);
  EXPECT_EQ(b.item(), 2.0);
}

TEST(AdamW, NonFiniteGradientNamesParameter) {
  ParameterSet<double> set;
  auto a = Tensor<double>::scalar(1.0, true), b = Tensor<double>::scalar(1.0, true);
  set.add("first", a, true);
  set.add("second", b, true);
  AdamW<double> opt(set, 0.9, 0.99, 1e-8, 0.0);
  a.mutable_grad()[0] = 1.0;
  b.mutable_grad()[0] = std::numeric_limits<double>::infinity();
  try {
    opt.step(0.1);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("second"), std::string::npos);
  }
  EXPECT_EQ(a.item(), 1.0);  // nothing updated
}

TEST(Config, ParsesAndWarns) {
  auto parsed = parse_config("# desk\nmax_iteration = 50\nbatch_size=2\nvariant=wo-krm\n\n");
  EXPECT_EQ(parsed.config.max_iteration, 50);
  EXPECT_EQ(parsed.config.batch_size, 2);
  EXPECT_EQ(parsed.config.variant, "wo-krm");
  EXPECT_EQ(parsed.config.lr0, 5e-4);
  bool lr_warned = false;
  for (const auto& w : parsed.warnings) lr_warned |= w.find("lr0") != std::string::npos;
  EXPECT_TRUE(lr_warned);
}

TEST(Config, FormatRoundTrips) {
  TrainConfig cfg;
  cfg.lr0 = 1e-3;
  cfg.seed = 17;
  cfg.augmentation.crop = 32;
  auto parsed = parse_config(format_config(cfg));
  EXPECT_TRUE(parsed.warnings.empty());
  EXPECT_EQ(format_config(parsed.config), format_config(cfg));
}

TEST(Config, ErrorsCarryLineNumbers) {
  auto line_of = [](const std::string& text) -> std::int64_t {
    try {
      parse_config(text);
    } catch (const ParseError& e) {
      return static_cast<std::int64_t>(e.offset());
    }
    return -1;
  };
  EXPECT_EQ(line_of("lr0=1e-3\nbogus line\n"), 2);
  EXPECT_EQ(line_of("lr0=1e-3\n\nunknown_key=1\n"), 3);
  EXPECT_EQ(line_of("seed=1\nseed=2\n"), 2);
  EXPECT_EQ(line_of("batch_size=two\n"), 1);
  EXPECT_THROW(parse_config("batch_size=0\n"), ContractError);
  EXPECT_THROW(parse_config("variant=nope\n"), ContractError);
}

TEST(LogRow, TabSeparated) {
  LogRow r{3, 1.5, 2.25, 0.5, 4.25, 5e-4};
  EXPECT_EQ(format_log_row(r), "3\t1.5\t2.25\t0.5\t4.25\t0.00050000000000000001");
}

TEST(Train, DeterministicLogs) {
  auto data = small_data(4);
  TempDir a, b;
  auto run = [&](const fs::path& out) {
    ARCDNet<float> model(narrow(), AblationConfig{}, 1);
    TrainOptions opt;
    opt.out_dir = out;
    return train(model, data, short_run(6), opt);
  };
  auto ra = run(a.path), rb = run(b.path);
  ASSERT_EQ(ra.log.size(), 6u);
  EXPECT_EQ(slurp(a.path / "loss.tsv"), slurp(b.path / "loss.tsv"));
  EXPECT_EQ(slurp(a.path / "checkpoint.arck"), slurp(b.path / "checkpoint.arck"));
  for (const auto& row : ra.log) EXPECT_NEAR(row.total, row.l_bce + row.l_dice + row.l_u, 1e-4 * row.total);
  EXPECT_EQ(ra.log.front().lr, 5e-4);
}

TEST(Train, LossDecreasesOnTinySet) {
  auto data = small_data(2);
  ARCDNet<float> model(narrow(), AblationConfig{}, 2);
  auto cfg = short_run(60);
  cfg.lr0 = 3e-3;
  cfg.augmentation = AugmentationPolicy{0, 0, 0, 0};
  auto r = train(model, data, cfg);
  EXPECT_LT(r.log.back().total, r.log.front().total);
}

TEST(Predict, RequiresDivisibleSize) {
  ARCDNet<float> model(narrow(), AblationConfig{}, 2);
  Image a(3, 48, 48, 0.5f);
  EXPECT_THROW(predict_pair(model, a, a), ContractError);
}

TEST(Predict, ThresholdAndUncertainty) {
  ARCDNet<float> model(narrow(), AblationConfig{}, 2);
  auto s = small_data(1)[0];
  auto p = predict_pair(model, s.t1, s.t2, s.id);
  ASSERT_EQ(p.change_probability.size(), 32u * 32u);
  ASSERT_EQ(p.uncertainty.size(), 32u * 32u);
  for (std::size_t i = 0; i < p.change.data.size(); ++i)
    EXPECT_EQ(p.change.data[i], p.change_probability[i] >= kChangeThreshold ? 1 : 0);
  ARCDNet<float> reduced(narrow(), AblationConfig::from_variant("wo-oue"), 2);
  EXPECT_TRUE(predict_pair(reduced, s.t1, s.t2).uncertainty.empty());
}

TEST(Arct, RoundTripExact) {
  std::stringstream ss;
  Tensor<float> t(Shape{2, 3, 1, 5}, 0.f);
  Rng rng(1);
  for (auto& v : t.mutable_data()) v = static_cast<float>(rng.uniform(-1e3, 1e3));
  write_arct(ss, t);
  const auto bytes = ss.str();
  ASSERT_EQ(bytes.size(), 4u + 1 + 1 + 4 * 4 + 30 * 4);
  EXPECT_EQ(bytes.substr(0, 4), "ARCT");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 4);
  EXPECT_EQ(bytes[6], 2);  // little-endian first dimension
  auto back = read_arct<float>(ss);
  EXPECT_EQ(back.shape(), t.shape());
  EXPECT_TRUE(std::equal(t.data().begin(), t.data().end(), back.data().begin()));
}

TEST(Arct, MalformedRecords) {
  auto offset_of = [](const std::string& bytes) -> std::int64_t {
    std::istringstream is(bytes);
    try {
      read_arct<float>(is);
    } catch (const ParseError& e) {
      return static_cast<std::int64_t>(e.offset());
    }
    return -1;
  };
  EXPECT_EQ(offset_of("ARCX\x01\x01"), 0);
  EXPECT_EQ(offset_of(std::string("ARCT\x02\x01", 6)), 4);
  EXPECT_EQ(offset_of(std::string("ARCT\x01\x01\x02\x00", 8)), 6);
  EXPECT_EQ(offset_of(std::string("ARCT\x01\x01\x02\x00\x00\x00\x00\x00\x80\x3f", 14)), 14);
}

TEST(Checkpoint, RoundTripBitIdentical) {
  TempDir tmp;
  auto data = small_data(2);
  ARCDNet<float> model(narrow(), AblationConfig::from_variant("krm-wo-rea"), 4);
  auto cfg = short_run(3);
  cfg.variant = "krm-wo-rea";
  train(model, data, cfg);
  save_checkpoint(tmp.path / "m.arck", model, 3);
  auto info = read_checkpoint_info(tmp.path / "m.arck");
  EXPECT_EQ(info.iteration, 3);
  EXPECT_EQ(info.arch.channels, narrow().channels);
  EXPECT_EQ(info.ablation, AblationConfig::from_variant("krm-wo-rea"));
  auto loaded = load_model<float>(tmp.path / "m.arck");
  auto a = predict_pair(model, data[1].t1, data[1].t2), b = predict_pair(loaded, data[1].t1, data[1].t2);
  EXPECT_EQ(a.change_probability, b.change_probability);
  EXPECT_EQ(a.uncertainty, b.uncertainty);
}

TEST(Checkpoint, ConfigEncodingRoundTrips) {
  CheckpointInfo info;
  info.arch = narrow();
  info.ablation = AblationConfig::from_variant("oue-boundary-sup");
  info.iteration = 77;
  auto back = decode_config(encode_config(info));
  EXPECT_EQ(back.arch.channels, info.arch.channels);
  EXPECT_EQ(back.arch.se_reduction, 2);
  EXPECT_EQ(back.ablation, info.ablation);
  EXPECT_EQ(back.iteration, 77);
}

TEST(Checkpoint, MismatchNamesParameter) {
  TempDir tmp;
  ARCDNet<float> model(narrow(), AblationConfig{}, 4);
  save_checkpoint(tmp.path / "m.arck", model, 0);
  ARCDNet<float> other(narrow(), AblationConfig::from_variant("wo-krm"), 4);
  try {
    load_checkpoint(tmp.path / "m.arck", other);
    FAIL();
  } catch (const MismatchError& e) {
    EXPECT_NE(std::string(e.what()).find("parameter "), std::string::npos) << e.what();
  }
  ARCDNet<float> wider(ArchConfig{}, AblationConfig{}, 4);
  EXPECT_THROW(load_checkpoint(tmp.path / "m.arck", wider), MismatchError);
}

TEST(Checkpoint, TruncatedFileRejected) {
  TempDir tmp;
  ARCDNet<float> model(narrow(), AblationConfig{}, 4);
  save_checkpoint(tmp.path / "m.arck", model, 0);
  auto bytes = slurp(tmp.path / "m.arck");
  std::ofstream(tmp.path / "t.arck", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  EXPECT_THROW(load_model<float>(tmp.path / "t.arck"), ParseError);
}

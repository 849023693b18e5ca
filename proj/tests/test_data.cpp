#include <gtest/gtest.h>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "arcd/data.hpp"
#include "arcd/error.hpp"

using namespace arcd;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("arcd_test_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                        "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

BiTemporalSample blank(int h, int w) {
  BiTemporalSample s;
  s.t1 = Image(3, h, w), s.t2 = Image(3, h, w), s.gt = Mask(h, w);
  return s;
}

}  // namespace

TEST(Synthetic, Deterministic) {
  SyntheticSceneSpec spec;
  spec.seed = 11;
  auto a = generate(spec, 3), b = generate(spec, 3);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(a[i].t1, b[i].t1);
    EXPECT_EQ(a[i].t2, b[i].t2);
    EXPECT_EQ(a[i].gt, b[i].gt);
    EXPECT_EQ(a[i].id, format_id(i));
  }
  // sample i does not depend on how many were requested
  EXPECT_EQ(generate(spec, 5)[2].t1, a[2].t1);
  EXPECT_EQ(generate_one(spec, 1).gt, a[1].gt);
  spec.seed = 12;
  EXPECT_FALSE(generate_one(spec, 0).t1 == a[0].t1);
}

TEST(Synthetic, NoChangeGivesEmptyMasks) {
  SyntheticSceneSpec spec;
  spec.change_fraction = 0;
  for (const auto& s : generate(spec, 4))
    for (auto v : s.gt.data) EXPECT_EQ(v, 0);
}

TEST(Synthetic, SingleChangedObjectFootprint) {
  SyntheticSceneSpec spec;
  spec.change_fraction = 1;
  spec.min_objects = spec.max_objects = 1;
  spec.noise = 0;
  for (int i = 0; i < 5; ++i) {
    auto s = generate_one(spec, i);
    std::size_t changed = 0;
    for (int y = 0; y < s.gt.height; ++y)
      for (int x = 0; x < s.gt.width; ++x) {
        bool differs = false;
        for (int c = 0; c < 3; ++c) differs |= s.t1.at(c, y, x) != s.t2.at(c, y, x);
        EXPECT_EQ(s.gt.at(y, x), differs ? 1 : 0);
        changed += differs;
      }
    EXPECT_GT(changed, 0u);
  }
}

TEST(Synthetic, ValuesInRange) {
  SyntheticSceneSpec spec;
  spec.size = 32;
  for (const auto& s : generate(spec, 4))
    for (float v : s.t1.data) {
      EXPECT_GE(v, 0.f);
      EXPECT_LE(v, 1.f);
    }
}

TEST(Synthetic, InvalidSceneParameters) {
  SyntheticSceneSpec spec;
  spec.size = 48;
  EXPECT_THROW(generate(spec, 1), ContractError);
  spec.size = 64;
  spec.change_fraction = 1.5;
  EXPECT_THROW(spec.validate(), ContractError);
}

TEST(Tile, Counts) {
  EXPECT_EQ(tile(blank(1024, 1024), 512).size(), 4u);
  EXPECT_EQ(tile(blank(520, 520), 512).size(), 1u);
  EXPECT_THROW(tile(blank(256, 256), 512), ContractError);
}

TEST(Tile, WholeImagePatchIsIdentity) {
  SyntheticSceneSpec spec;
  auto s = generate_one(spec, 0);
  auto t = tile(s, 64);
  ASSERT_EQ(t.size(), 1u);
  EXPECT_EQ(t[0].t1, s.t1);
  EXPECT_EQ(t[0].gt, s.gt);
}

TEST(Tile, RowMajorContent) {
  SyntheticSceneSpec spec;
  auto s = generate_one(spec, 3);
  auto t = tile(s, 32);
  ASSERT_EQ(t.size(), 4u);
  EXPECT_EQ(t[1].t2.at(2, 5, 7), s.t2.at(2, 5, 32 + 7));
  EXPECT_EQ(t[2].gt.at(4, 9), s.gt.at(32 + 4, 9));
}

TEST(Augment, ZeroProbabilitiesAreIdentity) {
  SyntheticSceneSpec spec;
  auto s = generate_one(spec, 0);
  AugmentationPolicy none{0, 0, 0, 0};
  Rng rng(1);
  auto a = augment(s, none, rng);
  EXPECT_EQ(a.t1, s.t1);
  EXPECT_EQ(a.t2, s.t2);
  EXPECT_EQ(a.gt, s.gt);
}

TEST(Augment, CertainOperations) {
  SyntheticSceneSpec spec;
  auto s = generate_one(spec, 2);
  Rng rng(1);
  auto a = augment(s, AugmentationPolicy{1, 0, 0, 1}, rng);
  EXPECT_EQ(a.t1, hflip(s.t2));
  EXPECT_EQ(a.t2, hflip(s.t1));
  EXPECT_EQ(a.gt, hflip(s.gt));
  auto v = augment(s, AugmentationPolicy{0, 1, 0, 0}, rng);
  EXPECT_EQ(v.t1, vflip(s.t1));
  EXPECT_EQ(v.gt, vflip(s.gt));
  EXPECT_EQ(hflip(hflip(s.t1)), s.t1);
}

TEST(Augment, CropIsConsistent) {
  SyntheticSceneSpec spec;
  auto s = generate_one(spec, 1);
  Rng rng(4);
  auto a = augment(s, AugmentationPolicy{0, 0, 32, 0}, rng);
  ASSERT_EQ(a.t1.height, 32);
  ASSERT_EQ(a.gt.width, 32);
  // locate the crop offset from t1, then check t2 and gt agree with it
  bool found = false;
  for (int y0 = 0; y0 <= 32 && !found; ++y0)
    for (int x0 = 0; x0 <= 32 && !found; ++x0) {
      bool ok = true;
      for (int y = 0; y < 32 && ok; ++y)
        for (int x = 0; x < 32 && ok; ++x) ok = a.t1.at(0, y, x) == s.t1.at(0, y0 + y, x0 + x);
      if (!ok) continue;
      found = true;
      for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
          EXPECT_EQ(a.t2.at(1, y, x), s.t2.at(1, y0 + y, x0 + x));
          EXPECT_EQ(a.gt.at(y, x), s.gt.at(y0 + y, x0 + x));
        }
    }
  EXPECT_TRUE(found);
  EXPECT_THROW(augment(s, AugmentationPolicy{0, 0, 96, 0}, rng), ContractError);
}

TEST(Raster, MaskRoundTrip) {
  TempDir tmp;
  Rng rng(3);
  Mask m(33, 17);
  for (auto& v : m.data) v = rng.bernoulli(0.5);
  write_mask(tmp.path / "m.pgm", m);
  EXPECT_EQ(read_mask(tmp.path / "m.pgm"), m);
}

TEST(Raster, ImageRoundTrip) {
  TempDir tmp;
  Rng rng(4);
  Image img(3, 9, 14);
  for (auto& v : img.data) v = static_cast<float>(rng.uniform_int(0, 255)) / 255.f;
  write_image(tmp.path / "i.ppm", img);
  EXPECT_EQ(read_image(tmp.path / "i.ppm"), img);
  const auto bytes = slurp(tmp.path / "i.ppm");
  EXPECT_EQ(encode_ppm(decode_ppm(bytes)), bytes);
}

TEST(Raster, ThresholdAt128) {
  auto m = decode_pgm(encode_pgm(1, 3, {127, 128, 255}));
  EXPECT_EQ(m.data, (std::vector<std::uint8_t>{0, 1, 1}));
}

TEST(Raster, HeaderCommentsAccepted) {
  auto m = decode_pgm(std::string("P5\n# made by hand\n2 1\n255\n") + char(0) + char(200));
  EXPECT_EQ(m.width, 2);
  EXPECT_EQ(m.data, (std::vector<std::uint8_t>{0, 1}));
}

TEST(Raster, MalformedHeaders) {
  auto offset_of = [](const std::string& bytes) -> std::int64_t {
    try {
      decode_pgm(bytes);
    } catch (const ParseError& e) {
      return static_cast<std::int64_t>(e.offset());
    }
    return -1;
  };
  EXPECT_EQ(offset_of("P6\n1 1\n255\n\x01\x02\x03"), 0);
  EXPECT_EQ(offset_of("P5\n1 1\n65535\n\x01\x02"), 7);
  EXPECT_EQ(offset_of("P5\n0 1\n255\n"), 3);
  EXPECT_EQ(offset_of("P5\n2 2\n255\n\x01\x02"), 13);
  EXPECT_THROW(decode_ppm("P5\n1 1\n255\n\x01"), ParseError);
  EXPECT_THROW(read_mask("/nonexistent/x.pgm"), IoError);
}

TEST(Dataset, WriteReadRoundTrip) {
  TempDir tmp;
  SyntheticSceneSpec spec;
  spec.size = 32;
  auto samples = generate(spec, 3, 5);
  write_dataset(tmp.path, samples);
  auto back = read_dataset(tmp.path);
  ASSERT_EQ(back.size(), 3u);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].id, samples[i].id);
    EXPECT_EQ(back[i].t1, samples[i].t1);
    EXPECT_EQ(back[i].gt, samples[i].gt);
  }
  EXPECT_EQ(back[0].id, "0005");
}

TEST(Dataset, IncompleteTripleNamesId) {
  TempDir tmp;
  SyntheticSceneSpec spec;
  spec.size = 32;
  write_dataset(tmp.path, generate(spec, 2));
  fs::remove(tmp.path / "B" / "0001.ppm");
  try {
    read_dataset(tmp.path);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("0001"), std::string::npos) << e.what();
  }
}

TEST(Batching, LayoutAndSizes) {
  SyntheticSceneSpec spec;
  spec.size = 32;
  auto s = generate(spec, 2);
  auto b = make_batch<double>(s);
  EXPECT_EQ(b.t1.shape(), (Shape{2, 3, 32, 32}));
  EXPECT_EQ(b.gt.shape(), (Shape{2, 1, 32, 32}));
  EXPECT_EQ(b.t2.data()[3 * 32 * 32 + 2 * 32 * 32 + 5 * 32 + 6], s[1].t2.at(2, 5, 6));
  EXPECT_EQ(b.gt.data()[32 * 32 + 7], s[1].gt.at(0, 7));
  s[1] = generate_one(SyntheticSceneSpec{}, 0);
  EXPECT_THROW(make_batch<double>(s), DimensionError);
}

TEST(Threads, ParallelForCoversEveryIndexAndRethrows) {
  std::vector<int> hits(37, 0);
  parallel_for(37, 4, [&](int i) { hits[i]++; });
  for (int h : hits) EXPECT_EQ(h, 1);
  EXPECT_THROW(parallel_for(8, 3, [](int i) { if (i == 5) throw IoError("boom"); }), IoError);
}

TEST(Threads, BudgetFromEnvironment) {
  ::setenv("ARCD_THREADS", "3", 1);
  EXPECT_EQ(thread_budget(), 3);
  ::setenv("ARCD_THREADS", "zero", 1);
  EXPECT_THROW(thread_budget(), ContractError);
  ::unsetenv("ARCD_THREADS");
  EXPECT_EQ(thread_budget(), 1);
}

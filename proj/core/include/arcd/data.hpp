#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "arcd/random.hpp"
#include "arcd/tensor.hpp"

namespace arcd {

/// Planar float image, values in [0,1].
struct Image {
  int channels = 0, height = 0, width = 0;
  std::vector<float> data;

  Image() = default;
  Image(int c, int h, int w, float fill = 0.f)
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}
  float& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  bool operator==(const Image&) const = default;
};

/// Binary map stored as 0/1 bytes.
struct Mask {
  int height = 0, width = 0;
  std::vector<std::uint8_t> data;

  Mask() = default;
  Mask(int h, int w, std::uint8_t fill = 0) : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}
  std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
  bool operator==(const Mask&) const = default;
};

struct BiTemporalSample {
  std::string id;
  Image t1, t2;
  Mask gt;
};

// --- raster io -------------------------------------------------------------
// Binary PPM (P6) / PGM (P5), maxval 255. Errors carry byte offsets.

Image read_image(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const Image& image);
/// Pixels >= 128 are foreground.
Mask read_mask(const std::filesystem::path& path);
/// Foreground written as 255.
void write_mask(const std::filesystem::path& path, const Mask& mask);
/// Raw 8-bit grey map (used for uncertainty output).
void write_gray(const std::filesystem::path& path, int height, int width, const std::vector<std::uint8_t>& values);

Image decode_ppm(const std::string& bytes);
Mask decode_pgm(const std::string& bytes);
std::string encode_ppm(const Image& image);
std::string encode_pgm(int height, int width, const std::vector<std::uint8_t>& values);

// --- synthetic scenes ------------------------------------------------------

struct SyntheticSceneSpec {
  int size = 64;                 // square, divisible by 32
  int min_objects = 2;
  int max_objects = 5;
  double change_fraction = 0.5;  // probability an object exists in only one epoch
  double noise = 0.05;           // uniform texture noise amplitude
  int min_extent = 0;            // object side range in pixels; 0 picks size/8
  int max_extent = 0;            // 0 picks size/3
  std::uint64_t seed = 0;

  void validate() const;
};

/// Samples are generated from per-index streams, so sample i is identical
/// whatever `count` is. Ids are zero-padded to four digits starting at `first_id`.
std::vector<BiTemporalSample> generate(const SyntheticSceneSpec& spec, int count, int first_id = 0);
BiTemporalSample generate_one(const SyntheticSceneSpec& spec, int index);

// --- tiling and augmentation -----------------------------------------------

/// Row-major non-overlapping patches; the trailing remainder is dropped.
std::vector<BiTemporalSample> tile(const BiTemporalSample& sample, int patch);

struct AugmentationPolicy {
  double p_hflip = 0.5;
  double p_vflip = 0.5;
  int crop = 0;  // 0 keeps the full size
  double p_temporal_exchange = 0.5;
};

BiTemporalSample augment(const BiTemporalSample& sample, const AugmentationPolicy& policy, Rng& rng);

Image hflip(const Image& x);
Image vflip(const Image& x);
Mask hflip(const Mask& x);
Mask vflip(const Mask& x);

// --- dataset directories ---------------------------------------------------
// <dir>/A/<id>.ppm, <dir>/B/<id>.ppm, <dir>/label/<id>.pgm

void write_dataset(const std::filesystem::path& dir, const std::vector<BiTemporalSample>& samples);
/// Samples sorted by id. Throws IoError naming the id of any incomplete triple.
std::vector<BiTemporalSample> read_dataset(const std::filesystem::path& dir);
std::string format_id(int index);

// --- batching --------------------------------------------------------------

template <typename T>
struct Batch {
  Tensor<T> t1, t2;  // [N,3,H,W]
  Tensor<T> gt;      // [N,1,H,W]
};

template <typename T>
Batch<T> make_batch(const std::vector<BiTemporalSample>& samples);
template <typename T>
Tensor<T> image_tensor(const Image& image);  // [1,C,H,W]

/// Worker count from ARCD_THREADS (default 1, at least 1).
int thread_budget();
/// Runs fn(i) for i in [0,n) on up to `threads` threads. Work is split by
/// index, so results do not depend on the thread count.
void parallel_for(int n, int threads, const std::function<void(int)>& fn);

}  // namespace arcd

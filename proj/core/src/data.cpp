#include "arcd/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <map>
#include <thread>

#include "arcd/error.hpp"

namespace fs = std::filesystem;

namespace arcd {

void SyntheticSceneSpec::validate() const {
  if (size <= 0 || size % 32 != 0) throw ContractError("synthetic size must be a positive multiple of 32, got " + std::to_string(size));
  if (min_objects < 0 || max_objects < min_objects) throw ContractError("object count range is empty");
  if (change_fraction < 0 || change_fraction > 1) throw ContractError("change_fraction must lie in [0,1]");
  if (noise < 0 || noise > 0.5) throw ContractError("noise amplitude must lie in [0,0.5]");
  if (min_extent < 0 || max_extent < 0 || max_extent > size || (max_extent > 0 && min_extent > max_extent))
    throw ContractError("object extent range must satisfy 0 <= min <= max <= size");
}

namespace {

struct Shape2 {
  bool ellipse;
  int y0, x0, h, w;  // bounding box
  float color[3];
  bool in_t1, in_t2;

  bool covers(int y, int x) const {
    if (y < y0 || y >= y0 + h || x < x0 || x >= x0 + w) return false;
    if (!ellipse) return true;
    const double cy = y0 + (h - 1) / 2.0, cx = x0 + (w - 1) / 2.0;
    const double ry = h / 2.0, rx = w / 2.0;
    const double dy = (y - cy) / ry, dx = (x - cx) / rx;
    return dy * dy + dx * dx <= 1.0;
  }
  bool overlaps(const Shape2& o, int gap) const {
    return !(y0 + h + gap <= o.y0 || o.y0 + o.h + gap <= y0 || x0 + w + gap <= o.x0 || o.x0 + o.w + gap <= x0);
  }
};

void random_color(Rng& rng, float out[3]) {
  for (int c = 0; c < 3; ++c) out[c] = static_cast<float>(rng.uniform(0.1, 0.9));
}

// colours must differ from the background by a clear margin in some channel
void distinct_color(Rng& rng, const float bg[3], float out[3]) {
  for (;;) {
    random_color(rng, out);
    float d = 0;
    for (int c = 0; c < 3; ++c) d = std::max(d, std::abs(out[c] - bg[c]));
    if (d >= 0.3f) return;
  }
}

Image render(int size, const float bg[3], const std::vector<Shape2>& shapes, bool first, double noise, Rng& rng) {
  Image img(3, size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const float* col = bg;
      for (const auto& s : shapes)
        if ((first ? s.in_t1 : s.in_t2) && s.covers(y, x)) {
          col = s.color;
          break;
        }
      for (int c = 0; c < 3; ++c) {
        float v = col[c];
        if (noise > 0) v += static_cast<float>(rng.uniform(-noise, noise));
        // stored on the 8-bit grid so a dataset survives a PPM round trip unchanged
        img.at(c, y, x) = static_cast<float>(std::lround(std::min(1.f, std::max(0.f, v)) * 255.f)) / 255.f;
      }
    }
  return img;
}

}  // namespace

std::string format_id(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04d", index);
  return buf;
}

BiTemporalSample generate_one(const SyntheticSceneSpec& spec, int index) {
  spec.validate();
  Rng rng = Rng::stream(spec.seed, static_cast<std::uint64_t>(index));
  const int n = spec.size;
  float bg[3];
  random_color(rng, bg);

  const int count = static_cast<int>(rng.uniform_int(spec.min_objects, spec.max_objects));
  const int lo = spec.min_extent > 0 ? spec.min_extent : std::max(4, n / 8);
  const int hi = spec.max_extent > 0 ? spec.max_extent : std::max(lo, n / 3);
  std::vector<Shape2> shapes;
  for (int k = 0; k < count; ++k) {
    for (int attempt = 0; attempt < 100; ++attempt) {
      Shape2 s{};
      s.ellipse = rng.bernoulli(0.5);
      s.h = static_cast<int>(rng.uniform_int(lo, hi));
      s.w = static_cast<int>(rng.uniform_int(lo, hi));
      s.y0 = static_cast<int>(rng.uniform_int(0, n - s.h));
      s.x0 = static_cast<int>(rng.uniform_int(0, n - s.w));
      if (std::any_of(shapes.begin(), shapes.end(), [&](const Shape2& o) { return s.overlaps(o, 1); })) continue;
      distinct_color(rng, bg, s.color);
      s.in_t1 = s.in_t2 = true;
      if (rng.bernoulli(spec.change_fraction)) (rng.bernoulli(0.5) ? s.in_t1 : s.in_t2) = false;
      shapes.push_back(s);
      break;
    }
  }

  BiTemporalSample out;
  out.id = format_id(index);
  out.t1 = render(n, bg, shapes, true, spec.noise, rng);
  out.t2 = render(n, bg, shapes, false, spec.noise, rng);
  out.gt = Mask(n, n);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      bool a = false, b = false;
      for (const auto& s : shapes)
        if (s.covers(y, x)) {
          a = s.in_t1;
          b = s.in_t2;
          break;
        }
      out.gt.at(y, x) = a != b;
    }
  return out;
}

std::vector<BiTemporalSample> generate(const SyntheticSceneSpec& spec, int count, int first_id) {
  spec.validate();
  std::vector<BiTemporalSample> out(static_cast<std::size_t>(std::max(0, count)));
  parallel_for(count, thread_budget(), [&](int i) { out[i] = generate_one(spec, first_id + i); });
  return out;
}

// --- tiling ----------------------------------------------------------------

namespace {

Image crop(const Image& x, int y0, int x0, int h, int w) {
  Image out(x.channels, h, w);
  for (int c = 0; c < x.channels; ++c)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) out.at(c, y, xx) = x.at(c, y0 + y, x0 + xx);
  return out;
}

Mask crop(const Mask& m, int y0, int x0, int h, int w) {
  Mask out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out.at(y, x) = m.at(y0 + y, x0 + x);
  return out;
}

void check_consistent(const BiTemporalSample& s) {
  if (s.t1.height != s.t2.height || s.t1.width != s.t2.width || s.gt.height != s.t1.height || s.gt.width != s.t1.width)
    throw DimensionError("sample " + s.id + ": t1, t2 and mask sizes differ");
}

}  // namespace

std::vector<BiTemporalSample> tile(const BiTemporalSample& sample, int patch) {
  check_consistent(sample);
  if (patch <= 0) throw ContractError("tile: patch must be positive");
  if (patch > sample.t1.height || patch > sample.t1.width)
    throw ContractError("tile: patch " + std::to_string(patch) + " exceeds image " + std::to_string(sample.t1.height) +
                        "x" + std::to_string(sample.t1.width));
  std::vector<BiTemporalSample> out;
  const int rows = sample.t1.height / patch, cols = sample.t1.width / patch;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      BiTemporalSample p;
      p.id = sample.id + "_" + std::to_string(r * cols + c);
      p.t1 = crop(sample.t1, r * patch, c * patch, patch, patch);
      p.t2 = crop(sample.t2, r * patch, c * patch, patch, patch);
      p.gt = crop(sample.gt, r * patch, c * patch, patch, patch);
      out.push_back(std::move(p));
    }
  return out;
}

// --- augmentation ----------------------------------------------------------

Image hflip(const Image& x) {
  Image out(x.channels, x.height, x.width);
  for (int c = 0; c < x.channels; ++c)
    for (int y = 0; y < x.height; ++y)
      for (int xx = 0; xx < x.width; ++xx) out.at(c, y, xx) = x.at(c, y, x.width - 1 - xx);
  return out;
}

Image vflip(const Image& x) {
  Image out(x.channels, x.height, x.width);
  for (int c = 0; c < x.channels; ++c)
    for (int y = 0; y < x.height; ++y)
      for (int xx = 0; xx < x.width; ++xx) out.at(c, y, xx) = x.at(c, x.height - 1 - y, xx);
  return out;
}

Mask hflip(const Mask& m) {
  Mask out(m.height, m.width);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) out.at(y, x) = m.at(y, m.width - 1 - x);
  return out;
}

Mask vflip(const Mask& m) {
  Mask out(m.height, m.width);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) out.at(y, x) = m.at(m.height - 1 - y, x);
  return out;
}

BiTemporalSample augment(const BiTemporalSample& sample, const AugmentationPolicy& policy, Rng& rng) {
  check_consistent(sample);
  BiTemporalSample s = sample;
  // draw every decision up front so the stream consumption is fixed
  const bool h = rng.bernoulli(policy.p_hflip);
  const bool v = rng.bernoulli(policy.p_vflip);
  const bool swap = rng.bernoulli(policy.p_temporal_exchange);
  const int size_h = s.t1.height, size_w = s.t1.width;
  const int ch = policy.crop > 0 ? policy.crop : size_h;
  const int cw = policy.crop > 0 ? policy.crop : size_w;
  if (ch > size_h || cw > size_w) throw ContractError("augment: crop " + std::to_string(policy.crop) + " exceeds sample size");
  const int y0 = static_cast<int>(rng.uniform_int(0, size_h - ch));
  const int x0 = static_cast<int>(rng.uniform_int(0, size_w - cw));

  if (h) {
    s.t1 = hflip(s.t1);
    s.t2 = hflip(s.t2);
    s.gt = hflip(s.gt);
  }
  if (v) {
    s.t1 = vflip(s.t1);
    s.t2 = vflip(s.t2);
    s.gt = vflip(s.gt);
  }
  if (ch != size_h || cw != size_w) {
    s.t1 = crop(s.t1, y0, x0, ch, cw);
    s.t2 = crop(s.t2, y0, x0, ch, cw);
    s.gt = crop(s.gt, y0, x0, ch, cw);
  }
  if (swap) std::swap(s.t1, s.t2);
  return s;
}

// --- dataset directories ---------------------------------------------------

void write_dataset(const fs::path& dir, const std::vector<BiTemporalSample>& samples) {
  for (const char* sub : {"A", "B", "label"}) fs::create_directories(dir / sub);
  for (const auto& s : samples) {
    write_image(dir / "A" / (s.id + ".ppm"), s.t1);
    write_image(dir / "B" / (s.id + ".ppm"), s.t2);
    write_mask(dir / "label" / (s.id + ".pgm"), s.gt);
  }
}

std::vector<BiTemporalSample> read_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir / "label")) throw IoError("dataset " + dir.string() + " has no label/ directory");
  std::map<std::string, int> ids;
  for (const auto& e : fs::directory_iterator(dir / "label"))
    if (e.path().extension() == ".pgm") ids[e.path().stem().string()] = 0;
  for (const char* sub : {"A", "B"})
    if (fs::is_directory(dir / sub))
      for (const auto& e : fs::directory_iterator(dir / sub))
        if (e.path().extension() == ".ppm") ids.try_emplace(e.path().stem().string(), 0);
  if (ids.empty()) throw IoError("dataset " + dir.string() + " is empty");

  std::vector<std::string> order;
  for (const auto& [id, _] : ids) {
    for (const auto& p : {dir / "A" / (id + ".ppm"), dir / "B" / (id + ".ppm"), dir / "label" / (id + ".pgm")})
      if (!fs::exists(p)) throw IoError("sample " + id + " is incomplete: missing " + p.string());
    order.push_back(id);
  }
  std::vector<BiTemporalSample> out(order.size());
  parallel_for(static_cast<int>(order.size()), thread_budget(), [&](int i) {
    auto& s = out[i];
    s.id = order[i];
    s.t1 = read_image(dir / "A" / (s.id + ".ppm"));
    s.t2 = read_image(dir / "B" / (s.id + ".ppm"));
    s.gt = read_mask(dir / "label" / (s.id + ".pgm"));
  });
  for (const auto& s : out) check_consistent(s);
  return out;
}

// --- batching --------------------------------------------------------------

template <typename T>
Tensor<T> image_tensor(const Image& image) {
  std::vector<T> v(image.data.begin(), image.data.end());
  return Tensor<T>(Shape{1, image.channels, image.height, image.width}, std::move(v));
}

template <typename T>
Batch<T> make_batch(const std::vector<BiTemporalSample>& samples) {
  if (samples.empty()) throw ContractError("make_batch: no samples");
  const int h = samples[0].t1.height, w = samples[0].t1.width;
  const auto n = static_cast<std::int64_t>(samples.size());
  std::vector<T> a, b, g;
  a.reserve(static_cast<std::size_t>(n) * 3 * h * w);
  b.reserve(a.capacity());
  g.reserve(static_cast<std::size_t>(n) * h * w);
  for (const auto& s : samples) {
    check_consistent(s);
    if (s.t1.height != h || s.t1.width != w || s.t1.channels != 3)
      throw DimensionError("make_batch: sample " + s.id + " differs in size from the first sample");
    a.insert(a.end(), s.t1.data.begin(), s.t1.data.end());
    b.insert(b.end(), s.t2.data.begin(), s.t2.data.end());
    for (auto v : s.gt.data) g.push_back(v ? T(1) : T(0));
  }
  return {Tensor<T>(Shape{n, 3, h, w}, std::move(a)), Tensor<T>(Shape{n, 3, h, w}, std::move(b)),
          Tensor<T>(Shape{n, 1, h, w}, std::move(g))};
}

template Tensor<float> image_tensor<float>(const Image&);
template Tensor<double> image_tensor<double>(const Image&);
template Batch<float> make_batch<float>(const std::vector<BiTemporalSample>&);
template Batch<double> make_batch<double>(const std::vector<BiTemporalSample>&);

// --- threads ---------------------------------------------------------------

int thread_budget() {
  const char* env = std::getenv("ARCD_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) throw ContractError(std::string("ARCD_THREADS must be a positive integer, got '") + env + "'");
  return static_cast<int>(std::min<long>(v, 256));
}

void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  threads = std::max(1, std::min(threads, n));
  if (threads <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
  for (int t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      try {
        for (int i = t; i < n; i += threads) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace arcd

#include "rudd/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <stdexcept>

namespace fs = std::filesystem;

namespace rudd {

namespace {

constexpr int kFamilies = 8;
constexpr int kTints = 3;

constexpr double kTint[kTints][3] = {
    {0.90, 0.30, 0.25},
    {0.30, 0.85, 0.35},
    {0.30, 0.45, 0.90},
};

// Signed distance of one glyph family in centered unit coordinates; negative
// inside. s is the glyph half-size.
double glyph_sdf(int family, double u, double v, double s) {
  const double au = std::fabs(u), av = std::fabs(v);
  const double r = std::hypot(u, v);
  switch (family) {
    case 0:  // horizontal bar
      return std::max(av - 0.30 * s, au - s);
    case 1:  // vertical bar
      return std::max(au - 0.30 * s, av - s);
    case 2:  // disk
      return r - s;
    case 3:  // ring
      return std::fabs(r - s) - 0.30 * s;
    case 4:  // cross
      return std::min(std::max(av - 0.28 * s, au - s), std::max(au - 0.28 * s, av - s));
    case 5: {  // square frame
      const double q = std::max(au, av);
      return std::fabs(q - s) - 0.25 * s;
    }
    case 6:  // diagonal stripe
      return std::max(std::fabs(u + v) * 0.7071 - 0.30 * s, std::fabs(u - v) * 0.7071 - s);
    default: {  // twin dots
      const double d1 = std::hypot(u - 0.55 * s, v) - 0.45 * s;
      const double d2 = std::hypot(u + 0.55 * s, v) - 0.45 * s;
      return std::min(d1, d2);
    }
  }
}

}  // namespace

int toy_class_capacity() { return kFamilies * kTints; }

LabeledImageSet generate_toy(int K, int per_class, int H, int W, uint64_t seed,
                             const ToyOptions& opt) {
  if (K < 2) throw std::invalid_argument("generate_toy: K must be >= 2");
  if (K > toy_class_capacity())
    throw std::invalid_argument("generate_toy: K exceeds " + std::to_string(toy_class_capacity()) +
                                " available glyph/tint combinations");
  if (per_class < 1 || H < 2 || W < 2) throw std::invalid_argument("generate_toy: bad dimensions");

  LabeledImageSet set;
  set.seed = seed;
  set.images = Tensor<double>({K * per_class, H, W, 3});
  const Rng root(seed);
  const double edge = 1.5 / double(std::min(H, W));

  int n = 0;
  for (int c = 0; c < K; ++c) {
    const int family = c % kFamilies;
    const int tint = c / kFamilies;
    for (int i = 0; i < per_class; ++i, ++n) {
      Rng rng = root.split(uint64_t(c) * 1000003ull + uint64_t(i));
      const double j = opt.jitter;
      const double cx = 0.5 + j * rng.uniform(-0.10, 0.10);
      const double cy = 0.5 + j * rng.uniform(-0.10, 0.10);
      const double s = 0.32 * (1.0 + j * rng.uniform(-0.15, 0.15));
      double col[3], bg[3];
      for (int ch = 0; ch < 3; ++ch) col[ch] = kTint[tint][ch] + j * rng.uniform(-0.08, 0.08);
      for (int ch = 0; ch < 3; ++ch) bg[ch] = 0.08 + j * rng.uniform(-0.02, 0.02);

      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const double u = (x + 0.5) / double(W) - cx;
          const double v = (y + 0.5) / double(H) - cy;
          const double d = glyph_sdf(family, u, v, s);
          const double cov = std::clamp(0.5 - d / edge, 0.0, 1.0);
          for (int ch = 0; ch < 3; ++ch) {
            double val = bg[ch] + cov * (col[ch] - bg[ch]);
            if (opt.noise_sigma > 0) val += rng.normal(0, opt.noise_sigma);
            set.images.at4(n, y, x, ch) = std::clamp(val, 0.0, 1.0);
          }
        }
      set.labels.push_back(c);
    }
  }
  return set;
}

// ------------------------------------------------------------------ PNG IO --

namespace {

Tensor<double> read_png_rgb(const std::string& path) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw std::runtime_error("load_images: cannot read " + path + ": " + img.message);
  img.format = PNG_FORMAT_RGB;
  std::vector<uint8_t> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    throw std::runtime_error("load_images: decode failed for " + path + ": " + msg);
  }
  Tensor<double> out({int(img.height), int(img.width), 3});
  for (size_t i = 0; i < out.numel(); ++i) out[i] = double(buf[i]) / 255.0;
  return out;
}

void write_png_rgb(const std::string& path, const Tensor<double>& img) {
  png_image pi;
  std::memset(&pi, 0, sizeof(pi));
  pi.version = PNG_IMAGE_VERSION;
  pi.width = png_uint_32(img.shape[1]);
  pi.height = png_uint_32(img.shape[0]);
  pi.format = PNG_FORMAT_RGB;
  std::vector<uint8_t> buf(img.numel());
  for (size_t i = 0; i < img.numel(); ++i)
    buf[i] = uint8_t(std::lround(std::clamp(img[i], 0.0, 1.0) * 255.0));
  if (!png_image_write_to_file(&pi, path.c_str(), 0, buf.data(), 0, nullptr))
    throw std::runtime_error("export_images: cannot write " + path + ": " + pi.message);
}

}  // namespace

LabeledImageSet load_images(const std::string& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("load_images: not a directory: " + dir);
  std::vector<fs::path> classes;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) classes.push_back(e.path());
  std::sort(classes.begin(), classes.end());
  if (classes.empty()) throw std::runtime_error("load_images: no class subdirectories in " + dir);

  LabeledImageSet set;
  std::vector<Tensor<double>> imgs;
  int H = -1, W = -1;
  for (size_t c = 0; c < classes.size(); ++c) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(classes[c]))
      if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw std::runtime_error("load_images: empty class directory " + classes[c].string());
    for (const auto& f : files) {
      Tensor<double> img = read_png_rgb(f.string());
      if (H < 0) {
        H = img.shape[0];
        W = img.shape[1];
      } else if (img.shape[0] != H || img.shape[1] != W) {
        throw std::runtime_error("load_images: inconsistent dimensions at " + f.string());
      }
      imgs.push_back(std::move(img));
      set.labels.push_back(int(c));
    }
  }
  set.images = Tensor<double>({int(imgs.size()), H, W, 3});
  for (size_t n = 0; n < imgs.size(); ++n)
    std::copy(imgs[n].data.begin(), imgs[n].data.end(),
              set.images.data.begin() + long(n * imgs[n].numel()));
  return set;
}

void export_images(const LabeledImageSet& set, const std::string& dir) {
  fs::create_directories(dir);
  const int H = set.H(), W = set.W();
  std::vector<int> counter(size_t(set.K()), 0);
  for (int n = 0; n < set.N(); ++n) {
    const int c = set.labels[size_t(n)];
    char sub[32], name[32];
    std::snprintf(sub, sizeof(sub), "class_%02d", c);
    std::snprintf(name, sizeof(name), "img_%04d.png", counter[size_t(c)]++);
    fs::create_directories(fs::path(dir) / sub);
    Tensor<double> img({H, W, 3});
    std::copy(set.images.data.begin() + long(size_t(n) * img.numel()),
              set.images.data.begin() + long(size_t(n + 1) * img.numel()), img.data.begin());
    write_png_rgb((fs::path(dir) / sub / name).string(), img);
  }
}

}  // namespace rudd

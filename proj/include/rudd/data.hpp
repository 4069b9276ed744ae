#pragma once

#include <string>
#include <vector>

#include "rudd/rng.hpp"
#include "rudd/tensor.hpp"

namespace rudd {

struct LabeledImageSet {
  Tensor<double> images;  // N x H x W x 3, values in [0,1]
  std::vector<int> labels;
  std::string split = "train";
  uint64_t seed = 0;

  int N() const { return images.shape.empty() ? 0 : images.shape[0]; }
  int H() const { return images.shape[1]; }
  int W() const { return images.shape[2]; }
  int K() const {
    int k = 0;
    for (int l : labels) k = std::max(k, l + 1);
    return k;
  }
};

struct ToyOptions {
  double noise_sigma = 0.05;
  double jitter = 1.0;  // 0 disables position/scale/color jitter
};

// K procedurally rendered glyph families (bars, disks, crosses, rings, ...)
// times three base tints, jittered per sample, deterministic by seed.
LabeledImageSet generate_toy(int K, int per_class, int H, int W, uint64_t seed,
                             const ToyOptions& opt = {});

int toy_class_capacity();

// PNG directory layout: one subdirectory per class, files sorted by name.
LabeledImageSet load_images(const std::string& dir);
void export_images(const LabeledImageSet& set, const std::string& dir);

}  // namespace rudd

#pragma once

// Procedural registered pairs: modality A is a smooth blob field, modality B
// is A's edge map plus Gaussian noise. Used by the toy experiments.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include "daefuse/image.hpp"
#include "daefuse/nn.hpp"

namespace daefuse::synthetic {

struct Blob {
  double row = 0, col = 0, radius = 1, amplitude = 0;
};

struct BlobScene {
  double background = 0.1;
  std::vector<Blob> blobs;

  template <class Rng>
  static BlobScene random(int height, int width, int count, Rng& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    BlobScene s;
    s.background = 0.05 + 0.15 * u(rng);
    for (int i = 0; i < count; ++i) {
      Blob b;
      b.row = u(rng) * height;
      b.col = u(rng) * width;
      b.radius = (0.1 + 0.2 * u(rng)) * std::min(height, width);
      b.amplitude = 0.3 + 0.6 * u(rng);
      s.blobs.push_back(b);
    }
    return s;
  }

  /// Renders with the scene translated by (dy, dx) pixels.
  Image render(int height, int width, double dy = 0.0, double dx = 0.0) const {
    std::vector<double> px(static_cast<std::size_t>(height) * width);
    for (int r = 0; r < height; ++r)
      for (int c = 0; c < width; ++c) {
        double v = background;
        for (const Blob& b : blobs) {
          const double y = r - (b.row + dy), x = c - (b.col + dx);
          v += b.amplitude * std::exp(-(x * x + y * y) / (2 * b.radius * b.radius));
        }
        px[static_cast<std::size_t>(r) * width + c] = std::clamp(v, 0.0, 1.0);
      }
    return Image(height, width, std::move(px));
  }
};

/// Sobel magnitude of `a`, scaled to peak 1, plus N(0, noise_sd) noise.
template <class Rng>
Image edges_plus_noise(const Image& a, double noise_sd, Rng& rng) {
  const int h = a.height(), w = a.width();
  std::vector<double> g(a.size());
  auto at = [&](int r, int c) { return a(reflect_index(r, h), reflect_index(c, w)); };
  double peak = 0.0;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const double gx = at(r - 1, c + 1) + 2 * at(r, c + 1) + at(r + 1, c + 1) - at(r - 1, c - 1) -
                        2 * at(r, c - 1) - at(r + 1, c - 1);
      const double gy = at(r + 1, c - 1) + 2 * at(r + 1, c) + at(r + 1, c + 1) - at(r - 1, c - 1) -
                        2 * at(r - 1, c) - at(r - 1, c + 1);
      peak = std::max(peak, g[static_cast<std::size_t>(r) * w + c] = std::sqrt(gx * gx + gy * gy));
    }
  std::normal_distribution<double> noise(0.0, noise_sd);
  for (double& v : g) v = std::clamp((peak > 0 ? v / peak : 0.0) + (noise_sd > 0 ? noise(rng) : 0.0), 0.0, 1.0);
  return Image(h, w, std::move(g));
}

struct PairSpec {
  int size = 32;
  int blobs = 4;
  double noise_sd = 0.03;
};

/// `count` independent pairs named pair_000.png, pair_001.png, ...
inline std::vector<ImagePair> blob_pairs(int count, std::uint64_t seed, const PairSpec& spec = {}) {
  std::vector<ImagePair> out;
  for (int i = 0; i < count; ++i) {
    std::mt19937_64 rng(detail::mix_seed(seed, "pair/" + std::to_string(i)));
    Image a = BlobScene::random(spec.size, spec.size, spec.blobs, rng).render(spec.size, spec.size);
    Image b = edges_plus_noise(a, spec.noise_sd, rng);
    char name[32];
    std::snprintf(name, sizeof name, "pair_%03d.png", i);
    a.set_source_id(name);
    b.set_source_id(name);
    out.emplace_back(std::move(a), std::move(b));
  }
  return out;
}

/// One scene translated by `shift` pixels per frame (horizontally); each
/// frame's B noise is drawn independently.
inline VideoSequence translating_video(int frames, std::uint64_t seed, double shift, const PairSpec& spec = {}) {
  std::mt19937_64 scene_rng(detail::mix_seed(seed, "scene"));
  const BlobScene scene = BlobScene::random(spec.size, spec.size, spec.blobs, scene_rng);
  VideoSequence seq;
  for (int t = 0; t < frames; ++t) {
    std::mt19937_64 rng(detail::mix_seed(seed, "frame/" + std::to_string(t)));
    Image a = scene.render(spec.size, spec.size, 0.0, shift * t);
    Image b = edges_plus_noise(a, spec.noise_sd, rng);
    char name[32];
    std::snprintf(name, sizeof name, "%06d.png", t);
    a.set_source_id(name);
    b.set_source_id(name);
    seq.frames.emplace_back(std::move(a), std::move(b));
  }
  return seq;
}

/// The same pair repeated `frames` times.
inline VideoSequence static_video(int frames, std::uint64_t seed, const PairSpec& spec = {}) {
  const ImagePair pair = blob_pairs(1, seed, spec).front();
  VideoSequence seq;
  seq.frames.assign(static_cast<std::size_t>(frames), pair);
  return seq;
}

}  // namespace daefuse::synthetic

#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "daefuse/error.hpp"
#include "daefuse/tensor.hpp"

namespace daefuse {

/// Single-channel intensity grid, row-major, every pixel in [0,1].
class Image {
 public:
  Image() = default;

  Image(int height, int width, std::vector<double> pixels, std::string source_id = {})
      : height_(height), width_(width), pixels_(std::move(pixels)), source_id_(std::move(source_id)) {
    if (height_ < 1 || width_ < 1) {
      fail(ErrorKind::InvalidImage, "image must have positive area, got " +
                                        std::to_string(height_) + "x" + std::to_string(width_));
    }
    if (pixels_.size() != static_cast<std::size_t>(height_) * width_) {
      fail(ErrorKind::InvalidImage, "pixel count does not match image size");
    }
    for (double p : pixels_) {
      if (!(p >= 0.0 && p <= 1.0)) {
        fail(ErrorKind::InvalidImage, "pixel value outside [0,1] in '" + source_id_ + "'");
      }
    }
  }

  static Image filled(int height, int width, double value, std::string source_id = {}) {
    return Image(height, width,
                 std::vector<double>(static_cast<std::size_t>(height) * width, value),
                 std::move(source_id));
  }

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return pixels_.size(); }
  std::span<const double> pixels() const { return pixels_; }
  const std::string& source_id() const { return source_id_; }
  void set_source_id(std::string id) { source_id_ = std::move(id); }

  double operator()(int row, int col) const {
    return pixels_[static_cast<std::size_t>(row) * width_ + col];
  }

  bool same_size(const Image& other) const {
    return height_ == other.height_ && width_ == other.width_;
  }

  Image crop(int top, int left, int height, int width) const {
    if (top < 0 || left < 0 || top + height > height_ || left + width > width_) {
      fail(ErrorKind::CropError, "crop window exceeds image bounds");
    }
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(height) * width);
    for (int r = 0; r < height; ++r) {
      const auto row = pixels_.begin() + static_cast<std::ptrdiff_t>((top + r) * width_ + left);
      out.insert(out.end(), row, row + width);
    }
    return Image(height, width, std::move(out), source_id_);
  }

  /// Reflect-pads to at least (min_height, min_width), split evenly across sides.
  Image pad_reflect_to(int min_height, int min_width) const {
    const int ph = std::max(0, min_height - height_);
    const int pw = std::max(0, min_width - width_);
    if (ph == 0 && pw == 0) return *this;
    const int top = ph / 2, left = pw / 2;
    const int h = height_ + ph, w = width_ + pw;
    std::vector<double> out(static_cast<std::size_t>(h) * w);
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c)
        out[static_cast<std::size_t>(r) * w + c] =
            (*this)(reflect_index(r - top, height_), reflect_index(c - left, width_));
    return Image(h, w, std::move(out), source_id_);
  }

  friend bool operator==(const Image& a, const Image& b) {
    return a.height_ == b.height_ && a.width_ == b.width_ && a.pixels_ == b.pixels_;
  }

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<double> pixels_;
  std::string source_id_;
};

/// Two pixel-aligned views of the same scene.
struct ImagePair {
  Image a;
  Image b;

  ImagePair() = default;
  ImagePair(Image modality_a, Image modality_b) : a(std::move(modality_a)), b(std::move(modality_b)) {
    if (!a.same_size(b)) {
      fail(ErrorKind::RegistrationError,
           "pair '" + a.source_id() + "' is not registered: " + std::to_string(a.height()) + "x" +
               std::to_string(a.width()) + " vs " + std::to_string(b.height()) + "x" +
               std::to_string(b.width()));
    }
  }

  int height() const { return a.height(); }
  int width() const { return a.width(); }
};

struct VideoSequence {
  std::vector<ImagePair> frames;
  int frame_index_base = 0;

  std::size_t size() const { return frames.size(); }
};

struct PatchBatch {
  std::vector<Image> patches_a;
  std::vector<Image> patches_b;
  std::vector<Image> prev_a;  // previous video frame, same crop; empty for stills
  std::vector<Image> prev_b;

  std::size_t size() const { return patches_a.size(); }
};

/// Stacks equally sized images into an [N,1,H,W] tensor.
inline Tensor to_tensor(std::span<const Image> images) {
  if (images.empty()) fail(ErrorKind::ShapeError, "cannot stack zero images");
  const int h = images[0].height(), w = images[0].width();
  std::vector<double> values;
  values.reserve(images.size() * static_cast<std::size_t>(h) * w);
  for (const Image& img : images) {
    if (img.height() != h || img.width() != w) {
      fail(ErrorKind::ShapeError, "cannot stack images of different sizes");
    }
    values.insert(values.end(), img.pixels().begin(), img.pixels().end());
  }
  return Tensor({static_cast<int>(images.size()), 1, h, w}, std::move(values));
}

inline Tensor to_tensor(const Image& image) { return to_tensor(std::span<const Image>(&image, 1)); }

/// Extracts item `n` of an [N,1,H,W] tensor. Values are clamped into [0,1]
/// to absorb floating-point overshoot.
inline Image to_image(const Tensor& t, int n = 0, std::string source_id = {}) {
  const Dims d = t.dims();
  if (d[1] != 1) fail(ErrorKind::ShapeError, "to_image expects a single channel, got " + to_string(d));
  const std::size_t plane = static_cast<std::size_t>(d[2]) * d[3];
  const auto v = t.values().subspan(static_cast<std::size_t>(n) * plane, plane);
  std::vector<double> pixels(plane);
  for (std::size_t i = 0; i < plane; ++i) {
    if (!std::isfinite(v[i])) fail(ErrorKind::NumericalError, "non-finite pixel in network output");
    pixels[i] = std::clamp(v[i], 0.0, 1.0);
  }
  return Image(d[2], d[3], std::move(pixels), std::move(source_id));
}

}  // namespace daefuse

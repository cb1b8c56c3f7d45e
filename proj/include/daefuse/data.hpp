#pragma once

// Raster IO and dataset assembly. Decoding goes through OpenCV's imgcodecs;
// everything after decoding is plain Image values.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "daefuse/error.hpp"
#include "daefuse/image.hpp"

namespace daefuse {

namespace fs = std::filesystem;

inline bool is_supported_raster(const fs::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext == ".png" || ext == ".tif" || ext == ".tiff" || ext == ".bmp";
}

/// Decodes an 8/16-bit grayscale or colour raster into [0,1] luminance
/// (BT.601 weights for colour input).
inline Image load_image(const fs::path& path) {
  if (!fs::exists(path)) fail(ErrorKind::NotFound, "no such file: " + path.string());
  if (!is_supported_raster(path)) {
    fail(ErrorKind::UnsupportedFormat, "unsupported raster extension: " + path.string());
  }
  const cv::Mat raw = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (raw.empty()) {
    // imread also refuses zero-area rasters; the file exists, so blame the content.
    fail(ErrorKind::UnsupportedFormat, "could not decode raster: " + path.string());
  }
  if (raw.rows < 1 || raw.cols < 1) fail(ErrorKind::InvalidImage, "zero-area image: " + path.string());

  double scale = 0.0;
  switch (raw.depth()) {
    case CV_8U: scale = 255.0; break;
    case CV_16U: scale = 65535.0; break;
    default: fail(ErrorKind::UnsupportedFormat, "only 8- and 16-bit rasters are supported: " + path.string());
  }

  cv::Mat values;
  raw.convertTo(values, CV_64F);
  const int channels = values.channels();
  std::vector<double> pixels(static_cast<std::size_t>(raw.rows) * raw.cols);
  for (int r = 0; r < values.rows; ++r) {
    const double* row = values.ptr<double>(r);
    for (int c = 0; c < values.cols; ++c) {
      const double* px = row + static_cast<std::ptrdiff_t>(c) * channels;
      double v = 0.0;
      if (channels >= 3) {
        // OpenCV stores colour as BGR(A)
        v = 0.299 * px[2] + 0.587 * px[1] + 0.114 * px[0];
      } else {
        v = px[0];
      }
      pixels[static_cast<std::size_t>(r) * raw.cols + c] = std::clamp(v / scale, 0.0, 1.0);
    }
  }
  return Image(raw.rows, raw.cols, std::move(pixels), path.filename().string());
}

/// Writes an 8-bit (default) or 16-bit grayscale raster.
inline void save_image(const fs::path& path, const Image& image, int bit_depth = 8) {
  if (bit_depth != 8 && bit_depth != 16) fail(ErrorKind::UnsupportedFormat, "bit depth must be 8 or 16");
  const double scale = bit_depth == 8 ? 255.0 : 65535.0;
  cv::Mat out(image.height(), image.width(), bit_depth == 8 ? CV_8UC1 : CV_16UC1);
  for (int r = 0; r < image.height(); ++r)
    for (int c = 0; c < image.width(); ++c) {
      const double v = std::round(image(r, c) * scale);
      if (bit_depth == 8) {
        out.at<std::uint8_t>(r, c) = static_cast<std::uint8_t>(v);
      } else {
        out.at<std::uint16_t>(r, c) = static_cast<std::uint16_t>(v);
      }
    }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), out)) fail(ErrorKind::IOError, "failed to write " + path.string());
}

/// Supported raster files in `dir`, sorted by filename.
inline std::vector<fs::path> list_rasters(const fs::path& dir) {
  if (!fs::is_directory(dir)) fail(ErrorKind::NotFound, "no such directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && is_supported_raster(entry.path())) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end(),
            [](const fs::path& x, const fs::path& y) { return x.filename().string() < y.filename().string(); });
  return files;
}

/// Pairs `a_dir/NAME` with `b_dir/NAME`, sorted lexicographically by NAME.
inline std::vector<ImagePair> load_pairs(const fs::path& a_dir, const fs::path& b_dir) {
  const auto files_a = list_rasters(a_dir);
  const auto files_b = list_rasters(b_dir);
  std::map<std::string, fs::path> by_name_b;
  for (const auto& f : files_b) by_name_b[f.filename().string()] = f;
  if (files_a.empty() && files_b.empty()) fail(ErrorKind::EmptyDataset, "no rasters in " + a_dir.string());

  std::vector<ImagePair> pairs;
  for (const auto& f : files_a) {
    const std::string name = f.filename().string();
    const auto it = by_name_b.find(name);
    if (it == by_name_b.end()) {
      fail(ErrorKind::PairingError, "no counterpart for \"" + name + "\" in " + b_dir.string());
    }
    Image ia = load_image(f);
    Image ib = load_image(it->second);
    if (!ia.same_size(ib)) {
      fail(ErrorKind::RegistrationError, "pair \"" + name + "\" has mismatched sizes");
    }
    pairs.emplace_back(std::move(ia), std::move(ib));
    by_name_b.erase(it);
  }
  if (!by_name_b.empty()) {
    fail(ErrorKind::PairingError,
         "no counterpart for \"" + by_name_b.begin()->first + "\" in " + a_dir.string());
  }
  return pairs;
}

/// Dataset layout: `<root>/a/*` and `<root>/b/*` with identical filenames.
inline std::vector<ImagePair> load_pair_dataset(const fs::path& root) {
  return load_pairs(root / "a", root / "b");
}

/// Crops both modalities at one shared, uniformly drawn offset.
template <class Rng>
std::pair<Image, Image> random_crop_pair(const ImagePair& pair, int crop_size, Rng& rng) {
  if (crop_size < 1 || pair.height() < crop_size || pair.width() < crop_size) {
    fail(ErrorKind::CropError, "image " + std::to_string(pair.height()) + "x" +
                                   std::to_string(pair.width()) + " is smaller than crop " +
                                   std::to_string(crop_size));
  }
  std::uniform_int_distribution<int> rows(0, pair.height() - crop_size);
  std::uniform_int_distribution<int> cols(0, pair.width() - crop_size);
  const int top = rows(rng);
  const int left = cols(rng);
  return {pair.a.crop(top, left, crop_size, crop_size), pair.b.crop(top, left, crop_size, crop_size)};
}

inline ImagePair pad_pair_to(const ImagePair& pair, int size) {
  if (pair.height() >= size && pair.width() >= size) return pair;
  return ImagePair(pair.a.pad_reflect_to(size, size), pair.b.pad_reflect_to(size, size));
}

struct BatchSpec {
  int crop_size = 128;
  int batch_size = 16;
};

/// Training items. For video data each pair may carry its predecessor frame
/// so that phase two can form a temporal term on identically cropped inputs.
struct TrainingSet {
  std::vector<ImagePair> pairs;
  std::vector<ImagePair> predecessors;  // empty, or one per pair

  bool temporal() const { return !predecessors.empty(); }
  std::size_t size() const { return pairs.size(); }

  static TrainingSet from_pairs(std::vector<ImagePair> pairs) { return {std::move(pairs), {}}; }

  /// Frames 1..n-1, each paired with the frame before it.
  static TrainingSet from_video(const VideoSequence& seq) {
    if (seq.size() < 2) fail(ErrorKind::EmptyDataset, "a training video needs at least two frames");
    TrainingSet set;
    for (std::size_t i = 1; i < seq.size(); ++i) {
      set.pairs.push_back(seq.frames[i]);
      set.predecessors.push_back(seq.frames[i - 1]);
    }
    return set;
  }
};

/// One epoch of shuffled, cropped batches; the last batch may be short.
/// Predecessor frames are padded and cropped exactly like their successors.
template <class Rng>
std::vector<PatchBatch> make_batches(const TrainingSet& set, const BatchSpec& spec, Rng& rng) {
  if (set.pairs.empty()) fail(ErrorKind::EmptyDataset, "cannot batch an empty dataset");
  if (spec.batch_size < 1) fail(ErrorKind::ConfigError, "batch_size must be >= 1");
  if (set.temporal() && set.predecessors.size() != set.pairs.size()) {
    fail(ErrorKind::PairingError, "every training pair needs a predecessor frame");
  }
  std::vector<std::size_t> order(set.pairs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<PatchBatch> batches;
  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(spec.batch_size)) {
    PatchBatch batch;
    const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(spec.batch_size));
    for (std::size_t i = start; i < end; ++i) {
      const ImagePair padded = pad_pair_to(set.pairs[order[i]], spec.crop_size);
      if (padded.height() < spec.crop_size || padded.width() < spec.crop_size || spec.crop_size < 1) {
        fail(ErrorKind::CropError, "cannot crop " + std::to_string(spec.crop_size) + " pixels");
      }
      std::uniform_int_distribution<int> rows(0, padded.height() - spec.crop_size);
      std::uniform_int_distribution<int> cols(0, padded.width() - spec.crop_size);
      const int top = rows(rng);
      const int left = cols(rng);
      const int n = spec.crop_size;
      batch.patches_a.push_back(padded.a.crop(top, left, n, n));
      batch.patches_b.push_back(padded.b.crop(top, left, n, n));
      if (set.temporal()) {
        const ImagePair prev = pad_pair_to(set.predecessors[order[i]], spec.crop_size);
        if (!prev.a.same_size(padded.a)) fail(ErrorKind::RegistrationError, "predecessor frame differs in size");
        batch.prev_a.push_back(prev.a.crop(top, left, n, n));
        batch.prev_b.push_back(prev.b.crop(top, left, n, n));
      }
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

template <class Rng>
std::vector<PatchBatch> make_batches(const std::vector<ImagePair>& pairs, const BatchSpec& spec, Rng& rng) {
  return make_batches(TrainingSet::from_pairs(pairs), spec, rng);
}

/// Frames are ordered by sorted filename in each directory.
inline VideoSequence load_video_sequence(const fs::path& root_a, const fs::path& root_b) {
  const auto files_a = list_rasters(root_a);
  const auto files_b = list_rasters(root_b);
  if (files_a.empty() && files_b.empty()) {
    fail(ErrorKind::EmptyDataset, "no frames in " + root_a.string() + " / " + root_b.string());
  }
  if (files_a.size() != files_b.size()) {
    fail(ErrorKind::PairingError, "frame count mismatch: " + std::to_string(files_a.size()) + " vs " +
                                      std::to_string(files_b.size()));
  }
  VideoSequence seq;
  const std::string first_stem = files_a.front().stem().string();
  if (!first_stem.empty() && std::all_of(first_stem.begin(), first_stem.end(),
                                         [](unsigned char c) { return std::isdigit(c) != 0; })) {
    seq.frame_index_base = std::stoi(first_stem);
  }
  for (std::size_t i = 0; i < files_a.size(); ++i) {
    Image fa = load_image(files_a[i]);
    Image fb = load_image(files_b[i]);
    const auto& ref = seq.frames.empty() ? fa : seq.frames.front().a;
    if (!fa.same_size(fb) || !fa.same_size(ref)) {
      fail(ErrorKind::RegistrationError, "frame " + std::to_string(seq.frame_index_base + static_cast<int>(i)) + " (" +
                                             files_a[i].filename().string() +
                                             ") differs in size from the sequence");
    }
    seq.frames.emplace_back(std::move(fa), std::move(fb));
  }
  return seq;
}

}  // namespace daefuse

#pragma once

// Unsupervised fusion-quality metrics on [0,1] images.
//
// Pinned variants (also written into every report header):
//   EN    256-bin histogram, bin = round(255 p), log2
//   SD    population standard deviation x 255
//   SF    RMS of first differences per axis x 255, sqrt(RF^2 + CF^2)
//   MI    MI(F;A) + MI(F;B), 256x256 joint histograms, log2
//   SCD   CC(F-B, A) + CC(F-A, B); a degenerate term scores 0
//   VIF   pixel-domain, 4 scales, Gaussian windows N = 2^(5-s)+1, sd N/5,
//         'valid' filtering, sigma_n^2 = 2 on the 0-255 scale,
//         mean of VIF(A->F) and VIF(B->F)
//   Qabf  Sobel strength/orientation, sigmoid preservation with
//         k_g = -15, d_g = 0.5, k_a = -22, d_a = 0.8, each scaled to reach
//         1 at perfect transfer; weights = source strength (L = 1)
//   SSIM  11x11 Gaussian window (sd 1.5), 'valid', C1 = 1e-4, C2 = 9e-4;
//         reports use the mean of SSIM(F,A) and SSIM(F,B)

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "daefuse/config.hpp"
#include "daefuse/data.hpp"
#include "daefuse/error.hpp"
#include "daefuse/image.hpp"

namespace daefuse {

namespace detail {

inline void require_same_size(const Image& x, const Image& y, const char* what) {
  if (!x.same_size(y)) {
    fail(ErrorKind::ShapeError, std::string(what) + ": images differ in size (" + std::to_string(x.height()) + "x" +
                                    std::to_string(x.width()) + " vs " + std::to_string(y.height()) + "x" +
                                    std::to_string(y.width()) + ")");
  }
}

inline int intensity_bin(double p) { return static_cast<int>(std::lround(p * 255.0)); }

inline double entropy_of(const std::vector<double>& counts, double total) {
  double h = 0.0;
  for (double c : counts) {
    if (c > 0.0) {
      const double p = c / total;
      h -= p * std::log2(p);
    }
  }
  return h;
}

inline double mutual_information_pair(const Image& x, const Image& y) {
  std::vector<double> joint(256 * 256, 0.0), px(256, 0.0), py(256, 0.0);
  const auto xv = x.pixels();
  const auto yv = y.pixels();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const int bx = intensity_bin(xv[i]), by = intensity_bin(yv[i]);
    joint[static_cast<std::size_t>(bx) * 256 + by] += 1.0;
    px[bx] += 1.0;
    py[by] += 1.0;
  }
  const double n = static_cast<double>(xv.size());
  double mi = 0.0;
  for (int i = 0; i < 256; ++i) {
    if (px[i] == 0.0) continue;
    for (int j = 0; j < 256; ++j) {
      const double c = joint[static_cast<std::size_t>(i) * 256 + j];
      if (c > 0.0) mi += c / n * std::log2(c * n / (px[i] * py[j]));
    }
  }
  return mi;
}

// Pearson correlation; nullopt when either side is constant.
inline std::optional<double> pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 1e-24 || syy <= 1e-24) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// Row-major double plane used by the windowed metrics.
struct Plane {
  int h = 0, w = 0;
  std::vector<double> v;

  double& operator()(int r, int c) { return v[static_cast<std::size_t>(r) * w + c]; }
  double operator()(int r, int c) const { return v[static_cast<std::size_t>(r) * w + c]; }
};

inline Plane plane_of(const Image& img, double scale) {
  Plane p{img.height(), img.width(), {}};
  p.v.reserve(img.size());
  for (double x : img.pixels()) p.v.push_back(x * scale);
  return p;
}

inline Plane multiply(const Plane& a, const Plane& b) {
  Plane out = a;
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] *= b.v[i];
  return out;
}

inline std::vector<double> gaussian_window_1d(int n, double sd) {
  std::vector<double> k(static_cast<std::size_t>(n));
  const double c = (n - 1) / 2.0;
  double total = 0.0;
  for (int i = 0; i < n; ++i) total += (k[static_cast<std::size_t>(i)] = std::exp(-((i - c) * (i - c)) / (2 * sd * sd)));
  for (double& x : k) x /= total;
  return k;
}

// 'valid' correlation with the separable window k (x) k.
inline Plane filter_valid(const Plane& in, const std::vector<double>& k) {
  const int n = static_cast<int>(k.size());
  Plane rows{in.h, in.w - n + 1, {}};
  rows.v.assign(static_cast<std::size_t>(rows.h) * rows.w, 0.0);
  for (int r = 0; r < rows.h; ++r)
    for (int c = 0; c < rows.w; ++c) {
      double acc = 0.0;
      for (int i = 0; i < n; ++i) acc += k[static_cast<std::size_t>(i)] * in(r, c + i);
      rows(r, c) = acc;
    }
  Plane out{in.h - n + 1, rows.w, {}};
  out.v.assign(static_cast<std::size_t>(out.h) * out.w, 0.0);
  for (int r = 0; r < out.h; ++r)
    for (int c = 0; c < out.w; ++c) {
      double acc = 0.0;
      for (int i = 0; i < n; ++i) acc += k[static_cast<std::size_t>(i)] * rows(r + i, c);
      out(r, c) = acc;
    }
  return out;
}

inline Plane downsample2(const Plane& in) {
  Plane out{(in.h + 1) / 2, (in.w + 1) / 2, {}};
  out.v.reserve(static_cast<std::size_t>(out.h) * out.w);
  for (int r = 0; r < in.h; r += 2)
    for (int c = 0; c < in.w; c += 2) out.v.push_back(in(r, c));
  return out;
}

inline int vif_window(int scale) { return (1 << (5 - scale)) + 1; }

// Smallest side length accepted by the four-scale VIF.
inline bool vif_fits(int side) {
  for (int s = 1; s <= 4; ++s) {
    const int n = vif_window(s);
    if (s > 1) {
      side -= n - 1;
      if (side < 1) return false;
      side = (side + 1) / 2;
    }
    if (side < n) return false;
  }
  return true;
}

// Information ratio of `dist` against `ref`, both on the 0-255 scale.
inline double vif_single(const Plane& ref_in, const Plane& dist_in) {
  constexpr double sigma_nsq = 2.0;
  constexpr double tiny = 1e-10;
  Plane ref = ref_in, dist = dist_in;
  double num = 0.0, den = 0.0;
  for (int s = 1; s <= 4; ++s) {
    const int n = vif_window(s);
    const auto win = gaussian_window_1d(n, n / 5.0);
    if (s > 1) {
      ref = downsample2(filter_valid(ref, win));
      dist = downsample2(filter_valid(dist, win));
    }
    const Plane mu1 = filter_valid(ref, win);
    const Plane mu2 = filter_valid(dist, win);
    const Plane e11 = filter_valid(multiply(ref, ref), win);
    const Plane e22 = filter_valid(multiply(dist, dist), win);
    const Plane e12 = filter_valid(multiply(ref, dist), win);
    for (std::size_t i = 0; i < mu1.v.size(); ++i) {
      double s1 = std::max(0.0, e11.v[i] - mu1.v[i] * mu1.v[i]);
      const double s2 = std::max(0.0, e22.v[i] - mu2.v[i] * mu2.v[i]);
      const double s12 = e12.v[i] - mu1.v[i] * mu2.v[i];
      double g = s12 / (s1 + tiny);
      double sv = s2 - g * s12;
      if (s1 < tiny) {
        g = 0.0;
        sv = s2;
        s1 = 0.0;
      }
      if (s2 < tiny) {
        g = 0.0;
        sv = 0.0;
      }
      if (g < 0.0) {
        sv = s2;
        g = 0.0;
      }
      sv = std::max(sv, tiny);
      num += std::log10(1.0 + g * g * s1 / (sv + sigma_nsq));
      den += std::log10(1.0 + s1 / sigma_nsq);
    }
  }
  if (den <= 0.0) fail(ErrorKind::DegenerateInput, "VIF reference carries no information (constant image)");
  return num / den;
}

struct EdgeMaps {
  std::vector<double> strength;
  std::vector<double> orientation;
};

inline EdgeMaps sobel_edges(const Image& img) {
  const int h = img.height(), w = img.width();
  EdgeMaps e;
  e.strength.resize(img.size());
  e.orientation.resize(img.size());
  auto at = [&](int r, int c) { return img(reflect_index(r, h), reflect_index(c, w)); };
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const double gx = (at(r - 1, c + 1) + 2 * at(r, c + 1) + at(r + 1, c + 1)) -
                        (at(r - 1, c - 1) + 2 * at(r, c - 1) + at(r + 1, c - 1));
      const double gy = (at(r + 1, c - 1) + 2 * at(r + 1, c) + at(r + 1, c + 1)) -
                        (at(r - 1, c - 1) + 2 * at(r - 1, c) + at(r - 1, c + 1));
      const std::size_t i = static_cast<std::size_t>(r) * w + c;
      e.strength[i] = std::sqrt(gx * gx + gy * gy);
      e.orientation[i] = gx == 0.0 ? std::numbers::pi / 2 : std::atan(gy / gx);
    }
  return e;
}

// Edge preservation of `src` in `fused` per pixel.
inline double edge_preservation(double g_src, double a_src, double g_f, double a_f) {
  constexpr double kg = -15.0, dg = 0.5, ka = -22.0, da = 0.8;
  const double hi = std::max(g_src, g_f);
  const double g_ratio = hi == 0.0 ? 1.0 : std::min(g_src, g_f) / hi;
  const double a_ratio = 1.0 - std::abs(a_src - a_f) / (std::numbers::pi / 2);
  const double qg = (1.0 + std::exp(kg * (1.0 - dg))) / (1.0 + std::exp(kg * (g_ratio - dg)));
  const double qa = (1.0 + std::exp(ka * (1.0 - da))) / (1.0 + std::exp(ka * (a_ratio - da)));
  return qg * qa;
}

}  // namespace detail

/// Shannon entropy (bits) of the 256-bin intensity histogram.
inline double entropy(const Image& img) {
  std::vector<double> counts(256, 0.0);
  for (double p : img.pixels()) counts[static_cast<std::size_t>(detail::intensity_bin(p))] += 1.0;
  return detail::entropy_of(counts, static_cast<double>(img.size()));
}

/// Population standard deviation on the 0-255 scale.
inline double std_dev(const Image& img) {
  double mu = 0.0;
  for (double p : img.pixels()) mu += p;
  mu /= static_cast<double>(img.size());
  double var = 0.0;
  for (double p : img.pixels()) var += (p - mu) * (p - mu);
  return 255.0 * std::sqrt(var / static_cast<double>(img.size()));
}

/// sqrt(RF^2 + CF^2) on the 0-255 scale; RF from horizontal differences.
inline double spatial_frequency(const Image& img) {
  const int h = img.height(), w = img.width();
  if (h < 2 || w < 2) fail(ErrorKind::DegenerateInput, "spatial frequency needs at least 2x2 pixels");
  double rf = 0.0, cf = 0.0;
  for (int r = 0; r < h; ++r)
    for (int c = 1; c < w; ++c) rf += (img(r, c) - img(r, c - 1)) * (img(r, c) - img(r, c - 1));
  for (int r = 1; r < h; ++r)
    for (int c = 0; c < w; ++c) cf += (img(r, c) - img(r - 1, c)) * (img(r, c) - img(r - 1, c));
  rf /= static_cast<double>(h) * (w - 1);
  cf /= static_cast<double>(h - 1) * w;
  return 255.0 * std::sqrt(rf + cf);
}

/// MI(fused; a) + MI(fused; b) in bits.
inline double mutual_information(const Image& fused, const Image& a, const Image& b) {
  detail::require_same_size(fused, a, "mutual_information");
  detail::require_same_size(fused, b, "mutual_information");
  return detail::mutual_information_pair(fused, a) + detail::mutual_information_pair(fused, b);
}

/// CC(fused - b, a) + CC(fused - a, b); a term with a constant input is 0.
inline double scd(const Image& fused, const Image& a, const Image& b) {
  detail::require_same_size(fused, a, "scd");
  detail::require_same_size(fused, b, "scd");
  const auto f = fused.pixels();
  const auto av = a.pixels();
  const auto bv = b.pixels();
  std::vector<double> fa(f.size()), fb(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) {
    fb[i] = f[i] - bv[i];
    fa[i] = f[i] - av[i];
  }
  const std::vector<double> va(av.begin(), av.end()), vb(bv.begin(), bv.end());
  return detail::pearson(fb, va).value_or(0.0) + detail::pearson(fa, vb).value_or(0.0);
}

/// Smallest side length for which `vif` is defined.
inline int vif_min_side() {
  int side = 1;
  while (!detail::vif_fits(side)) ++side;
  return side;
}

/// Four-scale pixel-domain VIF averaged over both references.
inline double vif(const Image& fused, const Image& a, const Image& b) {
  detail::require_same_size(fused, a, "vif");
  detail::require_same_size(fused, b, "vif");
  if (!detail::vif_fits(fused.height()) || !detail::vif_fits(fused.width())) {
    fail(ErrorKind::DegenerateInput, "VIF needs images of at least " + std::to_string(vif_min_side()) +
                                         " pixels per side");
  }
  const auto f = detail::plane_of(fused, 255.0);
  return 0.5 * (detail::vif_single(detail::plane_of(a, 255.0), f) + detail::vif_single(detail::plane_of(b, 255.0), f));
}

/// Edge-transfer quality in [0,1], symmetric in (a, b).
inline double qabf(const Image& fused, const Image& a, const Image& b) {
  detail::require_same_size(fused, a, "qabf");
  detail::require_same_size(fused, b, "qabf");
  const auto ef = detail::sobel_edges(fused);
  const auto ea = detail::sobel_edges(a);
  const auto eb = detail::sobel_edges(b);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < fused.size(); ++i) {
    const double qa = detail::edge_preservation(ea.strength[i], ea.orientation[i], ef.strength[i], ef.orientation[i]);
    const double qb = detail::edge_preservation(eb.strength[i], eb.orientation[i], ef.strength[i], ef.orientation[i]);
    num += qa * ea.strength[i] + qb * eb.strength[i];
    den += ea.strength[i] + eb.strength[i];
  }
  if (den == 0.0) return 0.0;
  return std::clamp(num / den, 0.0, 1.0);
}

/// Mean SSIM over all 11x11 windows fully inside the image.
inline double ssim(const Image& x, const Image& y) {
  detail::require_same_size(x, y, "ssim");
  if (x.height() < 11 || x.width() < 11) fail(ErrorKind::DegenerateInput, "SSIM needs images of at least 11x11");
  constexpr double c1 = 1e-4, c2 = 9e-4;
  const auto win = detail::gaussian_window_1d(11, 1.5);
  const auto px = detail::plane_of(x, 1.0);
  const auto py = detail::plane_of(y, 1.0);
  const auto mx = detail::filter_valid(px, win);
  const auto my = detail::filter_valid(py, win);
  const auto exx = detail::filter_valid(detail::multiply(px, px), win);
  const auto eyy = detail::filter_valid(detail::multiply(py, py), win);
  const auto exy = detail::filter_valid(detail::multiply(px, py), win);
  double total = 0.0;
  for (std::size_t i = 0; i < mx.v.size(); ++i) {
    const double sxx = exx.v[i] - mx.v[i] * mx.v[i];
    const double syy = eyy.v[i] - my.v[i] * my.v[i];
    const double sxy = exy.v[i] - mx.v[i] * my.v[i];
    total += ((2 * mx.v[i] * my.v[i] + c1) * (2 * sxy + c2)) /
             ((mx.v[i] * mx.v[i] + my.v[i] * my.v[i] + c1) * (sxx + syy + c2));
  }
  return total / static_cast<double>(mx.v.size());
}

// ---------------------------------------------------------------------------
// Reports

inline const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> n{"EN", "SD", "SF", "MI", "SCD", "VIF", "Qabf", "SSIM"};
  return n;
}

/// Metric values keyed by name; an absent value means the metric is
/// undefined for that input (e.g. VIF on small images).
struct MetricRow {
  std::string name;
  std::map<std::string, std::optional<double>> values;
};

struct MetricReport {
  std::vector<MetricRow> per_image;
  std::map<std::string, std::optional<double>> aggregate;
  std::map<std::string, int> counts;  // rows contributing to each aggregate
};

inline json metric_variants() {
  return {{"EN", "256-bin histogram, bin=round(255p), log2"},
          {"SD", "population std x255"},
          {"SF", "sqrt(RF^2+CF^2), mean squared first differences, x255"},
          {"MI", "MI(F;A)+MI(F;B), 256x256 joint histogram, log2"},
          {"SCD", "CC(F-B,A)+CC(F-A,B), degenerate term = 0"},
          {"VIF", "pixel-domain, 4 scales, N=2^(5-s)+1, sd=N/5, valid, sigma_n^2=2 on 0-255, mean over sources"},
          {"Qabf", "Sobel (reflect), kg=-15 dg=0.5 ka=-22 da=0.8, sigmoids scaled to 1 at identity, L=1"},
          {"SSIM", "11x11 Gaussian sd=1.5, valid, C1=1e-4 C2=9e-4, mean of SSIM(F,A) and SSIM(F,B)"}};
}

namespace detail {

template <class F>
std::optional<double> defined_or_null(F f) {
  try {
    return f();
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::DegenerateInput) return std::nullopt;
    throw;
  }
}

}  // namespace detail

inline MetricRow evaluate_triple(const Image& fused, const Image& a, const Image& b, std::string name = {}) {
  detail::require_same_size(fused, a, "evaluate");
  detail::require_same_size(fused, b, "evaluate");
  MetricRow row;
  row.name = std::move(name);
  row.values["EN"] = entropy(fused);
  row.values["SD"] = std_dev(fused);
  row.values["SF"] = detail::defined_or_null([&] { return spatial_frequency(fused); });
  row.values["MI"] = mutual_information(fused, a, b);
  row.values["SCD"] = scd(fused, a, b);
  row.values["VIF"] = detail::defined_or_null([&] { return vif(fused, a, b); });
  row.values["Qabf"] = qabf(fused, a, b);
  row.values["SSIM"] = detail::defined_or_null([&] { return 0.5 * (ssim(fused, a) + ssim(fused, b)); });
  return row;
}

/// Aggregates are means over rows where the metric is defined; rows are
/// combined in filename order.
inline MetricReport summarize(std::vector<MetricRow> rows) {
  std::sort(rows.begin(), rows.end(), [](const MetricRow& x, const MetricRow& y) { return x.name < y.name; });
  MetricReport report;
  for (const auto& m : metric_names()) {
    double total = 0.0;
    int count = 0;
    for (const auto& row : rows) {
      const auto it = row.values.find(m);
      if (it != row.values.end() && it->second) {
        total += *it->second;
        ++count;
      }
    }
    report.counts[m] = count;
    report.aggregate[m] = count > 0 ? std::optional<double>(total / count) : std::nullopt;
  }
  report.per_image = std::move(rows);
  return report;
}

/// Scores every fused image against the identically named sources.
inline MetricReport evaluate(const std::filesystem::path& fused_dir, const std::filesystem::path& a_dir,
                             const std::filesystem::path& b_dir) {
  const auto pairs = load_pairs(a_dir, b_dir);
  const auto fused = load_pairs(fused_dir, a_dir);  // same names, same sizes
  std::vector<MetricRow> rows;
  rows.reserve(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const Image& f = fused[i].a;
    if (!f.same_size(pairs[i].b)) {
      fail(ErrorKind::RegistrationError, "fused image \"" + f.source_id() + "\" differs in size from its sources");
    }
    rows.push_back(evaluate_triple(f, pairs[i].a, pairs[i].b, pairs[i].a.source_id()));
  }
  return summarize(std::move(rows));
}

namespace detail {

inline json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

inline std::string csv_cell(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream os;
  os << std::setprecision(10) << *v;
  return os.str();
}

}  // namespace detail

inline json report_json(const MetricReport& r) {
  json agg = json::object(), per = json::array(), counts = json::object();
  for (const auto& m : metric_names()) {
    agg[m] = detail::optional_json(r.aggregate.at(m));
    counts[m] = r.counts.at(m);
  }
  for (const auto& row : r.per_image) {
    json j = {{"image", row.name}};
    for (const auto& m : metric_names()) j[m] = detail::optional_json(row.values.at(m));
    per.push_back(j);
  }
  return {{"artifact_version", kVersion},
          {"metric_variants", metric_variants()},
          {"aggregate", agg},
          {"defined_rows", counts},
          {"per_image", per}};
}

inline std::string report_csv(const MetricReport& r) {
  std::ostringstream os;
  os << "image";
  for (const auto& m : metric_names()) os << "," << m;
  os << "\n";
  for (const auto& row : r.per_image) {
    os << row.name;
    for (const auto& m : metric_names()) os << "," << detail::csv_cell(row.values.at(m));
    os << "\n";
  }
  os << "mean";
  for (const auto& m : metric_names()) os << "," << detail::csv_cell(r.aggregate.at(m));
  os << "\n";
  return os.str();
}

/// Writes `dir/report.csv` and `dir/report.json`.
inline void write_report(const std::filesystem::path& dir, const MetricReport& r) {
  std::filesystem::create_directories(dir);
  std::ofstream csv(dir / "report.csv");
  std::ofstream js(dir / "report.json");
  if (!csv || !js) fail(ErrorKind::IOError, "cannot write report in " + dir.string());
  csv << report_csv(r);
  js << report_json(r).dump(2) << "\n";
}

}  // namespace daefuse

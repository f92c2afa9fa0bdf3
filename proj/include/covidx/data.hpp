#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "covidx/error.hpp"
#include "covidx/image_io.hpp"
#include "covidx/rng.hpp"
#include "covidx/tensor.hpp"

namespace covidx {

// Class order is fixed for every run; covid19 is the positive class.
inline constexpr std::array<std::string_view, 2> kClassNames{"normal", "covid19"};
inline constexpr std::size_t kNormal = 0;
inline constexpr std::size_t kPositiveClass = 1;
inline constexpr std::size_t kMinTargetSize = 32;

inline std::size_t label_index(std::string_view label) {
  for (std::size_t i = 0; i < kClassNames.size(); ++i) {
    if (kClassNames[i] == label) return i;
  }
  fail(ErrorKind::data, "unknown label '" + std::string(label) + "' (expected normal or covid19)");
}

struct ManifestEntry {
  std::string path;              // as written in the manifest
  std::filesystem::path file;    // resolved against the manifest directory
  std::size_t label = 0;
};

namespace detail {

// One CSV record; supports double-quoted fields with "" escapes.
inline std::vector<std::string> split_csv_line(const std::string& line, std::size_t row) {
  std::vector<std::string> fields(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        fields.back() += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        fields.back() += ch;
      }
    } else if (ch == '"' && fields.back().empty()) {
      quoted = true;
    } else if (ch == ',') {
      fields.emplace_back();
    } else {
      fields.back() += ch;
    }
  }
  if (quoted) fail(ErrorKind::data, "manifest row " + std::to_string(row) + ": unterminated quote");
  return fields;
}

}  // namespace detail

/// Parses `image_path,label` CSV text. Row numbers in errors count the header as row 1.
inline std::vector<ManifestEntry> parse_manifest(std::istream& in, const std::filesystem::path& base_dir) {
  std::string line;
  std::size_t row = 0;
  auto next = [&]() {
    if (!std::getline(in, line)) return false;
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return true;
  };
  if (!next()) fail(ErrorKind::data, "manifest is empty (missing header image_path,label)");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  if (line != "image_path,label") {
    fail(ErrorKind::data, "manifest header must be 'image_path,label', got '" + line + "'");
  }
  std::vector<ManifestEntry> entries;
  std::set<std::string> seen;
  while (next()) {
    if (line.empty()) continue;
    const auto fields = detail::split_csv_line(line, row);
    const std::string where = "manifest row " + std::to_string(row);
    if (fields.size() != 2) {
      fail(ErrorKind::data, where + ": expected 2 fields, got " + std::to_string(fields.size()));
    }
    if (fields[0].empty()) fail(ErrorKind::data, where + ": empty image path");
    std::size_t label = 0;
    try {
      label = label_index(fields[1]);
    } catch (const Error& e) {
      fail(ErrorKind::data, where + ": " + e.what());
    }
    if (!seen.insert(fields[0]).second) {
      fail(ErrorKind::data, where + ": duplicate image path " + fields[0]);
    }
    std::filesystem::path file(fields[0]);
    if (file.is_relative()) file = base_dir / file;
    entries.push_back({fields[0], file, label});
  }
  return entries;
}

inline std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::data, "cannot open manifest " + path.string());
  return parse_manifest(in, path.parent_path());
}

/// Bilinear resize with half-pixel centres and edge clamping. Returns
/// samples in [0,255] as (channels, out_h, out_w).
inline std::vector<double> resize_bilinear(const Raster& r, std::size_t out_h, std::size_t out_w) {
  detail::require_valid(r);
  if (out_h == 0 || out_w == 0) fail(ErrorKind::usage, "resize target has zero extent");
  struct Tap {
    std::size_t lo, hi;
    double frac;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t i = 0; i < out; ++i) {
      const double src = std::clamp((static_cast<double>(i) + 0.5) * scale - 0.5, 0.0,
                                    static_cast<double>(in - 1));
      const auto lo = static_cast<std::size_t>(std::floor(src));
      t[i] = {lo, std::min(lo + 1, in - 1), src - static_cast<double>(lo)};
    }
    return t;
  };
  const auto ty = taps(r.height, out_h);
  const auto tx = taps(r.width, out_w);
  std::vector<double> out(r.channels * out_h * out_w);
  for (std::size_t c = 0; c < r.channels; ++c) {
    for (std::size_t y = 0; y < out_h; ++y) {
      const Tap& a = ty[y];
      for (std::size_t x = 0; x < out_w; ++x) {
        const Tap& b = tx[x];
        const double top = (1 - b.frac) * r.at(a.lo, b.lo, c) + b.frac * r.at(a.lo, b.hi, c);
        const double bottom = (1 - b.frac) * r.at(a.hi, b.lo, c) + b.frac * r.at(a.hi, b.hi, c);
        out[(c * out_h + y) * out_w + x] = (1 - a.frac) * top + a.frac * bottom;
      }
    }
  }
  return out;
}

/// (3, S, S) tensor in [0,1]: gray is replicated to three channels, then
/// resized bilinearly and divided by 255.
inline Tensor<float> preprocess(const Raster& r, std::size_t target_size) {
  detail::require_valid(r);
  if (target_size < kMinTargetSize) {
    fail(ErrorKind::usage, "target size must be at least " + std::to_string(kMinTargetSize));
  }
  const auto resized = resize_bilinear(r, target_size, target_size);
  const std::size_t plane = target_size * target_size;
  Tensor<float> out({3, target_size, target_size});
  for (std::size_t c = 0; c < 3; ++c) {
    const std::size_t src_c = r.channels == 1 ? 0 : c;
    for (std::size_t i = 0; i < plane; ++i) {
      out[c * plane + i] = static_cast<float>(resized[src_c * plane + i] / 255.0);
    }
  }
  return out;
}

inline Tensor<float> one_hot(std::size_t label) {
  if (label >= kClassNames.size()) fail(ErrorKind::data, "one_hot: label index out of range");
  Tensor<float> t({kClassNames.size()});
  t[label] = 1.0f;
  return t;
}

inline Tensor<float> one_hot(std::string_view label) { return one_hot(label_index(label)); }

enum class SplitMode { holdout, three_way };

inline std::string_view split_mode_name(SplitMode m) {
  return m == SplitMode::holdout ? "holdout" : "three_way";
}

inline SplitMode parse_split_mode(std::string_view s) {
  if (s == "holdout") return SplitMode::holdout;
  if (s == "three_way") return SplitMode::three_way;
  fail(ErrorKind::usage, "unknown split mode '" + std::string(s) + "' (expected holdout or three_way)");
}

inline constexpr double kTestFraction = 0.2;

/// Partition of manifest entries. In holdout mode `validation` repeats the
/// test partition and is used for monitoring only.
struct EntrySplit {
  SplitMode mode = SplitMode::holdout;
  std::uint64_t seed = 0;
  std::vector<ManifestEntry> train, validation, test;
};

/// Shuffles each class with one seeded generator (normal first), cuts the
/// per-class lists and interleaves the classes inside every partition.
inline EntrySplit split_entries(const std::vector<ManifestEntry>& entries, std::uint64_t seed,
                                SplitMode mode) {
  std::array<std::vector<ManifestEntry>, 2> by_class;
  for (const auto& e : entries) by_class.at(e.label).push_back(e);
  Rng rng(seed);
  std::array<std::array<std::vector<ManifestEntry>, 3>, 2> parts;  // [class][train, val, test]
  for (std::size_t c = 0; c < 2; ++c) {
    auto& items = by_class[c];
    if (items.empty()) fail(ErrorKind::data, "split: class " + std::string(kClassNames[c]) + " is absent");
    rng.shuffle(items);
    const std::size_t n = items.size();
    const std::size_t n_test = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(kTestFraction * n)));
    const std::size_t needed = mode == SplitMode::holdout ? 2 : 3;
    if (n < needed || n - n_test < needed - 1) {
      fail(ErrorKind::data, "split: class " + std::string(kClassNames[c]) + " has " + std::to_string(n) +
                                " entries, fewer than the " + std::to_string(needed) +
                                " partitions require");
    }
    const std::size_t rest = n - n_test;
    const std::size_t n_val = mode == SplitMode::three_way ? rest / 2 : 0;
    auto it = items.begin();
    parts[c][2].assign(it, it + static_cast<long>(n_test));
    it += static_cast<long>(n_test);
    parts[c][1].assign(it, it + static_cast<long>(n_val));
    it += static_cast<long>(n_val);
    parts[c][0].assign(it, items.end());
  }
  auto interleave = [&](std::size_t p) {
    std::vector<ManifestEntry> out;
    const std::size_t longest = std::max(parts[0][p].size(), parts[1][p].size());
    for (std::size_t i = 0; i < longest; ++i) {
      for (std::size_t c = 0; c < 2; ++c) {
        if (i < parts[c][p].size()) out.push_back(parts[c][p][i]);
      }
    }
    return out;
  };
  EntrySplit s;
  s.mode = mode;
  s.seed = seed;
  s.train = interleave(0);
  s.test = interleave(2);
  s.validation = mode == SplitMode::three_way ? interleave(1) : s.test;
  return s;
}

struct Sample {
  Tensor<float> image;   // (3, S, S)
  Tensor<float> target;  // one-hot (2)
  std::size_t label = 0;
  std::string path;
};

struct DatasetSplit {
  SplitMode mode = SplitMode::holdout;
  std::uint64_t seed = 0;
  std::vector<Sample> train, validation, test;
};

inline std::vector<Sample> load_samples(const std::vector<ManifestEntry>& entries, std::size_t size) {
  std::vector<Sample> out;
  out.reserve(entries.size());
  for (const auto& e : entries) {
    out.push_back({preprocess(decode_image(e.file), size), one_hot(e.label), e.label, e.path});
  }
  return out;
}

inline DatasetSplit load_split(const EntrySplit& s, std::size_t size) {
  DatasetSplit d;
  d.mode = s.mode;
  d.seed = s.seed;
  d.train = load_samples(s.train, size);
  d.test = load_samples(s.test, size);
  d.validation = s.mode == SplitMode::three_way ? load_samples(s.validation, size) : d.test;
  return d;
}

inline DatasetSplit split_dataset(const std::vector<ManifestEntry>& entries, std::uint64_t seed,
                                  SplitMode mode, std::size_t size) {
  return load_split(split_entries(entries, seed, mode), size);
}

/// Stacks images and targets of `samples[idx]` into (B,3,S,S) and (B,2).
inline std::pair<Tensor<float>, Tensor<float>> make_batch(const std::vector<Sample>& samples,
                                                          const std::vector<std::size_t>& idx) {
  std::vector<const Tensor<float>*> images, targets;
  for (std::size_t i : idx) {
    images.push_back(&samples.at(i).image);
    targets.push_back(&samples.at(i).target);
  }
  return {stack<float>(images), stack<float>(targets)};
}

// Synthetic stand-in: a smooth low-frequency field plus noise for both
// classes; covid19 images add bright patchy blobs in both lung-periphery
// regions and are then shifted so their mean equals the blob-free mean.
namespace detail {

inline Raster synth_image(std::size_t size, bool covid, double target_mean, Rng& rng) {
  const double s = static_cast<double>(size);
  const double gx = rng.uniform(-20, 20), gy = rng.uniform(-20, 20);
  const double fx = rng.uniform(0.5, 1.5), fy = rng.uniform(0.5, 1.5);
  const double px = rng.uniform(0, 6.28), py = rng.uniform(0, 6.28);
  std::vector<double> v(size * size);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double u = (x + 0.5) / s, w = (y + 0.5) / s;
      v[y * size + x] = gx * (u - 0.5) + gy * (w - 0.5) +
                        8 * std::sin(6.28 * fx * u + px) * std::cos(6.28 * fy * w + py) +
                        rng.normal(0, 3);
    }
  }
  if (covid) {
    const std::size_t per_side = 2 + rng.below(2);
    for (int side : {0, 1}) {
      for (std::size_t k = 0; k < per_side; ++k) {
        const double cx = side == 0 ? rng.uniform(0.1, 0.3) : rng.uniform(0.7, 0.9);
        const double cy = rng.uniform(0.2, 0.8);
        const double radius = rng.uniform(0.07, 0.1) * s;
        const double amp = rng.uniform(90, 110);
        for (std::size_t y = 0; y < size; ++y) {
          for (std::size_t x = 0; x < size; ++x) {
            const double dx = x + 0.5 - cx * s, dy = y + 0.5 - cy * s;
            v[y * size + x] += amp * std::exp(-(dx * dx + dy * dy) / (2 * radius * radius));
          }
        }
      }
    }
  }
  double mean = 0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  Raster r{size, size, 1, std::vector<std::uint8_t>(size * size)};
  for (std::size_t i = 0; i < v.size(); ++i) {
    r.samples[i] = static_cast<std::uint8_t>(std::clamp(std::lround(v[i] - mean + target_mean), 0L, 255L));
  }
  return r;
}

}  // namespace detail

/// Writes `n_per_class` PGM images per class plus manifest.csv into `out_dir`.
inline std::filesystem::path gen_synthetic(std::size_t n_per_class, std::size_t image_size,
                                           std::uint64_t seed, const std::filesystem::path& out_dir) {
  if (n_per_class < 1) fail(ErrorKind::usage, "synthetic set needs at least one image per class");
  if (image_size < kMinTargetSize) {
    fail(ErrorKind::usage, "synthetic image size must be at least " + std::to_string(kMinTargetSize));
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) fail(ErrorKind::data, "cannot create " + out_dir.string() + ": " + ec.message());
  std::ostringstream manifest;
  manifest << "image_path,label\n";
  Rng means(derive_seed(seed, 0));
  std::vector<double> target(n_per_class);
  for (double& m : target) m = means.uniform(90, 120);
  for (std::size_t c = 0; c < 2; ++c) {
    Rng rng(derive_seed(seed, 1 + c));
    for (std::size_t i = 0; i < n_per_class; ++i) {
      char name[64];
      std::snprintf(name, sizeof name, "%s_%03zu.pgm", std::string(kClassNames[c]).c_str(), i);
      write_file(out_dir / name, encode_pnm(detail::synth_image(image_size, c == kPositiveClass, target[i], rng)));
      manifest << name << ',' << kClassNames[c] << '\n';
    }
  }
  const auto path = out_dir / "manifest.csv";
  std::ofstream out(path, std::ios::binary);
  out << manifest.str();
  if (!out) fail(ErrorKind::data, "cannot write " + path.string());
  return path;
}

}  // namespace covidx

#pragma once

// Deterministic synthetic bi-temporal scenes and their on-disk layout.
//
// Shapes live on a grid of 4x4-pixel cells so label boundaries line up with
// the stride-4 prediction maps.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "gscd/backbone.hpp"
#include "gscd/errors.hpp"
#include "gscd/rng.hpp"
#include "gscd/serialize.hpp"
#include "gscd/tensor.hpp"

namespace gscd {

inline constexpr std::size_t kCellSize = 4;

struct SceneSpec {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t n_classes = 4;
  std::size_t n_shapes = 6;
  double change_fraction = 0.3;
  double noise_std = 0.05;
  std::uint64_t seed = 0;

  void validate() const {
    try {
      check_input_size(height, width);
    } catch (const ShapeError& e) {
      throw ConfigError(e.what());
    }
    if (n_classes < 2) throw ConfigError("n_classes must be at least 2");
    if (!(change_fraction > 0.0 && change_fraction < 1.0)) throw ConfigError("change_fraction must lie in (0, 1)");
    if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) throw ConfigError("noise_std must be finite and >= 0");
  }
};

struct Sample {
  Tensor t1;  // 3 x H x W in [0, 1]
  Tensor t2;
  std::vector<int> y1;  // H x W class ids
  std::vector<int> y2;
  std::vector<int> cd;  // H x W, 1 where y1 != y2
};

struct Dataset {
  SceneSpec spec;
  std::size_t first_index = 0;  // sample i was generated with seed spec.seed + first_index + i
  std::vector<Sample> samples;
  std::vector<std::string> warnings;
};

struct SceneShape {
  bool ellipse = false;
  int cls = 1;
  // cell-unit box [x0, x1) x [y0, y1)
  int x0 = 0, y0 = 0, x1 = 1, y1 = 1;
};

namespace detail {

inline bool shape_covers(const SceneShape& s, int cx, int cy) {
  if (cx < s.x0 || cx >= s.x1 || cy < s.y0 || cy >= s.y1) return false;
  if (!s.ellipse) return true;
  const double rx = 0.5 * (s.x1 - s.x0), ry = 0.5 * (s.y1 - s.y0);
  const double dx = (cx + 0.5 - s.x0 - rx) / rx, dy = (cy + 0.5 - s.y0 - ry) / ry;
  return dx * dx + dy * dy <= 1.0;
}

inline std::vector<int> paint_cells(const std::vector<SceneShape>& shapes, int gw, int gh) {
  std::vector<int> cells(static_cast<std::size_t>(gw * gh), 0);
  for (const auto& s : shapes)
    for (int y = std::max(0, s.y0); y < std::min(gh, s.y1); ++y)
      for (int x = std::max(0, s.x0); x < std::min(gw, s.x1); ++x)
        if (shape_covers(s, x, y)) cells[static_cast<std::size_t>(y * gw + x)] = s.cls;
  return cells;
}

inline double changed_fraction(const std::vector<int>& a, const std::vector<int>& b) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) n += a[i] != b[i];
  return static_cast<double>(n) / static_cast<double>(a.size());
}

inline SceneShape random_shape(Rng& rng, int gw, int gh, std::size_t n_classes) {
  SceneShape s;
  s.ellipse = rng.uniform() < 0.5;
  s.cls = 1 + static_cast<int>(rng.below(n_classes - 1));
  const int w = 3 + static_cast<int>(rng.below(static_cast<std::uint64_t>(std::max(1, gw / 2 - 2))));
  const int h = 3 + static_cast<int>(rng.below(static_cast<std::uint64_t>(std::max(1, gh / 2 - 2))));
  s.x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(std::max(1, gw - w + 1))));
  s.y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(std::max(1, gh - h + 1))));
  s.x1 = s.x0 + w;
  s.y1 = s.y0 + h;
  return s;
}

inline int other_class(Rng& rng, int cls, std::size_t n_classes) {
  const int k = static_cast<int>(n_classes);
  return (cls + 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(k - 1)))) % k;
}

/// Evenly spaced hues at fixed saturation and value.
inline std::array<double, 3> class_color(std::size_t cls, std::size_t n_classes) {
  const double h = 6.0 * static_cast<double>(cls) / static_cast<double>(n_classes);
  const double s = 0.8, v = 0.9;
  const int sector = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

inline Tensor render(const std::vector<int>& labels, const SceneSpec& spec, Rng& rng) {
  const std::size_t HW = spec.height * spec.width;
  std::vector<double> img(3 * HW);
  for (std::size_t p = 0; p < HW; ++p) {
    const auto c = class_color(static_cast<std::size_t>(labels[p]), spec.n_classes);
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const double noise = spec.noise_std > 0.0 ? spec.noise_std * rng.normal() : 0.0;
      img[ch * HW + p] = std::clamp(c[ch] + noise, 0.0, 1.0);
    }
  }
  return Tensor::from({3, spec.height, spec.width}, std::move(img));
}

inline std::vector<int> upscale_cells(const std::vector<int>& cells, const SceneSpec& spec) {
  const std::size_t gw = spec.width / kCellSize;
  std::vector<int> out(spec.height * spec.width);
  for (std::size_t y = 0; y < spec.height; ++y)
    for (std::size_t x = 0; x < spec.width; ++x) out[y * spec.width + x] = cells[(y / kCellSize) * gw + x / kCellSize];
  return out;
}

}  // namespace detail

/// Scene number `index` of `spec`. The T2 scene is the T1 scene after a
/// greedy sequence of seeded edits (relabel, move, add, remove a shape),
/// each kept only if it brings the changed fraction closer to the target.
/// Returns a warning through `warning` when the target is out of reach.
inline Sample generate_sample(const SceneSpec& spec, std::size_t index, std::string* warning = nullptr) {
  spec.validate();
  Rng rng(spec.seed + index);
  const int gw = static_cast<int>(spec.width / kCellSize), gh = static_cast<int>(spec.height / kCellSize);
  std::vector<SceneShape> shapes;
  for (std::size_t i = 0; i < spec.n_shapes; ++i) shapes.push_back(detail::random_shape(rng, gw, gh, spec.n_classes));
  const auto cells1 = detail::paint_cells(shapes, gw, gh);

  auto shapes2 = shapes;
  auto cells2 = cells1;
  if (!shapes.empty()) {
    double err = std::abs(spec.change_fraction);
    constexpr int kEdits = 96;
    for (int it = 0; it < kEdits && err > 0.02; ++it) {
      auto trial = shapes2;
      const auto pick = static_cast<std::size_t>(rng.below(trial.size()));
      switch (rng.below(4)) {
        case 0: trial[pick].cls = detail::other_class(rng, trial[pick].cls, spec.n_classes); break;
        case 1: {
          const int dx = static_cast<int>(rng.below(7)) - 3, dy = static_cast<int>(rng.below(7)) - 3;
          trial[pick].x0 += dx, trial[pick].x1 += dx, trial[pick].y0 += dy, trial[pick].y1 += dy;
          break;
        }
        case 2: trial.push_back(detail::random_shape(rng, gw, gh, spec.n_classes)); break;
        default: trial.erase(trial.begin() + static_cast<long>(pick)); break;
      }
      if (trial.empty()) continue;
      auto cells = detail::paint_cells(trial, gw, gh);
      const double e = std::abs(detail::changed_fraction(cells1, cells) - spec.change_fraction);
      if (e < err) {
        err = e;
        shapes2 = std::move(trial);
        cells2 = std::move(cells);
      }
    }
    if (err > 0.1 && warning) {
      std::ostringstream os;
      os << "sample " << index << ": change fraction " << detail::changed_fraction(cells1, cells2)
         << " is more than 0.1 from the target " << spec.change_fraction;
      *warning = os.str();
    }
  }

  Sample s;
  s.y1 = detail::upscale_cells(cells1, spec);
  s.y2 = detail::upscale_cells(cells2, spec);
  s.cd.resize(s.y1.size());
  for (std::size_t p = 0; p < s.cd.size(); ++p) s.cd[p] = s.y1[p] != s.y2[p] ? 1 : 0;
  s.t1 = detail::render(s.y1, spec, rng);
  s.t2 = detail::render(s.y2, spec, rng);
  return s;
}

inline Dataset generate(const SceneSpec& spec, std::size_t count, std::size_t first_index = 0) {
  Dataset ds{spec, first_index, {}, {}};
  for (std::size_t i = 0; i < count; ++i) {
    std::string warning;
    ds.samples.push_back(generate_sample(spec, first_index + i, &warning));
    if (!warning.empty()) ds.warnings.push_back(std::move(warning));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Directory format

namespace detail {

inline std::string sample_stem(std::size_t i) {
  std::ostringstream os;
  os << std::setw(4) << std::setfill('0') << i;
  return os.str();
}

inline Tensor labels_tensor(const std::vector<int>& v, std::size_t h, std::size_t w) {
  return Tensor::from({h, w}, std::vector<double>(v.begin(), v.end()));
}

inline std::vector<int> tensor_labels(const Tensor& t, std::size_t h, std::size_t w, const std::string& what) {
  if (t.shape() != Shape{h, w}) throw FormatError(what + ": expected shape " + shape_str({h, w}) + ", got " + shape_str(t.shape()));
  std::vector<int> out(t.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = t[i];
    if (v != std::floor(v) || v < 0.0 || v > 1e6) throw FormatError(what + ": non-integer label value");
    out[i] = static_cast<int>(v);
  }
  return out;
}

inline std::string fmt(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, r.ptr};
}

}  // namespace detail

inline void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const auto& sp = ds.spec;
  std::ostringstream man;
  man << "format=gscd-dataset-1\n"
      << "count=" << ds.samples.size() << "\n"
      << "height=" << sp.height << "\n"
      << "width=" << sp.width << "\n"
      << "n_classes=" << sp.n_classes << "\n"
      << "n_shapes=" << sp.n_shapes << "\n"
      << "change_fraction=" << detail::fmt(sp.change_fraction) << "\n"
      << "noise_std=" << detail::fmt(sp.noise_std) << "\n"
      << "seed=" << sp.seed << "\n"
      << "first_index=" << ds.first_index << "\n";
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto stem = detail::sample_stem(i);
    const auto& s = ds.samples[i];
    save_tensor(dir / (stem + ".t1.gtnsr"), s.t1);
    save_tensor(dir / (stem + ".t2.gtnsr"), s.t2);
    save_tensor(dir / (stem + ".y1.gtnsr"), detail::labels_tensor(s.y1, sp.height, sp.width));
    save_tensor(dir / (stem + ".y2.gtnsr"), detail::labels_tensor(s.y2, sp.height, sp.width));
    save_tensor(dir / (stem + ".cd.gtnsr"), detail::labels_tensor(s.cd, sp.height, sp.width));
    man << "sample=" << stem << "\n";
  }
  std::ofstream os(dir / "manifest.txt");
  if (!os) throw IoError("cannot write " + (dir / "manifest.txt").string());
  os << man.str();
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.txt");
  if (!is) throw IoError("cannot open " + (dir / "manifest.txt").string());
  std::map<std::string, std::string> kv;
  std::vector<std::string> stems;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("manifest: malformed line '" + line + "'");
    const auto key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key == "sample") stems.push_back(value);
    else kv[key] = value;
  }
  if (kv["format"] != "gscd-dataset-1") throw FormatError("manifest: unknown format '" + kv["format"] + "'");
  auto num = [&](const std::string& k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw FormatError("manifest: missing key " + k);
    return it->second;
  };
  Dataset ds;
  try {
    ds.spec.height = std::stoul(num("height"));
    ds.spec.width = std::stoul(num("width"));
    ds.spec.n_classes = std::stoul(num("n_classes"));
    ds.spec.n_shapes = std::stoul(num("n_shapes"));
    ds.spec.change_fraction = std::stod(num("change_fraction"));
    ds.spec.noise_std = std::stod(num("noise_std"));
    ds.spec.seed = std::stoull(num("seed"));
    ds.first_index = std::stoul(num("first_index"));
    if (std::stoul(num("count")) != stems.size()) throw FormatError("manifest: count does not match sample list");
  } catch (const std::logic_error&) {
    throw FormatError("manifest: non-numeric value");
  }
  const std::size_t H = ds.spec.height, W = ds.spec.width;
  for (const auto& stem : stems) {
    Sample s;
    s.t1 = load_tensor(dir / (stem + ".t1.gtnsr"));
    s.t2 = load_tensor(dir / (stem + ".t2.gtnsr"));
    for (const Tensor* t : {&s.t1, &s.t2}) {
      if (t->shape() != Shape{3, H, W}) throw FormatError(stem + ": image shape " + shape_str(t->shape()));
    }
    s.y1 = detail::tensor_labels(load_tensor(dir / (stem + ".y1.gtnsr")), H, W, stem + ".y1");
    s.y2 = detail::tensor_labels(load_tensor(dir / (stem + ".y2.gtnsr")), H, W, stem + ".y2");
    s.cd = detail::tensor_labels(load_tensor(dir / (stem + ".cd.gtnsr")), H, W, stem + ".cd");
    for (std::size_t p = 0; p < s.cd.size(); ++p) {
      if (s.y1[p] >= static_cast<int>(ds.spec.n_classes) || s.y2[p] >= static_cast<int>(ds.spec.n_classes) ||
          s.cd[p] > 1) {
        throw FormatError(stem + ": label out of range");
      }
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

struct Batch {
  Tensor img1;  // B x 3 x H x W
  Tensor img2;
  std::vector<int> y1;  // B*H*W, sample-major
  std::vector<int> y2;
  std::vector<int> cd;
};

inline Batch make_batch(const Dataset& ds, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ValueError("make_batch: empty index list");
  const std::size_t H = ds.spec.height, W = ds.spec.width, B = indices.size();
  std::vector<double> a, b;
  a.reserve(B * 3 * H * W);
  b.reserve(B * 3 * H * W);
  Batch out;
  for (auto i : indices) {
    const auto& s = ds.samples.at(i);
    a.insert(a.end(), s.t1.data().begin(), s.t1.data().end());
    b.insert(b.end(), s.t2.data().begin(), s.t2.data().end());
    out.y1.insert(out.y1.end(), s.y1.begin(), s.y1.end());
    out.y2.insert(out.y2.end(), s.y2.begin(), s.y2.end());
    out.cd.insert(out.cd.end(), s.cd.begin(), s.cd.end());
  }
  out.img1 = Tensor::from({B, 3, H, W}, std::move(a));
  out.img2 = Tensor::from({B, 3, H, W}, std::move(b));
  return out;
}

}  // namespace gscd

#pragma once

// Procedural source/target segmentation domains. Both domains share the
// scene (label) process; they differ only in how labels are rendered to
// pixels, so the shift is purely covariate.

#include "json.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "clan_forge/common.hpp"
#include "clan_forge/labels.hpp"
#include "clan_forge/tensor.hpp"

namespace clan_forge {

enum class Domain { source, target };

inline const char* domain_name(Domain d) { return d == Domain::source ? "source" : "target"; }

inline Domain parse_domain(const std::string& s) {
  if (s == "source") return Domain::source;
  if (s == "target") return Domain::target;
  throw std::invalid_argument("unknown domain '" + s + "'");
}

/// Scene layout parameters. Class 0 is the background; shapes of the other
/// classes are composited over it.
struct SceneSpec {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t num_classes = 5;
  std::vector<double> class_frequency{0.55, 0.20, 0.15, 0.06, 0.04};
  // Tuned so the composited background covers ~55% of a 32×32 scene.
  std::size_t shape_count_min = 7;
  std::size_t shape_count_max = 13;
  // Shape extent range in pixels (rectangle side, disc diameter).
  std::size_t min_extent = 4;
  std::size_t max_extent = 12;

  void validate() const {
    if (height == 0 || width == 0) throw std::invalid_argument("scene.height/width must be positive");
    if (num_classes < 3) throw std::invalid_argument("scene.num_classes must be at least 3");
    if (num_classes > 255) throw std::invalid_argument("scene.num_classes must fit in a byte");
    if (class_frequency.size() != num_classes) {
      throw std::invalid_argument("scene.class_frequency must have num_classes entries");
    }
    double s = 0.0;
    for (double f : class_frequency) {
      if (!(f >= 0.0)) throw std::invalid_argument("scene.class_frequency entries must be non-negative");
      s += f;
    }
    if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument("scene.class_frequency must sum to 1");
    if (rare_classes().empty()) throw std::invalid_argument("scene.class_frequency needs a class with frequency <= 0.05");
    if (shape_count_min > shape_count_max) throw std::invalid_argument("scene.shape_count_min exceeds shape_count_max");
    if (min_extent == 0 || min_extent > max_extent) throw std::invalid_argument("scene.min_extent/max_extent invalid");
  }

  /// Classes with frequency at most 5%.
  std::vector<std::size_t> rare_classes() const {
    std::vector<std::size_t> out;
    for (std::size_t c = 1; c < class_frequency.size(); ++c)
      if (class_frequency[c] <= 0.05) out.push_back(c);
    return out;
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SceneSpec, height, width, num_classes, class_frequency,
                                                shape_count_min, shape_count_max, min_extent, max_extent)

using Color = std::array<double, 3>;

/// Label-to-pixel rendering parameters for one domain.
struct DomainTransform {
  std::vector<Color> class_colors;
  double noise_std = 0.05;
  double gain = 1.0;
  double offset = 0.0;
  double texture_freq = 0.25;  // cycles per pixel
  double texture_amp = 0.08;

  void validate(std::size_t num_classes) const {
    if (class_colors.size() != num_classes) throw std::invalid_argument("transform.class_colors must have num_classes entries");
    if (!(noise_std >= 0.0)) throw std::invalid_argument("transform.noise_std must be non-negative");
    if (!(texture_amp >= 0.0)) throw std::invalid_argument("transform.texture_amp must be non-negative");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DomainTransform, class_colors, noise_std, gain, offset, texture_freq,
                                                texture_amp)

inline Color hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double hh = h * 6.0;
  const int sector = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
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

/// Evenly spaced hues, rotated by `hue_shift` (fraction of a full turn).
inline std::vector<Color> class_palette(std::size_t num_classes, double hue_shift = 0.0) {
  std::vector<Color> out;
  for (std::size_t c = 0; c < num_classes; ++c) {
    out.push_back(hsv_to_rgb(static_cast<double>(c) / static_cast<double>(num_classes) + hue_shift, 0.6, 0.75));
  }
  return out;
}

inline DomainTransform default_source_transform(std::size_t num_classes) {
  DomainTransform t;
  t.class_colors = class_palette(num_classes);
  return t;
}

/// Default domain gap: rotated hues, doubled noise, gain 0.8 and offset 0.1.
inline DomainTransform default_target_transform(std::size_t num_classes, double hue_shift = 0.07) {
  DomainTransform t = default_source_transform(num_classes);
  t.class_colors = class_palette(num_classes, hue_shift);
  t.noise_std *= 2.0;
  t.gain = 0.8;
  t.offset = 0.1;
  return t;
}

namespace detail {

inline void paint_rect(LabelMap& m, long y0, long x0, long h, long w, std::uint8_t cls) {
  for (long y = std::max(0L, y0); y < std::min<long>(static_cast<long>(m.height), y0 + h); ++y)
    for (long x = std::max(0L, x0); x < std::min<long>(static_cast<long>(m.width), x0 + w); ++x)
      m.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = cls;
}

/// Pixels with inner < distance <= r from the centre; inner < 0 gives a disc.
inline void paint_disc(LabelMap& m, double cy, double cx, double r, std::uint8_t cls, double inner = -1.0) {
  for (std::size_t y = 0; y < m.height; ++y)
    for (std::size_t x = 0; x < m.width; ++x) {
      const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
      const double d2 = dy * dy + dx * dx;
      if (d2 <= r * r && (inner < 0.0 || d2 > inner * inner)) m.at(y, x) = cls;
    }
}

}  // namespace detail

enum class ShapeKind { stripe, rect, disc, ring };

/// Each foreground class has its own shape kind, so the label layout itself
/// carries class information.
inline ShapeKind shape_kind(std::size_t cls) {
  constexpr std::array<ShapeKind, 4> kinds{ShapeKind::stripe, ShapeKind::rect, ShapeKind::disc, ShapeKind::ring};
  return kinds[(cls - 1) % kinds.size()];
}

/// Mean pixel area of one shape of `kind` before clipping and overlap.
inline double expected_shape_area(ShapeKind kind, const SceneSpec& spec) {
  double e1 = 0.0, e2 = 0.0, thick = 0.0;
  const double n = static_cast<double>(spec.max_extent - spec.min_extent + 1);
  for (std::size_t e = spec.min_extent; e <= spec.max_extent; ++e) {
    const double d = static_cast<double>(e);
    e1 += d / n;
    e2 += d * d / n;
    thick += static_cast<double>(std::max<std::size_t>(1, e / 3)) / n;
  }
  switch (kind) {
    case ShapeKind::rect: return e1 * e1;
    case ShapeKind::disc: return std::numbers::pi * e2 / 4.0;
    case ShapeKind::ring: return std::numbers::pi * e2 * 3.0 / 16.0;
    default: return thick * 0.5 * static_cast<double>(spec.height + spec.width);
  }
}

/// Composites seeded stripes, rectangles, discs and rings over the background.
/// Classes are drawn with probability proportional to frequency over shape
/// area and stacking order is class-independent, so the expected foreground
/// area splits in proportion to class_frequency.
inline LabelMap generate_scene(const SceneSpec& spec, std::uint64_t seed, std::vector<std::string>* warnings = nullptr) {
  spec.validate();
  if (warnings) {
    const double min_area = std::numbers::pi * std::pow(static_cast<double>(spec.min_extent) / 2.0, 2.0);
    for (std::size_t c = 1; c < spec.num_classes; ++c) {
      const double expected = spec.class_frequency[c] * static_cast<double>(spec.height * spec.width);
      if (spec.class_frequency[c] > 0.0 && (spec.shape_count_max == 0 || expected < min_area)) {
        warnings->push_back("class " + std::to_string(c) + ": frequency target unreachable with the configured shape sizes");
      }
    }
  }
  LabelMap m(spec.height, spec.width, 0);
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> count_dist(spec.shape_count_min, spec.shape_count_max);
  std::vector<double> fg(spec.class_frequency.begin() + 1, spec.class_frequency.end());
  const bool any_fg = std::any_of(fg.begin(), fg.end(), [](double f) { return f > 0.0; });
  for (std::size_t c = 0; c < fg.size(); ++c) fg[c] /= expected_shape_area(shape_kind(c + 1), spec);
  std::discrete_distribution<std::size_t> class_dist(fg.begin(), fg.end());
  std::uniform_int_distribution<long> extent(static_cast<long>(spec.min_extent), static_cast<long>(spec.max_extent));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t n = count_dist(rng);
  if (!any_fg) return m;
  const long H = static_cast<long>(spec.height), W = static_cast<long>(spec.width);
  for (std::size_t s = 0; s < n; ++s) {
    const auto cls = static_cast<std::uint8_t>(class_dist(rng) + 1);
    switch (shape_kind(cls)) {
      case ShapeKind::rect: {
        const long h = extent(rng), w = extent(rng);
        const long y0 = static_cast<long>(unit(rng) * static_cast<double>(H - h + 1));
        const long x0 = static_cast<long>(unit(rng) * static_cast<double>(W - w + 1));
        detail::paint_rect(m, y0, x0, h, w, cls);
        break;
      }
      case ShapeKind::disc:
      case ShapeKind::ring: {
        const double r = static_cast<double>(extent(rng)) / 2.0;
        const double inner = shape_kind(cls) == ShapeKind::ring ? r / 2.0 : -1.0;
        detail::paint_disc(m, r + unit(rng) * (static_cast<double>(H) - 2 * r), r + unit(rng) * (static_cast<double>(W) - 2 * r), r, cls, inner);
        break;
      }
      default: {
        const long t = std::max(1L, extent(rng) / 3);
        const bool horizontal = unit(rng) < 0.5;
        const long span = horizontal ? H : W;
        const long pos = static_cast<long>(unit(rng) * static_cast<double>(span - t + 1));
        if (horizontal) detail::paint_rect(m, pos, 0, t, W, cls);
        else detail::paint_rect(m, 0, pos, H, t, cls);
        break;
      }
    }
  }
  return m;
}

/// pixel = clip(gain · (color + texture + noise) + offset, 0, 1). The texture
/// is a per-class oriented sinusoid with a seeded phase.
inline Tensor render(const LabelMap& labels, const DomainTransform& transform, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t C = transform.class_colors.size();
  std::uniform_real_distribution<double> phase_dist(0.0, 2.0 * std::numbers::pi);
  std::vector<double> phase(C);
  for (double& p : phase) p = phase_dist(rng);
  std::normal_distribution<double> noise(0.0, 1.0);
  const std::size_t H = labels.height, W = labels.width;
  Tensor img({3, H, W});
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const std::size_t c = labels.at(y, x);
      if (c >= C) throw std::out_of_range("render: label " + std::to_string(c) + " has no colour");
      const double angle = std::numbers::pi * static_cast<double>(c) / static_cast<double>(C);
      const double tex = transform.texture_amp == 0.0
                             ? 0.0
                             : transform.texture_amp *
                                   std::sin(2.0 * std::numbers::pi * transform.texture_freq *
                                                (static_cast<double>(x) * std::cos(angle) + static_cast<double>(y) * std::sin(angle)) +
                                            phase[c]);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double n = transform.noise_std == 0.0 ? 0.0 : transform.noise_std * noise(rng);
        const double v = transform.gain * (transform.class_colors[c][ch] + tex + n) + transform.offset;
        img[(ch * H + y) * W + x] = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return img;
}

struct LabeledImage {
  Tensor image;  // 3×H×W in [0,1]
  LabelMap labels;
  Domain domain = Domain::source;
};

struct Dataset {
  Domain domain = Domain::source;
  std::uint64_t seed = 0;
  bool eval_only = false;  // target labels are for metrics only
  std::string config_hash;
  std::vector<LabeledImage> items;
};

inline std::string dataset_hash(const SceneSpec& spec, const DomainTransform& transform, Domain domain,
                                std::uint64_t seed, std::size_t n) {
  const nlohmann::json j = {{"spec", spec}, {"transform", transform}, {"domain", domain_name(domain)},
                            {"seed", seed}, {"n", n}};
  return hex64(fnv1a64(j.dump()));
}

/// n independent scenes; scene i of a domain uses its own seed sub-stream so
/// source and target never share a layout.
inline Dataset make_dataset(std::size_t n, Domain domain, const SceneSpec& spec, const DomainTransform& transform,
                            std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("make_dataset: n must be at least 1");
  spec.validate();
  transform.validate(spec.num_classes);
  Dataset ds;
  ds.domain = domain;
  ds.seed = seed;
  ds.eval_only = domain == Domain::target;
  ds.config_hash = dataset_hash(spec, transform, domain, seed, n);
  const std::uint64_t scene_stream = domain == Domain::source ? streams::source_scenes : streams::target_scenes;
  for (std::size_t i = 0; i < n; ++i) {
    LabeledImage item;
    item.labels = generate_scene(spec, derive_seed(seed, scene_stream, i));
    item.image = render(item.labels, transform, derive_seed(seed, streams::render + scene_stream, i));
    item.domain = domain;
    ds.items.push_back(std::move(item));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Bundled splits and their on-disk form

/// Everything needed to regenerate the four splits used by training and
/// evaluation.
struct DataConfig {
  SceneSpec scene;
  DomainTransform source = default_source_transform(5);
  DomainTransform target = default_target_transform(5);
  std::uint64_t seed = 7;
  std::size_t source_train = 256;
  std::size_t target_train = 256;
  std::size_t source_eval = 64;
  std::size_t target_eval = 64;

  void validate() const {
    scene.validate();
    source.validate(scene.num_classes);
    target.validate(scene.num_classes);
    if (source_train == 0 || target_train == 0 || source_eval == 0 || target_eval == 0) {
      throw std::invalid_argument("data split sizes must be positive");
    }
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DataConfig, scene, source, target, seed, source_train, target_train,
                                                source_eval, target_eval)

struct DataBundle {
  DataConfig config;
  std::string config_hash;
  Dataset source_train;
  Dataset target_train;
  Dataset source_eval;
  Dataset target_eval;
};

inline DataBundle make_bundle(const DataConfig& config) {
  config.validate();
  DataBundle b;
  b.config = config;
  b.config_hash = hex64(fnv1a64(nlohmann::json(config).dump()));
  // Training and evaluation splits draw from separate base seeds.
  const std::uint64_t train_seed = derive_seed(config.seed, 101);
  const std::uint64_t eval_seed = derive_seed(config.seed, 102);
  b.source_train = make_dataset(config.source_train, Domain::source, config.scene, config.source, train_seed);
  b.target_train = make_dataset(config.target_train, Domain::target, config.scene, config.target, train_seed);
  b.source_eval = make_dataset(config.source_eval, Domain::source, config.scene, config.source, eval_seed);
  b.target_eval = make_dataset(config.target_eval, Domain::target, config.scene, config.target, eval_seed);
  return b;
}

namespace detail {

inline void write_split(const std::filesystem::path& dir, const std::string& name, const Dataset& ds) {
  std::ofstream img(dir / (name + ".images.f64"), std::ios::binary);
  std::ofstream lab(dir / (name + ".labels.u8"), std::ios::binary);
  if (!img || !lab) throw std::runtime_error("cannot write dataset split " + name + " in " + dir.string());
  for (const LabeledImage& it : ds.items) {
    img.write(reinterpret_cast<const char*>(it.image.data().data()),
              static_cast<std::streamsize>(it.image.size() * sizeof(double)));
    lab.write(reinterpret_cast<const char*>(it.labels.values.data()), static_cast<std::streamsize>(it.labels.values.size()));
  }
  if (!img || !lab) throw std::runtime_error("failed writing dataset split " + name);
}

inline Dataset read_split(const std::filesystem::path& dir, const nlohmann::json& entry, const SceneSpec& spec) {
  Dataset ds;
  ds.domain = parse_domain(entry.at("domain").get<std::string>());
  ds.seed = entry.at("seed").get<std::uint64_t>();
  ds.eval_only = entry.at("eval_only").get<bool>();
  ds.config_hash = entry.at("hash").get<std::string>();
  const std::size_t n = entry.at("count").get<std::size_t>();
  const std::size_t H = spec.height, W = spec.width;
  std::ifstream img(dir / entry.at("images").get<std::string>(), std::ios::binary);
  std::ifstream lab(dir / entry.at("labels").get<std::string>(), std::ios::binary);
  if (!img || !lab) throw std::runtime_error("missing dataset split files in " + dir.string());
  for (std::size_t i = 0; i < n; ++i) {
    LabeledImage it;
    std::vector<double> px(3 * H * W);
    img.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size() * sizeof(double)));
    it.labels = LabelMap(H, W);
    lab.read(reinterpret_cast<char*>(it.labels.values.data()), static_cast<std::streamsize>(H * W));
    if (!img || !lab) throw std::runtime_error("truncated dataset split in " + dir.string());
    it.image = Tensor({3, H, W}, std::move(px));
    it.domain = ds.domain;
    ds.items.push_back(std::move(it));
  }
  return ds;
}

}  // namespace detail

/// Writes manifest.json plus one raw little-endian float64 image file and one
/// uint8 label file per split.
inline void save_bundle(const DataBundle& b, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json splits = nlohmann::json::object();
  const std::pair<const char*, const Dataset*> entries[] = {{"source_train", &b.source_train},
                                                            {"target_train", &b.target_train},
                                                            {"source_eval", &b.source_eval},
                                                            {"target_eval", &b.target_eval}};
  for (const auto& [name, ds] : entries) {
    detail::write_split(dir, name, *ds);
    splits[name] = {{"domain", domain_name(ds->domain)},
                    {"seed", ds->seed},
                    {"count", ds->items.size()},
                    {"eval_only", ds->eval_only},
                    {"hash", ds->config_hash},
                    {"images", std::string(name) + ".images.f64"},
                    {"labels", std::string(name) + ".labels.u8"}};
  }
  const nlohmann::json manifest = {{"format", "clan-forge-dataset"},
                                   {"version", 1},
                                   {"config", b.config},
                                   {"hash", b.config_hash},
                                   {"splits", splits}};
  std::ofstream out(dir / "manifest.json");
  if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << '\n';
}

inline DataBundle load_bundle(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("dataset not found: " + manifest_path.string());
  const nlohmann::json m = nlohmann::json::parse(in);
  if (m.value("format", "") != "clan-forge-dataset") throw std::runtime_error("not a clan-forge dataset: " + dir.string());
  DataBundle b;
  b.config = m.at("config").get<DataConfig>();
  b.config_hash = m.at("hash").get<std::string>();
  const auto& s = m.at("splits");
  b.source_train = detail::read_split(dir, s.at("source_train"), b.config.scene);
  b.target_train = detail::read_split(dir, s.at("target_train"), b.config.scene);
  b.source_eval = detail::read_split(dir, s.at("source_eval"), b.config.scene);
  b.target_eval = detail::read_split(dir, s.at("target_eval"), b.config.scene);
  return b;
}

}  // namespace clan_forge

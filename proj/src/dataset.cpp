#include "varp/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <fmt/format.h>

#include "varp/errors.hpp"

namespace varp {

namespace {

const NamedColor& find_color(const std::vector<NamedColor>& palette, const std::string& name, const char* what) {
  auto it = std::find_if(palette.begin(), palette.end(), [&](const NamedColor& c) { return c.name == name; });
  if (it == palette.end()) throw ConfigError(fmt::format("unknown {} '{}'", what, name));
  return *it;
}

bool contains(const std::vector<std::string>& v, const std::string& s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

bool is_subject_tuple(const SubjectSpec& s, const std::string& cls, const std::string& fill, const std::string& stroke) {
  return cls == s.cls && fill == s.fill && stroke == s.stroke;
}

// Signed inside test for the unit shape centered at the origin with half-size 1.
bool inside(const std::string& cls, double x, double y) {
  if (cls == "circle") return x * x + y * y <= 1.0;
  if (cls == "square") return std::abs(x) <= 0.85 && std::abs(y) <= 0.85;
  if (cls == "triangle") {
    // Apex up; y grows downward.
    if (y > 0.8 || y < -1.0) return false;
    const double half_width = (y + 1.0) / 1.8;
    return std::abs(x) <= half_width;
  }
  if (cls == "cross") return (std::abs(x) <= 0.33 && std::abs(y) <= 1.0) || (std::abs(y) <= 0.33 && std::abs(x) <= 1.0);
  throw ConfigError(fmt::format("unknown shape class '{}'", cls));
}

Sample draw(const SyntheticSpec& spec, std::mt19937_64& rng, const std::string& cls, const std::string& fill,
            const std::string& stroke, const std::string& bg, bool subject) {
  std::uniform_real_distribution<double> jit(-spec.jitter, spec.jitter);
  std::uniform_real_distribution<double> size(spec.size_min, spec.size_max);
  const double c = 0.5 * static_cast<double>(spec.image_size);
  ShapeParams sp{.cls = cls,
                 .fill = find_color(spec.fills, fill, "fill color"),
                 .background = find_color(spec.backgrounds, bg, "background"),
                 .outline = stroke == "outline",
                 .cx = c + jit(rng),
                 .cy = c + jit(rng),
                 .half = size(rng) * static_cast<double>(spec.image_size)};
  Sample s;
  s.image = render_shape(sp, spec.image_size);
  s.cls = cls;
  s.fill = fill;
  s.stroke = stroke;
  s.background = bg;
  s.is_subject = subject;
  s.prompt = subject ? fmt::format("<S*> {} on {}", cls, bg) : fmt::format("a {} on {}", cls, bg);
  return s;
}

}  // namespace

void validate(const SyntheticSpec& spec) {
  if (spec.image_size == 0 || spec.classes.empty() || spec.fills.empty() || spec.backgrounds.empty() ||
      spec.strokes.empty()) {
    throw ConfigError("synthetic spec: empty attribute list");
  }
  if (!(spec.size_min > 0.0 && spec.size_min <= spec.size_max)) throw ConfigError("synthetic spec: bad size range");
  for (const auto& s : spec.strokes) {
    if (s != "none" && s != "outline") throw ConfigError(fmt::format("unknown stroke '{}'", s));
  }
  const auto& sub = spec.subject;
  if (!contains(spec.classes, sub.cls)) throw ConfigError(fmt::format("subject class '{}' not in class list", sub.cls));
  find_color(spec.fills, sub.fill, "subject fill");
  find_color(spec.backgrounds, sub.background, "subject background");
  if (sub.stroke != "none" && sub.stroke != "outline") throw ConfigError(fmt::format("unknown stroke '{}'", sub.stroke));
  if (sub.count == 0) throw ConfigError("subject set must hold at least one image");
  bool admissible = false;
  for (const auto& f : spec.fills) {
    for (const auto& s : spec.strokes) admissible = admissible || !is_subject_tuple(sub, sub.cls, f.name, s);
  }
  if (!admissible) {
    throw ConfigError(fmt::format("subject tuple ({}, {}, {}) collides with every generic '{}' sample", sub.cls,
                                  sub.fill, sub.stroke, sub.cls));
  }
}

Image render_shape(const ShapeParams& shape, std::size_t size) {
  Image img(size, size);
  const double stroke_width = 1.5 / shape.half;
  // 3x3 supersampling for soft edges.
  constexpr int kSub = 3;
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      double acc[3] = {0, 0, 0};
      for (int sy = 0; sy < kSub; ++sy) {
        for (int sx = 0; sx < kSub; ++sx) {
          const double px = static_cast<double>(x) + (sx + 0.5) / kSub;
          const double py = static_cast<double>(y) + (sy + 0.5) / kSub;
          const double ux = (px - shape.cx) / shape.half;
          const double uy = (py - shape.cy) / shape.half;
          double rgb[3] = {shape.background.r, shape.background.g, shape.background.b};
          if (inside(shape.cls, ux, uy)) {
            const double shrink = 1.0 - stroke_width;
            const bool edge = shape.outline && !inside(shape.cls, ux / shrink, uy / shrink);
            if (edge) {
              rgb[0] = rgb[1] = rgb[2] = 0.1;
            } else {
              rgb[0] = shape.fill.r;
              rgb[1] = shape.fill.g;
              rgb[2] = shape.fill.b;
            }
          }
          for (int c = 0; c < 3; ++c) acc[c] += rgb[c];
        }
      }
      for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = acc[c] / (kSub * kSub);
    }
  }
  return img;
}

Dataset generate_synthetic_dataset(const SyntheticSpec& spec, std::uint64_t seed) {
  validate(spec);
  Dataset ds;
  const auto& sub = spec.subject;
  for (std::size_t ci = 0; ci < spec.classes.size(); ++ci) {
    for (std::size_t i = 0; i < spec.samples_per_class; ++i) {
      // Per-image seed so that generation order does not matter.
      std::mt19937_64 rng(seed ^ (0x9E3779B97F4A7C15ULL * (ci * 1000003ULL + i + 1)));
      std::string fill, stroke;
      do {
        fill = spec.fills[rng() % spec.fills.size()].name;
        stroke = spec.strokes[rng() % spec.strokes.size()];
      } while (is_subject_tuple(sub, spec.classes[ci], fill, stroke));
      const auto& bg = spec.backgrounds[rng() % spec.backgrounds.size()].name;
      ds.generic.push_back(draw(spec, rng, spec.classes[ci], fill, stroke, bg, false));
    }
  }
  for (std::size_t i = 0; i < sub.count; ++i) {
    std::mt19937_64 rng(seed ^ (0xD1B54A32D192ED03ULL * (i + 1)));
    ds.subject.push_back(draw(spec, rng, sub.cls, sub.fill, sub.stroke, sub.background, true));
  }
  return ds;
}

Image resize_center_crop(const Image& image, double factor) {
  if (image.height != image.width) throw ContractError("augment expects a square image");
  const std::size_t n = image.height;
  const double c = 0.5 * static_cast<double>(n);
  Image out(n, n);
  auto sample = [&](double sy, double sx, std::size_t ch) {
    sy = std::clamp(sy, 0.0, static_cast<double>(n - 1));
    sx = std::clamp(sx, 0.0, static_cast<double>(n - 1));
    const auto y0 = static_cast<std::size_t>(std::floor(sy));
    const auto x0 = static_cast<std::size_t>(std::floor(sx));
    const std::size_t y1 = std::min(y0 + 1, n - 1), x1 = std::min(x0 + 1, n - 1);
    const double fy = sy - static_cast<double>(y0), fx = sx - static_cast<double>(x0);
    return (1 - fy) * ((1 - fx) * image.at(y0, x0, ch) + fx * image.at(y0, x1, ch)) +
           fy * ((1 - fx) * image.at(y1, x0, ch) + fx * image.at(y1, x1, ch));
  };
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      // Pixel centers of the upscaled image mapped back to the source.
      const double sy = (static_cast<double>(y) + 0.5 - c) / factor + c - 0.5;
      const double sx = (static_cast<double>(x) + 0.5 - c) / factor + c - 0.5;
      for (std::size_t ch = 0; ch < 3; ++ch) out.at(y, x, ch) = sample(sy, sx, ch);
    }
  }
  return out;
}

Image augment(const Image& image, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> factor(1.0, 1.25);
  return resize_center_crop(image, factor(rng));
}

Image noise_image(std::size_t size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(size, size);
  for (double& p : img.pixels) p = u(rng);
  return img;
}

}  // namespace varp

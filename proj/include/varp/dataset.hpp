#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "varp/image.hpp"

namespace varp {

struct NamedColor {
  std::string name;
  double r = 0.0, g = 0.0, b = 0.0;
};

// The subject: one class rendered with a fixed attribute tuple that the
// generic sampler never produces.
struct SubjectSpec {
  std::string cls = "circle";
  std::string fill = "pink";
  std::string stroke = "outline";
  std::string background = "white";
  std::size_t count = 5;
};

struct SyntheticSpec {
  std::size_t image_size = 32;
  std::vector<std::string> classes{"circle", "square", "triangle", "cross"};
  std::vector<NamedColor> fills{{"red", 0.90, 0.15, 0.15},   {"green", 0.15, 0.75, 0.20}, {"blue", 0.20, 0.30, 0.90},
                                {"yellow", 0.95, 0.85, 0.15}, {"pink", 0.95, 0.45, 0.75}, {"cyan", 0.10, 0.80, 0.85}};
  std::vector<NamedColor> backgrounds{{"white", 0.95, 0.95, 0.95},
                                      {"black", 0.05, 0.05, 0.05},
                                      {"gray", 0.50, 0.50, 0.50},
                                      {"sand", 0.85, 0.75, 0.55}};
  std::vector<std::string> strokes{"none", "outline"};
  // Shape half-size as a fraction of the image side.
  double size_min = 0.22;
  double size_max = 0.34;
  // Maximum center offset in pixels.
  double jitter = 3.0;
  std::size_t samples_per_class = 200;
  SubjectSpec subject;
};

struct Sample {
  Image image;
  std::string prompt;
  std::string cls;
  std::string fill;
  std::string stroke;
  std::string background;
  bool is_subject = false;
};

struct Dataset {
  std::vector<Sample> generic;
  std::vector<Sample> subject;
};

// Throws ConfigError when the subject tuple is unknown or when the generic
// sampler has no admissible tuple left for the subject class.
void validate(const SyntheticSpec& spec);

// Deterministic in (spec, seed). Generic prompts read "a <class> on <bg>",
// subject prompts "<S*> <class> on <bg>".
Dataset generate_synthetic_dataset(const SyntheticSpec& spec, std::uint64_t seed);

struct ShapeParams {
  std::string cls;
  NamedColor fill;
  NamedColor background;
  bool outline = false;
  double cx = 0.0, cy = 0.0, half = 0.0;
};

Image render_shape(const ShapeParams& shape, std::size_t size);

// Random resize by u ~ Uniform[1, 1.25] (bilinear) followed by a center
// crop back to the original extent.
Image augment(const Image& image, std::uint64_t seed);
Image resize_center_crop(const Image& image, double factor);

// i.i.d. uniform [0, 1] pixels.
Image noise_image(std::size_t size, std::uint64_t seed);

}  // namespace varp

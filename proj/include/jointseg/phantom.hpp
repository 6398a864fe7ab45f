#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "jointseg/labels.hpp"
#include "jointseg/volume.hpp"

namespace jointseg {

// Synthetic brain geometry on a cubic grid. Intensities are already in the
// z-scored range so out-of-range fill values stay out of distribution.
struct PhantomConfig {
  int grid_size = 32;
  double noise_std = 0.12;
  // Indexed by joint class id; the lesion slot is unused for anatomy.
  std::array<double, kJointClassCount> t1_means{-1.8, 0.0, 0.5, 1.5, 0.0, -1.1, -0.5, 1.0};
  std::array<double, kJointClassCount> flair_means{-1.5, 0.4, 0.0, -0.3, 0.0, -0.9, 0.2, -0.6};
  // Relative per-subject jitter of structure placement and size.
  double jitter = 0.05;

  int lesion_blobs_min = 1;
  int lesion_blobs_max = 4;
  double lesion_radius_min = 2.5;  // voxels
  double lesion_radius_max = 5.0;
  int64_t lesion_voxels_min = 60;
  int64_t lesion_voxels_max = 1500;
  // Bimodal T1 content: necrotic-like core near background, rim near GM.
  double lesion_core_t1 = -1.7;
  double lesion_rim_t1 = 0.05;
  double lesion_core_fraction = 0.55;
  double lesion_flair = 2.6;
  double lesion_flair_margin = 1.5;

  uint64_t seed = 0;

  // Throws ConfigError.
  void validate() const;
};

struct AnatomyPhantom {
  Volume t1;
  LabelMap labels;
};

struct LesionPhantom {
  Volume t1;
  Volume flair;
  LesionMask lesion;
  // Anatomy underneath the lesion. Evaluation-only.
  LabelMap full_gt;
};

AnatomyPhantom generate_anatomy_phantom(const PhantomConfig& cfg, uint64_t seed);
LesionPhantom generate_lesion_phantom(const PhantomConfig& cfg, uint64_t seed);

struct RandomFillSpec {
  std::vector<float> fill_values{-5.0f, -2.0f, -1.0f, 1.0f, 2.0f, 5.0f};

  void validate() const;
  float draw(uint64_t seed) const;
};

struct PseudoLesionSample {
  Volume x_p;
  LabelMap y_p;
  LesionMask y_l;
  LabelMap hidden_y_a;
  std::string source_anatomy_id;
  std::string source_lesion_id;
};

// x_p = x_a (1 - y_l) + x_l y_l;  y_p = y_a (1 - y_l) + c_L y_l.
PseudoLesionSample compose_pseudo_lesion(const Volume& x_a, const LabelMap& y_a, const Volume& x_l_t1,
                                         const LesionMask& y_l);

// Constant fill inside the mask, input elsewhere.
Volume fill_lesion(const Volume& x, const LesionMask& mask, float fill_value);
std::pair<Volume, float> randomize_lesion_content(const Volume& x, const LesionMask& mask, const RandomFillSpec& spec,
                                                  uint64_t seed);

}  // namespace jointseg

#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>

#include "jointseg/volume.hpp"

namespace jointseg {

// Joint label space. The lesion id sits between the anatomy ids, so anatomy
// heads index their channels through kAnatomyClassIds.
enum ClassId : int32_t {
  kBackground = 0,
  kGrayMatter = 1,
  kBasalGanglia = 2,
  kWhiteMatter = 3,
  kLesion = 4,
  kVentricles = 5,
  kCerebellum = 6,
  kBrainStem = 7,
};

inline constexpr int kJointClassCount = 8;
inline constexpr int kAnatomyClassCount = 7;
inline constexpr std::array<int32_t, kAnatomyClassCount> kAnatomyClassIds = {
    kBackground, kGrayMatter, kBasalGanglia, kWhiteMatter, kVentricles, kCerebellum, kBrainStem};

std::string_view class_name(int32_t id);
// Channel of `id` in an anatomy head, or -1 for the lesion class.
int anatomy_channel(int32_t id);

struct Rgb {
  uint8_t r, g, b;
};
// Overlay colours: GM red, WM blue, ventricles cyan, basal ganglia green,
// brain stem white, cerebellum magenta. Lesion yellow, background black.
Rgb class_colour(int32_t id);

// Many-to-one id reduction with a catch-all target for unlisted ids.
struct MappingTable {
  std::map<int32_t, int32_t> entries;
  int32_t default_class = kGrayMatter;
  int target_classes = kJointClassCount;

  int32_t map(int32_t source) const;

  // The Freesurfer colour-LUT reduction onto the 8 joint classes.
  static MappingTable freesurfer();
  // Maps every id in [0, classes) to itself.
  static MappingTable identity(int classes);
};

// Throws InputError on negative ids.
LabelMap remap_labels(const LabelMap& raw, const MappingTable& table);

// Anatomy-head argmax (channel indices) -> joint class ids.
LabelMap anatomy_channels_to_ids(const LabelMap& channels);

}  // namespace jointseg

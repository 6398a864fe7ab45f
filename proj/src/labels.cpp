#include "jointseg/labels.hpp"

#include <initializer_list>

#include "jointseg/error.hpp"

namespace jointseg {

std::string_view class_name(int32_t id) {
  switch (id) {
    case kBackground: return "background";
    case kGrayMatter: return "gray_matter";
    case kBasalGanglia: return "basal_ganglia";
    case kWhiteMatter: return "white_matter";
    case kLesion: return "lesion";
    case kVentricles: return "ventricles";
    case kCerebellum: return "cerebellum";
    case kBrainStem: return "brain_stem";
    default: return "unknown";
  }
}

int anatomy_channel(int32_t id) {
  for (int c = 0; c < kAnatomyClassCount; ++c) {
    if (kAnatomyClassIds[static_cast<size_t>(c)] == id) return c;
  }
  return -1;
}

Rgb class_colour(int32_t id) {
  switch (id) {
    case kGrayMatter: return {255, 0, 0};
    case kBasalGanglia: return {0, 200, 0};
    case kWhiteMatter: return {0, 0, 255};
    case kLesion: return {255, 220, 0};
    case kVentricles: return {0, 255, 255};
    case kCerebellum: return {255, 0, 255};
    case kBrainStem: return {255, 255, 255};
    default: return {0, 0, 0};
  }
}

int32_t MappingTable::map(int32_t source) const {
  if (source < 0) throw InputError("negative label id " + std::to_string(source));
  auto it = entries.find(source);
  return it == entries.end() ? default_class : it->second;
}

MappingTable MappingTable::freesurfer() {
  MappingTable t;
  auto assign = [&t](std::initializer_list<int32_t> ids, int32_t target) {
    for (int32_t id : ids) t.entries.emplace(id, target);
  };
  assign({0, 1, 24, 6, 40, 45, 15}, kBackground);
  assign({2, 41, 251, 252, 253, 254, 255, 30, 62, 77}, kWhiteMatter);
  assign({9, 10, 11, 12, 13, 17, 18, 26, 48, 49, 50, 51, 52, 53, 54, 58}, kBasalGanglia);
  assign({25, 57}, kLesion);
  assign({4, 5, 14, 43, 44, 72, 31, 63}, kVentricles);
  assign({7, 8, 46, 47}, kCerebellum);
  assign({16, 28, 60}, kBrainStem);
  t.default_class = kGrayMatter;
  return t;
}

MappingTable MappingTable::identity(int classes) {
  MappingTable t;
  for (int32_t id = 0; id < classes; ++id) t.entries.emplace(id, id);
  t.default_class = 0;
  t.target_classes = classes;
  return t;
}

LabelMap remap_labels(const LabelMap& raw, const MappingTable& table) {
  LabelMap out = LabelMap::filled(raw.shape, table.target_classes, 0);
  // Raw maps carry few distinct ids, so memoise lookups.
  std::map<int32_t, int32_t> seen;
  for (size_t i = 0; i < raw.data.size(); ++i) {
    const int32_t id = raw.data[i];
    auto it = seen.find(id);
    if (it == seen.end()) it = seen.emplace(id, table.map(id)).first;
    out.data[i] = it->second;
  }
  return out;
}

LabelMap anatomy_channels_to_ids(const LabelMap& channels) {
  LabelMap out = LabelMap::filled(channels.shape, kJointClassCount, 0);
  for (size_t i = 0; i < channels.data.size(); ++i) {
    const int32_t c = channels.data[i];
    if (c < 0 || c >= kAnatomyClassCount) throw InputError("anatomy channel out of range");
    out.data[i] = kAnatomyClassIds[static_cast<size_t>(c)];
  }
  return out;
}

}  // namespace jointseg

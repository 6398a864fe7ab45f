#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>

#include "jointseg/volume.hpp"

namespace jointseg {

struct NiftiMetadata {
  int16_t datatype = 0;
  int16_t bitpix = 0;
  float scl_slope = 0.0f;
  float scl_inter = 0.0f;
  std::string description;
  bool byte_swapped = false;
  bool gzipped = false;
};

// NIfTI-1 single-file (.nii or .nii.gz). Intensities are converted to float
// with scl_slope/scl_inter applied; byte order is normalised on read.
std::pair<Volume, NiftiMetadata> load_volume(const std::filesystem::path& path);
// Writes float32. A ".gz" suffix selects gzip compression.
void save_volume(const std::filesystem::path& path, const Volume& v, const std::string& description = {});

// Integer payloads. Raw maps get class_count = max id + 1.
LabelMap load_labels(const std::filesystem::path& path);
void save_labels(const std::filesystem::path& path, const LabelMap& labels, const Vec3& spacing = {1, 1, 1});

LesionMask load_mask(const std::filesystem::path& path);
void save_mask(const std::filesystem::path& path, const LesionMask& mask, const Vec3& spacing = {1, 1, 1});

// Channel-major 4D float32 payload (dim[4] = channels).
ProbabilityMap load_probability_map(const std::filesystem::path& path);
void save_probability_map(const std::filesystem::path& path, const ProbabilityMap& pm,
                          const Vec3& spacing = {1, 1, 1});

}  // namespace jointseg

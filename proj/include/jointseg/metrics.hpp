#pragma once

#include <optional>
#include <span>
#include <vector>

#include "jointseg/volume.hpp"

namespace jointseg {

// 2|P∩G| / (|P|+|G|) for one class; 1.0 when the class is absent from both.
double dice_score(const LabelMap& pred, const LabelMap& gt, int32_t class_id);
double dice_score(const LesionMask& pred, const LesionMask& gt);

// Voxels of the mask with at least one face neighbour outside it (the grid
// border counts as outside).
LesionMask surface(const LesionMask& mask);

// 95th percentile (linear interpolation on the sorted pooled list) of the
// surface distances pred->gt and gt->pred, in mm. std::nullopt when either
// mask is empty: the metric is undefined there, never zero.
std::optional<double> hd95(const LesionMask& pred, const LesionMask& gt, const Vec3& spacing);

// Linear-interpolation percentile of an unsorted sample, q in [0, 1].
double percentile(std::vector<double> values, double q);

// Exact squared Euclidean distance (mm^2) from every voxel to the nearest
// set voxel of `mask`; +inf everywhere when the mask is empty.
std::vector<double> squared_distance_transform(const LesionMask& mask, const Vec3& spacing);

// Per-voxel mode; ties go to the lowest class id.
LabelMap majority_vote(std::span<const LabelMap> predictions);

// Mean Dice over the anatomy classes present in `gt` restricted to `region`.
// Voxels outside the region are ignored in both maps.
std::optional<double> region_mean_dice(const LabelMap& pred, const LabelMap& gt, const LesionMask& region);

}  // namespace jointseg

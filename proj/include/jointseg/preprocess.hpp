#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "jointseg/volume.hpp"

namespace jointseg {

// Z-score using statistics over `brain_mask` (whole volume when null). The
// standard deviation is the population one. Throws DegenerateInputError on
// zero variance or fewer than two foreground voxels.
Volume zscore_normalize(const Volume& v, const LesionMask* brain_mask = nullptr);

struct PatchSpec {
  int size = 32;
  int overlap = 20;

  void validate() const;
  int stride() const { return size - overlap; }
};

using Offset3 = std::array<int64_t, 3>;

// Start offsets along one axis: stride-spaced, last one clamped so the patch
// ends at the boundary. Extents smaller than the patch give {0} (padded).
std::vector<int64_t> axis_offsets(int64_t extent, const PatchSpec& spec);

struct PatchGrid {
  Shape3 shape;         // original volume
  Shape3 padded_shape;  // each axis at least spec.size
  std::vector<Offset3> offsets;
};

PatchGrid plan_patches(const Shape3& shape, const PatchSpec& spec);

struct Patch {
  Offset3 offset{};
  Volume data;  // spec.size^3, zero outside the source volume
};

std::vector<Patch> extract_patches(const Volume& v, const PatchSpec& spec);

// Crops of size^3 at `offset`, zero-filled where the window leaves the grid.
Volume crop(const Volume& v, const Offset3& offset, int size);
LabelMap crop(const LabelMap& m, const Offset3& offset, int size);
LesionMask crop(const LesionMask& m, const Offset3& offset, int size);

// Mean of all covering patch probabilities per voxel. Throws CoverageError
// when a voxel of out_shape is not covered.
ProbabilityMap reassemble(const std::vector<ProbabilityMap>& patches, const std::vector<Offset3>& offsets,
                          const PatchSpec& spec, const Shape3& out_shape);

}  // namespace jointseg

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace jointseg {

using Vec3 = std::array<double, 3>;

// Grid extent. Voxel (x, y, z) lives at (z * ny + y) * nx + x, which is the
// NIfTI on-disk order and matches a (D, H, W) = (nz, ny, nx) tensor.
struct Shape3 {
  int64_t nx = 0;
  int64_t ny = 0;
  int64_t nz = 0;

  int64_t voxels() const { return nx * ny * nz; }
  int64_t index(int64_t x, int64_t y, int64_t z) const { return (z * ny + y) * nx + x; }
  bool valid() const { return nx >= 1 && ny >= 1 && nz >= 1; }
  std::string str() const;

  friend bool operator==(const Shape3&, const Shape3&) = default;
};

inline Shape3 cube(int64_t n) { return {n, n, n}; }

// One MR sequence: real intensities plus physical placement.
struct Volume {
  Shape3 shape;
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};
  std::vector<float> data;

  static Volume zeros(Shape3 shape);

  float& at(int64_t x, int64_t y, int64_t z) { return data[shape.index(x, y, z)]; }
  float at(int64_t x, int64_t y, int64_t z) const { return data[shape.index(x, y, z)]; }

  // Throws ShapeError / InputError when the invariants do not hold.
  void validate() const;
  bool all_finite() const;
};

// Dense class-id field. class_count bounds the ids: every voxel is in
// [0, class_count).
struct LabelMap {
  Shape3 shape;
  int class_count = 0;
  std::vector<int32_t> data;

  static LabelMap filled(Shape3 shape, int class_count, int32_t value = 0);

  int32_t& at(int64_t x, int64_t y, int64_t z) { return data[shape.index(x, y, z)]; }
  int32_t at(int64_t x, int64_t y, int64_t z) const { return data[shape.index(x, y, z)]; }

  void validate() const;
  // Number of voxels carrying each id in [0, class_count).
  std::vector<int64_t> histogram() const;
};

// Binary lesion partition L. The anatomy partition is its complement.
struct LesionMask {
  Shape3 shape;
  std::vector<uint8_t> data;

  static LesionMask zeros(Shape3 shape);
  static LesionMask ones(Shape3 shape);
  static LesionMask from_labels(const LabelMap& labels, int32_t class_id);

  uint8_t& at(int64_t x, int64_t y, int64_t z) { return data[shape.index(x, y, z)]; }
  uint8_t at(int64_t x, int64_t y, int64_t z) const { return data[shape.index(x, y, z)]; }

  int64_t count() const;
  bool empty() const { return count() == 0; }
  LesionMask complement() const;
  void validate() const;
};

// Per-voxel class probabilities, channel-major: data[c * voxels + i].
struct ProbabilityMap {
  int channels = 0;
  Shape3 shape;
  std::vector<float> data;

  static ProbabilityMap zeros(int channels, Shape3 shape);

  float& at(int c, int64_t i) { return data[static_cast<int64_t>(c) * shape.voxels() + i]; }
  float at(int c, int64_t i) const { return data[static_cast<int64_t>(c) * shape.voxels() + i]; }

  // Largest deviation of a per-voxel channel sum from 1.
  double max_normalization_error() const;
};

// Lowest channel wins ties.
LabelMap argmax(const ProbabilityMap& probs);
ProbabilityMap one_hot(const LabelMap& labels, int classes);

void require_same_shape(const Shape3& a, const Shape3& b, const char* what);

}  // namespace jointseg

#include "jointseg/preprocess.hpp"

#include <algorithm>
#include <cmath>

#include "jointseg/error.hpp"

namespace jointseg {

Volume zscore_normalize(const Volume& v, const LesionMask* brain_mask) {
  v.validate();
  if (!v.all_finite()) throw InputError("zscore_normalize: non-finite intensities");
  if (brain_mask != nullptr) require_same_shape(v.shape, brain_mask->shape, "zscore_normalize");

  double sum = 0.0;
  int64_t n = 0;
  for (size_t i = 0; i < v.data.size(); ++i) {
    if (brain_mask != nullptr && brain_mask->data[i] == 0) continue;
    sum += v.data[i];
    ++n;
  }
  if (n < 2) throw DegenerateInputError("zscore_normalize: fewer than two foreground voxels");
  const double mean = sum / static_cast<double>(n);
  double sq = 0.0;
  for (size_t i = 0; i < v.data.size(); ++i) {
    if (brain_mask != nullptr && brain_mask->data[i] == 0) continue;
    const double d = v.data[i] - mean;
    sq += d * d;
  }
  const double sd = std::sqrt(sq / static_cast<double>(n));
  if (!(sd > 1e-12)) throw DegenerateInputError("zscore_normalize: zero variance");

  Volume out = v;
  for (auto& x : out.data) x = static_cast<float>((x - mean) / sd);
  return out;
}

void PatchSpec::validate() const {
  if (size < 1) throw ConfigError("patch size must be positive");
  if (overlap < 0 || overlap >= size) throw ConfigError("patch overlap must lie in [0, size)");
}

std::vector<int64_t> axis_offsets(int64_t extent, const PatchSpec& spec) {
  spec.validate();
  std::vector<int64_t> out{0};
  if (extent <= spec.size) return out;
  const int64_t last = extent - spec.size;
  for (int64_t o = spec.stride(); o < last; o += spec.stride()) out.push_back(o);
  out.push_back(last);
  return out;
}

PatchGrid plan_patches(const Shape3& shape, const PatchSpec& spec) {
  if (!shape.valid()) throw ShapeError("plan_patches: empty shape");
  PatchGrid g;
  g.shape = shape;
  const int64_t p = spec.size;
  g.padded_shape = {std::max(shape.nx, p), std::max(shape.ny, p), std::max(shape.nz, p)};
  const auto ox = axis_offsets(shape.nx, spec);
  const auto oy = axis_offsets(shape.ny, spec);
  const auto oz = axis_offsets(shape.nz, spec);
  for (int64_t z : oz) {
    for (int64_t y : oy) {
      for (int64_t x : ox) g.offsets.push_back({x, y, z});
    }
  }
  return g;
}

namespace {

template <typename Grid, typename T>
void copy_window(const Grid& src, Grid& dst, const Offset3& offset, int size) {
  for (int64_t z = 0; z < size; ++z) {
    const int64_t sz = offset[2] + z;
    if (sz < 0 || sz >= src.shape.nz) continue;
    for (int64_t y = 0; y < size; ++y) {
      const int64_t sy = offset[1] + y;
      if (sy < 0 || sy >= src.shape.ny) continue;
      for (int64_t x = 0; x < size; ++x) {
        const int64_t sx = offset[0] + x;
        if (sx < 0 || sx >= src.shape.nx) continue;
        dst.data[static_cast<size_t>(dst.shape.index(x, y, z))] =
            static_cast<T>(src.data[static_cast<size_t>(src.shape.index(sx, sy, sz))]);
      }
    }
  }
}

}  // namespace

Volume crop(const Volume& v, const Offset3& offset, int size) {
  Volume out = Volume::zeros(cube(size));
  out.spacing = v.spacing;
  for (int i = 0; i < 3; ++i) {
    out.origin[static_cast<size_t>(i)] =
        v.origin[static_cast<size_t>(i)] + static_cast<double>(offset[static_cast<size_t>(i)]) * v.spacing[static_cast<size_t>(i)];
  }
  copy_window<Volume, float>(v, out, offset, size);
  return out;
}

LabelMap crop(const LabelMap& m, const Offset3& offset, int size) {
  LabelMap out = LabelMap::filled(cube(size), m.class_count, 0);
  copy_window<LabelMap, int32_t>(m, out, offset, size);
  return out;
}

LesionMask crop(const LesionMask& m, const Offset3& offset, int size) {
  LesionMask out = LesionMask::zeros(cube(size));
  copy_window<LesionMask, uint8_t>(m, out, offset, size);
  return out;
}

std::vector<Patch> extract_patches(const Volume& v, const PatchSpec& spec) {
  v.validate();
  const PatchGrid grid = plan_patches(v.shape, spec);
  std::vector<Patch> out;
  out.reserve(grid.offsets.size());
  for (const auto& o : grid.offsets) out.push_back({o, crop(v, o, spec.size)});
  return out;
}

ProbabilityMap reassemble(const std::vector<ProbabilityMap>& patches, const std::vector<Offset3>& offsets,
                          const PatchSpec& spec, const Shape3& out_shape) {
  if (patches.size() != offsets.size()) throw InputError("reassemble: patch/offset count mismatch");
  if (patches.empty()) throw CoverageError("reassemble: no patches");
  const int channels = patches.front().channels;
  const int64_t p = spec.size;
  ProbabilityMap sum = ProbabilityMap::zeros(channels, out_shape);
  std::vector<int32_t> cover(static_cast<size_t>(out_shape.voxels()), 0);
  const int64_t n_out = out_shape.voxels();

  for (size_t k = 0; k < patches.size(); ++k) {
    const auto& patch = patches[k];
    if (patch.channels != channels || !(patch.shape == cube(p))) {
      throw ShapeError("reassemble: patch " + std::to_string(k) + " has inconsistent shape");
    }
    const auto& o = offsets[k];
    const int64_t n_patch = patch.shape.voxels();
    for (int64_t z = 0; z < p; ++z) {
      const int64_t gz = o[2] + z;
      if (gz < 0 || gz >= out_shape.nz) continue;
      for (int64_t y = 0; y < p; ++y) {
        const int64_t gy = o[1] + y;
        if (gy < 0 || gy >= out_shape.ny) continue;
        for (int64_t x = 0; x < p; ++x) {
          const int64_t gx = o[0] + x;
          if (gx < 0 || gx >= out_shape.nx) continue;
          const int64_t gi = out_shape.index(gx, gy, gz);
          const int64_t pi = patch.shape.index(x, y, z);
          for (int c = 0; c < channels; ++c) {
            sum.data[static_cast<size_t>(c * n_out + gi)] += patch.data[static_cast<size_t>(c * n_patch + pi)];
          }
          ++cover[static_cast<size_t>(gi)];
        }
      }
    }
  }
  for (int64_t i = 0; i < n_out; ++i) {
    const int32_t k = cover[static_cast<size_t>(i)];
    if (k == 0) throw CoverageError("reassemble: voxel " + std::to_string(i) + " is not covered by any patch");
    for (int c = 0; c < channels; ++c) sum.data[static_cast<size_t>(c * n_out + i)] /= static_cast<float>(k);
  }
  return sum;
}

}  // namespace jointseg

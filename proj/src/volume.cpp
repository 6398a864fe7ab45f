#include "jointseg/volume.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "jointseg/error.hpp"

namespace jointseg {

std::string Shape3::str() const {
  std::ostringstream os;
  os << nx << "x" << ny << "x" << nz;
  return os.str();
}

void require_same_shape(const Shape3& a, const Shape3& b, const char* what) {
  if (!(a == b)) {
    throw ShapeError(std::string(what) + ": shape mismatch " + a.str() + " vs " + b.str());
  }
}

Volume Volume::zeros(Shape3 shape) {
  Volume v;
  v.shape = shape;
  v.data.assign(static_cast<size_t>(shape.voxels()), 0.0f);
  return v;
}

void Volume::validate() const {
  if (!shape.valid()) throw ShapeError("volume dimensions must be >= 1, got " + shape.str());
  if (static_cast<int64_t>(data.size()) != shape.voxels()) {
    throw ShapeError("volume payload does not match shape " + shape.str());
  }
  for (double s : spacing) {
    if (!(s > 0.0) || !std::isfinite(s)) throw InputError("voxel spacing must be positive");
  }
}

bool Volume::all_finite() const {
  return std::all_of(data.begin(), data.end(), [](float v) { return std::isfinite(v); });
}

LabelMap LabelMap::filled(Shape3 shape, int class_count, int32_t value) {
  LabelMap m;
  m.shape = shape;
  m.class_count = class_count;
  m.data.assign(static_cast<size_t>(shape.voxels()), value);
  return m;
}

void LabelMap::validate() const {
  if (!shape.valid()) throw ShapeError("label map dimensions must be >= 1, got " + shape.str());
  if (static_cast<int64_t>(data.size()) != shape.voxels()) {
    throw ShapeError("label payload does not match shape " + shape.str());
  }
  for (int32_t v : data) {
    if (v < 0 || v >= class_count) {
      throw InputError("label " + std::to_string(v) + " outside [0, " + std::to_string(class_count) + ")");
    }
  }
}

std::vector<int64_t> LabelMap::histogram() const {
  std::vector<int64_t> counts(static_cast<size_t>(std::max(class_count, 0)), 0);
  for (int32_t v : data) {
    if (v >= 0 && v < class_count) ++counts[static_cast<size_t>(v)];
  }
  return counts;
}

LesionMask LesionMask::zeros(Shape3 shape) {
  LesionMask m;
  m.shape = shape;
  m.data.assign(static_cast<size_t>(shape.voxels()), 0);
  return m;
}

LesionMask LesionMask::ones(Shape3 shape) {
  LesionMask m;
  m.shape = shape;
  m.data.assign(static_cast<size_t>(shape.voxels()), 1);
  return m;
}

LesionMask LesionMask::from_labels(const LabelMap& labels, int32_t class_id) {
  LesionMask m = zeros(labels.shape);
  for (size_t i = 0; i < labels.data.size(); ++i) m.data[i] = labels.data[i] == class_id ? 1 : 0;
  return m;
}

int64_t LesionMask::count() const {
  int64_t n = 0;
  for (uint8_t v : data) n += v != 0;
  return n;
}

LesionMask LesionMask::complement() const {
  LesionMask m = *this;
  for (auto& v : m.data) v = v ? 0 : 1;
  return m;
}

void LesionMask::validate() const {
  if (!shape.valid()) throw ShapeError("mask dimensions must be >= 1, got " + shape.str());
  if (static_cast<int64_t>(data.size()) != shape.voxels()) {
    throw ShapeError("mask payload does not match shape " + shape.str());
  }
  for (uint8_t v : data) {
    if (v > 1) throw InputError("lesion mask must be binary");
  }
}

ProbabilityMap ProbabilityMap::zeros(int channels, Shape3 shape) {
  ProbabilityMap p;
  p.channels = channels;
  p.shape = shape;
  p.data.assign(static_cast<size_t>(channels * shape.voxels()), 0.0f);
  return p;
}

double ProbabilityMap::max_normalization_error() const {
  double worst = 0.0;
  const int64_t n = shape.voxels();
  for (int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (int c = 0; c < channels; ++c) s += at(c, i);
    worst = std::max(worst, std::abs(s - 1.0));
  }
  return worst;
}

LabelMap argmax(const ProbabilityMap& probs) {
  LabelMap out = LabelMap::filled(probs.shape, probs.channels, 0);
  const int64_t n = probs.shape.voxels();
  for (int64_t i = 0; i < n; ++i) {
    int best = 0;
    float best_p = probs.at(0, i);
    for (int c = 1; c < probs.channels; ++c) {
      if (probs.at(c, i) > best_p) {
        best_p = probs.at(c, i);
        best = c;
      }
    }
    out.data[static_cast<size_t>(i)] = best;
  }
  return out;
}

ProbabilityMap one_hot(const LabelMap& labels, int classes) {
  ProbabilityMap p = ProbabilityMap::zeros(classes, labels.shape);
  const int64_t n = labels.shape.voxels();
  for (int64_t i = 0; i < n; ++i) {
    const int32_t v = labels.data[static_cast<size_t>(i)];
    if (v < 0 || v >= classes) {
      throw InputError("label " + std::to_string(v) + " not below class count " + std::to_string(classes));
    }
    p.at(v, i) = 1.0f;
  }
  return p;
}

}  // namespace jointseg

#include "jointseg/tensor_bridge.hpp"

#include <cstring>

#include "jointseg/error.hpp"
#include "jointseg/labels.hpp"

namespace jointseg {
namespace {

std::vector<int64_t> dims(const Shape3& s, int64_t channels) { return {1, channels, s.nz, s.ny, s.nx}; }

}  // namespace

torch::Tensor to_tensor(const Volume& v, torch::Dtype dtype) {
  auto t = torch::empty(dims(v.shape, 1), torch::kFloat);
  std::memcpy(t.data_ptr<float>(), v.data.data(), v.data.size() * sizeof(float));
  return t.to(dtype);
}

torch::Tensor to_tensor(const LesionMask& m, torch::Dtype dtype) {
  auto t = torch::empty(dims(m.shape, 1), torch::kFloat);
  auto* p = t.data_ptr<float>();
  for (size_t i = 0; i < m.data.size(); ++i) p[i] = m.data[i] ? 1.0f : 0.0f;
  return t.to(dtype);
}

torch::Tensor one_hot_tensor(const LabelMap& labels, int classes, torch::Dtype dtype) {
  const int64_t n = labels.shape.voxels();
  auto t = torch::zeros(dims(labels.shape, classes), torch::kFloat);
  auto* p = t.data_ptr<float>();
  for (int64_t i = 0; i < n; ++i) {
    const int32_t v = labels.data[static_cast<size_t>(i)];
    if (v < 0 || v >= classes) throw InputError("one_hot_tensor: label out of range");
    p[v * n + i] = 1.0f;
  }
  return t.to(dtype);
}

torch::Tensor anatomy_one_hot(const LabelMap& labels, torch::Dtype dtype) {
  const int64_t n = labels.shape.voxels();
  auto t = torch::zeros(dims(labels.shape, kAnatomyClassCount), torch::kFloat);
  auto* p = t.data_ptr<float>();
  for (int64_t i = 0; i < n; ++i) {
    const int c = anatomy_channel(labels.data[static_cast<size_t>(i)]);
    if (c < 0) throw InputError("anatomy target contains a non-anatomy label");
    p[c * n + i] = 1.0f;
  }
  return t.to(dtype);
}

torch::Tensor to_tensor(const ProbabilityMap& pm, torch::Dtype dtype) {
  auto t = torch::empty(dims(pm.shape, pm.channels), torch::kFloat);
  std::memcpy(t.data_ptr<float>(), pm.data.data(), pm.data.size() * sizeof(float));
  return t.to(dtype);
}

ProbabilityMap to_probability_map(const torch::Tensor& probs) {
  auto t = probs.detach();
  if (t.dim() == 5) {
    if (t.size(0) != 1) throw ShapeError("to_probability_map expects a single sample");
    t = t[0];
  }
  if (t.dim() != 4) throw ShapeError("to_probability_map expects [C, D, H, W]");
  t = t.to(torch::kFloat).contiguous();
  ProbabilityMap pm = ProbabilityMap::zeros(static_cast<int>(t.size(0)), {t.size(3), t.size(2), t.size(1)});
  std::memcpy(pm.data.data(), t.data_ptr<float>(), pm.data.size() * sizeof(float));
  return pm;
}

Volume to_volume(const torch::Tensor& t, const Volume& like) {
  auto c = t.detach().to(torch::kFloat).contiguous().view({-1});
  if (c.numel() != like.shape.voxels()) throw ShapeError("to_volume: element count mismatch");
  Volume v = like;
  std::memcpy(v.data.data(), c.data_ptr<float>(), v.data.size() * sizeof(float));
  return v;
}

torch::Tensor batch(std::span<const torch::Tensor> samples) {
  if (samples.empty()) throw InputError("batch: no samples");
  return torch::cat(std::vector<torch::Tensor>(samples.begin(), samples.end()), 0);
}

}  // namespace jointseg

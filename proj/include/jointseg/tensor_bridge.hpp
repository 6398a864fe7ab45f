#pragma once

#include <torch/torch.h>

#include <span>

#include "jointseg/volume.hpp"

namespace jointseg {

// Volumes become [1, 1, D, H, W] tensors with D = nz, H = ny, W = nx.
torch::Tensor to_tensor(const Volume& v, torch::Dtype dtype = torch::kFloat);
torch::Tensor to_tensor(const LesionMask& m, torch::Dtype dtype = torch::kFloat);
// [1, 7, D, H, W] one-hot over anatomy channels. Lesion ids are rejected.
torch::Tensor anatomy_one_hot(const LabelMap& labels, torch::Dtype dtype = torch::kFloat);
// [1, C, D, H, W] one-hot over raw ids.
torch::Tensor one_hot_tensor(const LabelMap& labels, int classes, torch::Dtype dtype = torch::kFloat);
torch::Tensor to_tensor(const ProbabilityMap& p, torch::Dtype dtype = torch::kFloat);

// Takes a single-sample [1, C, D, H, W] (or [C, D, H, W]) tensor.
ProbabilityMap to_probability_map(const torch::Tensor& probs);
Volume to_volume(const torch::Tensor& t, const Volume& like);

torch::Tensor batch(std::span<const torch::Tensor> samples);

}  // namespace jointseg

#pragma once

#include <torch/torch.h>

#include <vector>

#include "jointseg/networks.hpp"

namespace jointseg {

inline constexpr double kDiceEps = 1e-5;

struct LossValue {
  torch::Tensor value;      // scalar, mean of per_class
  torch::Tensor per_class;  // [C]

  double item() const { return value.item<double>(); }
};

// Per class c: 1 - (2 sum p_c t_c + eps) / (sum p_c + sum t_c + eps). With
// reduce_batch the sums also run over the batch; otherwise per-sample terms
// are averaged over the batch. probs and target: [B, C, ...].
LossValue soft_dice_loss(const torch::Tensor& probs, const torch::Tensor& target, bool reduce_batch = true,
                         double eps = kDiceEps);

// g_A o f_theta with theta supplied per call; the stored extractor provides
// the architecture and normalisation statistics.
class AnatomyPath {
 public:
  AnatomyPath(const Extractor& extractor, const ParamSet& g_a, NormMode mode)
      : extractor_(&extractor), g_a_(&g_a), mode_(mode) {}

  torch::Tensor features(const torch::Tensor& x, const ParamSet& theta) const {
    return extract_features(extractor_->cfg, x, theta, extractor_->stats, mode_);
  }
  torch::Tensor probs(const torch::Tensor& x, const ParamSet& theta) const {
    return predict_anatomy(features(x, theta), *g_a_);
  }

 private:
  const Extractor* extractor_;
  const ParamSet* g_a_;
  NormMode mode_;
};

// x (1 - mask) + fill * mask with one fill per batch sample.
torch::Tensor randomize_tensor(const torch::Tensor& x, const torch::Tensor& mask, const std::vector<float>& fills);

struct InnerLossInputs {
  torch::Tensor x_sup;   // lesion-free anchor image
  torch::Tensor y_sup;   // its anatomy one-hot
  torch::Tensor x_test;  // image that may bear a lesion
  torch::Tensor mask;    // lesion partition L, same shape as x_test
  std::vector<float> fills;
};

struct InnerLossTerms {
  LossValue consistency;
  LossValue supervision;
  torch::Tensor total;

  double item() const { return total.item<double>(); }
};

// Consistency between the clean and lesion-randomised predictions (clean
// branch is the detached target) plus supervision on the anchor image.
// Throws DegenerateInputError when the mask leaves no anatomy region.
InnerLossTerms inner_loss(const AnatomyPath& path, const ParamSet& theta, const InnerLossInputs& in);

struct OuterLossTerms {
  LossValue pseudo;
  LossValue randomized;
  LossValue clean;
  torch::Tensor total;

  double item() const { return total.item<double>(); }
};

// Dice of the adapted path on x_p, x_tilde and x_a, all against y_a.
OuterLossTerms outer_loss(const AnatomyPath& path, const ParamSet& theta_adapted, const torch::Tensor& x_p,
                          const torch::Tensor& x_tilde, const torch::Tensor& x_a, const torch::Tensor& y_a);

}  // namespace jointseg

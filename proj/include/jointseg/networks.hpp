#pragma once

#include <torch/torch.h>

#include "jointseg/labels.hpp"
#include "jointseg/paramset.hpp"
#include "jointseg/random.hpp"

namespace jointseg {

// U-shaped feature extractor: `levels` resolution levels, filters doubling
// from base_filters, max-pool down, trilinear up, skip concatenation, and a
// linear 1x1x1 projection to feature_channels.
struct ExtractorConfig {
  int levels = 3;
  int base_filters = 8;
  int feature_channels = 8;
  int convs_per_block = 2;
  int in_channels = 1;

  void validate() const;
  int divisor() const { return 1 << (levels - 1); }
  friend bool operator==(const ExtractorConfig&, const ExtractorConfig&) = default;
};

// How batch normalisation obtains its statistics.
enum class NormMode {
  kRunning,     // stored running statistics (eval, adaptation, meta steps)
  kBatch,       // batch statistics, running statistics untouched
  kBatchTrack,  // batch statistics, running statistics updated
};

struct Extractor {
  ExtractorConfig cfg;
  ParamSet params;
  ParamSet stats;  // running_mean / running_var buffers
};

// Shallow head: one 1x1x1 convolution followed by softmax.
struct Head {
  ParamSet params;
  int in_channels = 0;
  int classes = 0;
};

struct FusionConfig {
  int feature_channels = 8;
  int hidden_channels = 8;
  int classes = kJointClassCount;

  friend bool operator==(const FusionConfig&, const FusionConfig&) = default;
};

// Attention fusion: a_F = sigmoid(conv(relu(bn(conv(relu(bn(conv([w_t1, w_f])))))))),
// w_J = w_t1 + a_F * w_f, then a 1x1x1 classifier and softmax.
struct Fusion {
  FusionConfig cfg;
  ParamSet params;
  ParamSet stats;
};

Extractor init_extractor(const ExtractorConfig& cfg, Rng& rng, torch::Dtype dtype = torch::kFloat);
Head init_head(int in_channels, int classes, Rng& rng, torch::Dtype dtype = torch::kFloat);
Fusion init_fusion(const FusionConfig& cfg, Rng& rng, torch::Dtype dtype = torch::kFloat);

// x: [B, 1, D, H, W] with D, H, W divisible by cfg.divisor(). Parameters are
// passed explicitly so adapted sets can be evaluated without touching the
// stored ones.
torch::Tensor extract_features(const ExtractorConfig& cfg, const torch::Tensor& x, const ParamSet& params,
                               const ParamSet& stats, NormMode mode);

inline torch::Tensor forward_t1(const Extractor& e, const torch::Tensor& x_t1, const ParamSet& theta, NormMode mode) {
  return extract_features(e.cfg, x_t1, theta, e.stats, mode);
}
inline torch::Tensor forward_flair(const Extractor& e, const torch::Tensor& x_flair, const ParamSet& phi,
                                   NormMode mode) {
  return extract_features(e.cfg, x_flair, phi, e.stats, mode);
}

torch::Tensor head_logits(const torch::Tensor& features, const ParamSet& head);
// [B, 7, ...] probabilities over the anatomy channels (kAnatomyClassIds order).
torch::Tensor predict_anatomy(const torch::Tensor& features, const ParamSet& g_a);
// [B, 2, ...]: channel 0 background, channel 1 lesion.
torch::Tensor predict_lesion(const torch::Tensor& features, const ParamSet& g_l);

struct FusionOutput {
  torch::Tensor probs;      // [B, classes, ...] in joint class-id order
  torch::Tensor attention;  // [B, 1, ...] in [0, 1]
};

FusionOutput fuse(const Fusion& f, const torch::Tensor& w_t1, const torch::Tensor& w_f, const ParamSet& psi,
                  NormMode mode);

}  // namespace jointseg

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "jointseg/dataset.hpp"
#include "jointseg/networks.hpp"
#include "jointseg/phantom.hpp"
#include "jointseg/preprocess.hpp"

namespace jointseg {

struct AugmentConfig {
  bool enabled = true;
  double gain_min = 0.9;
  double gain_max = 1.1;
  double shift_min = -0.1;
  double shift_max = 0.1;
};

struct PretrainConfig {
  int epochs = 30;
  int batch_size = 2;
  double lr = 1e-3;
};

struct MetaTrainConfig {
  double alpha = 0.005;  // inner step
  double beta = 1e-3;    // outer Adam learning rate
  int epochs = 20;
  int batch_size = 2;
  bool lesion_gate = true;
  bool inner_loop = true;  // false: L_o-only control
  int fold = 0;
};

enum class MaskSource { kGroundTruth, kPredicted };
std::string to_string(MaskSource m);
MaskSource parse_mask_source(const std::string& s);

struct JointTrainConfig {
  int epochs = 10;
  int batch_size = 2;
  double lr = 1e-3;
  int warmup_epochs = 2;  // leading epochs that update psi only
  MaskSource mask_source = MaskSource::kGroundTruth;
};

struct AdaptConfig {
  int steps = 10;
  double lr = 1e-4;
  int patience = 3;
  std::string support_id;  // empty: first anatomy training subject
};

struct EnsembleConfig {
  int folds = 5;
  int fills = 6;
  int members() const { return folds * fills; }
};

struct PipelineConfig {
  uint64_t seed = 7;
  PhantomConfig phantom;
  SplitCounts anatomy_counts{20, 4, 10};
  SplitCounts lesion_counts{20, 4, 10};
  ExtractorConfig extractor;
  int fusion_hidden = 8;
  PatchSpec patch;
  AugmentConfig augment;
  PretrainConfig pretrain;
  PretrainConfig lesion_pretrain{20, 2, 3e-3};
  int lesion_folds = 5;
  MetaTrainConfig meta;
  JointTrainConfig joint;
  AdaptConfig adapt;
  RandomFillSpec fills;
  EnsembleConfig ensemble{2, 2};

  FusionConfig fusion() const { return {extractor.feature_channels, fusion_hidden, kJointClassCount}; }

  // Throws ConfigError.
  void validate() const;
  // Canonical YAML; hashing it gives the config hash.
  std::string to_yaml() const;
  uint64_t hash() const;
};

// Missing keys keep their defaults; unknown keys and bad values throw
// ConfigError.
PipelineConfig load_config(const std::filesystem::path& path);
PipelineConfig parse_config(const std::string& yaml_text);
void save_config(const std::filesystem::path& path, const PipelineConfig& cfg);

}  // namespace jointseg

#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "jointseg/checkpoint.hpp"
#include "jointseg/config.hpp"
#include "jointseg/dataset.hpp"
#include "jointseg/preprocess.hpp"

namespace jointseg {

// Lesion-free anchor for the supervision term of L_i: one patch-sized crop.
struct SupportSample {
  std::string id;
  torch::Tensor x;  // [1, 1, p, p, p]
  torch::Tensor y;  // [1, 7, p, p, p]
};

// Centre crop of an anatomy subject.
SupportSample make_support(const Subject& s, int patch_size);
// cfg.support_id, or the first training subject when empty.
SupportSample pick_support(const std::vector<Subject>& anatomy, const AdaptConfig& cfg, int patch_size);

struct AdaptResult {
  ParamSet theta;              // adapted parameters (input values on failure)
  std::vector<double> trace;   // L_i before the first update, then after each update
  std::vector<double> consistency;
  bool failed = false;
};

// Adam on L_i for up to cfg.steps updates, stopping early once L_i has not
// improved for cfg.patience evaluations. Running normalisation statistics
// are used throughout; the model's parameters are never modified.
AdaptResult adapt(const AnatomyModel& model, const torch::Tensor& x_t1, const torch::Tensor& mask,
                  const SupportSample& support, float fill, const AdaptConfig& cfg);

// Per-patch anatomy probabilities [7 channels] with adaptation on patches
// that contain mask voxels. mask == nullptr or adapt_enabled == false skips
// adaptation entirely.
struct AnatomyInference {
  ProbabilityMap probs;
  std::vector<std::vector<double>> traces;  // one per adapted patch
  std::vector<std::vector<double>> consistency;
  int failed_patches = 0;
};

AnatomyInference infer_anatomy(const AnatomyModel& model, const Volume& t1, const LesionMask* mask,
                               const SupportSample* support, float fill, const PatchSpec& patch,
                               const AdaptConfig& cfg, bool adapt_enabled = true);

// Lesion probabilities (2 channels) from the FLAIR branch, patchwise.
ProbabilityMap infer_lesion_probs(const LesionModel& model, const Volume& flair, const PatchSpec& patch);
LesionMask infer_lesion_mask(const LesionModel& model, const Volume& flair, const PatchSpec& patch);

// Anatomy channel probabilities to joint class ids.
LabelMap anatomy_labels(const ProbabilityMap& anatomy_probs);

struct SingleInference {
  LabelMap joint;    // y-hat, joint class ids
  LabelMap anatomy;  // y-hat_A, joint class ids without the lesion class
  LesionMask lesion; // y-hat_L
  ProbabilityMap joint_probs;
  std::vector<std::vector<double>> traces;
  int failed_patches = 0;
};

// Inference for one subject and one fill value. mask_override replaces the
// predicted lesion mask for adaptation only.
SingleInference infer_single(const JointModel& model, const Volume& t1, const std::optional<Volume>& flair,
                             float fill, const SupportSample& support, const PatchSpec& patch,
                             const AdaptConfig& cfg, const LesionMask* mask_override = nullptr);

struct EnsembleMember {
  int fold = 0;
  float fill = 0.0f;
  bool ok = false;
  std::string error;
  SingleInference result;
};

struct EnsembleResult {
  LabelMap joint;
  LabelMap anatomy;
  LesionMask lesion;
  std::vector<EnsembleMember> members;
  int survivors = 0;
};

// Folds x fills members voted per voxel (lowest id wins ties). Proceeds
// when at least half of the members succeed, otherwise throws Error. With
// persist_dir set, every member's maps are written there.
EnsembleResult infer_ensemble(const std::vector<JointModel>& folds, const std::vector<float>& fills,
                              const Volume& t1, const std::optional<Volume>& flair, const SupportSample& support,
                              const PatchSpec& patch, const AdaptConfig& cfg,
                              const std::optional<std::filesystem::path>& persist_dir = std::nullopt);

// The first `count` fill values in configured order.
std::vector<float> ensemble_fills(const RandomFillSpec& spec, int count);

}  // namespace jointseg

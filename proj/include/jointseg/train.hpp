#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "jointseg/checkpoint.hpp"
#include "jointseg/config.hpp"
#include "jointseg/dataset.hpp"
#include "jointseg/infer.hpp"
#include "jointseg/losses.hpp"
#include "jointseg/random.hpp"

namespace jointseg {

struct LossRecord {
  std::string stage;
  int fold = 0;
  int epoch = 0;
  int step = 0;
  std::string term;
  double value = 0.0;
};

// Append-only in memory; write_csv appends to the file.
class LossLog {
 public:
  void add(LossRecord r) { records_.push_back(std::move(r)); }
  const std::vector<LossRecord>& records() const { return records_; }
  // Mean of `term` over the records of one (stage, fold, epoch).
  double epoch_mean(const std::string& stage, int fold, int epoch, const std::string& term) const;
  void write_csv(const std::filesystem::path& path) const;

 private:
  std::vector<LossRecord> records_;
};

struct TrainContext {
  SeedStreams seeds{0};
  LossLog* log = nullptr;
  // Receives the last finite state before a TrainingError is thrown.
  std::function<void(const Checkpoint&)> on_divergence;
  bool verbose = false;
};

// Brightness/contrast augmentation: x * gain + shift.
Volume augment(const Volume& v, const AugmentConfig& cfg, Rng& rng);

AnatomyModel pretrain_anatomy(const std::vector<Subject>& train, const PipelineConfig& cfg, TrainContext& ctx);

// Fold index per subject, balanced and seeded.
std::vector<int> assign_folds(size_t count, int folds, uint64_t seed);

struct LesionFolds {
  std::vector<LesionModel> models;
  std::vector<std::string> ids;  // training subject ids
  std::vector<int> fold_of;      // held-out fold per id
};

LesionFolds pretrain_lesion(const std::vector<Subject>& train, const PipelineConfig& cfg, TrainContext& ctx);
LesionModel pretrain_lesion_fold(const std::vector<Subject>& train, const std::vector<int>& fold_of, int fold,
                                 const PipelineConfig& cfg, TrainContext& ctx);

struct InnerStep {
  ParamSet adapted;
  std::vector<torch::Tensor> grads;
};

// theta' = theta - alpha * grad loss_fn(theta). With create_graph the
// result stays differentiable w.r.t. theta (second order). theta itself is
// never modified. Throws TrainingError on a non-finite gradient.
InnerStep inner_step(const ParamSet& theta, const std::function<torch::Tensor(const ParamSet&)>& loss_fn,
                     double alpha, bool create_graph = true);

// One outer update on a fixed batch. Exposed for reproducibility tests.
struct MetaBatch {
  torch::Tensor x_a, y_a;      // anatomy images and their one-hot labels
  torch::Tensor x_p, mask;     // pseudo-lesioned images and lesion masks
  torch::Tensor x_sup, y_sup;  // lesion-free anchors
  std::vector<float> fills;
};

struct MetaStepTerms {
  double inner = 0.0;
  double outer = 0.0;
  bool skipped = false;
};

// Samples without lesion voxels are dropped when cfg.meta.lesion_gate is
// set; an empty remainder skips the update.
MetaStepTerms meta_step(AnatomyModel& model, ParamSet& theta, torch::optim::Optimizer& opt, const MetaBatch& batch,
                        const MetaTrainConfig& cfg);

AnatomyModel meta_cotrain(const AnatomyModel& pretrained, const std::vector<Subject>& anatomy,
                          const std::vector<Subject>& lesion, const PipelineConfig& cfg, TrainContext& ctx);

struct PseudoLabel {
  std::string id;
  ProbabilityMap target;  // joint classes; lesion channel equals y_L
  std::vector<double> trace;
  bool flagged = false;
};

// Adapted anatomy softmax times (1 - y_L) plus y_L as the lesion channel.
ProbabilityMap compose_soft_target(const ProbabilityMap& anatomy_probs, const LesionMask& y_l);
// L_i rose at every adaptation step.
bool adaptation_diverged(const std::vector<double>& trace);

std::vector<PseudoLabel> generate_pseudolabels(const AnatomyModel& cotrained, const std::vector<Subject>& lesion,
                                               const SupportSample& support, const PipelineConfig& cfg,
                                               const SeedStreams& seeds);

struct JointSample {
  const Subject* subject = nullptr;
  const ProbabilityMap* target = nullptr;
  LesionMask mask;  // inner-loss mask (GT or predicted)
};

JointModel joint_train(const AnatomyModel& cotrained, const LesionModel& frozen, const std::vector<JointSample>& data,
                       const std::vector<Subject>& anatomy, const PipelineConfig& cfg, TrainContext& ctx, int fold = 0);

}  // namespace jointseg

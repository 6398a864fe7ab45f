#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "jointseg/config.hpp"
#include "jointseg/dataset.hpp"
#include "jointseg/infer.hpp"
#include "jointseg/train.hpp"

namespace jointseg {

// ---- metrics rows -------------------------------------------------------

struct MetricRow {
  std::string subject_id;
  std::string class_name;
  double dice = 0.0;
  std::optional<double> hd95;  // empty cell when undefined
  std::string stage;
};

// Per-class Dice and HD95 for every class present in pred or gt.
std::vector<MetricRow> score_subject(const std::string& id, const LabelMap& pred, const LabelMap& gt,
                                     const Vec3& spacing, const std::string& stage);
void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricRow>& rows);
std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path);

// Hidden anatomy with the lesion class pasted in.
LabelMap joint_ground_truth(const LabelMap& full_gt, const LesionMask& lesion);

// ---- held-out pseudo-lesioned phantoms ----------------------------------

struct HeldOutCase {
  std::string id;
  Volume x_p;
  LesionMask mask;
  LabelMap hidden_y_a;
};

// Pairs held-out anatomy subjects with held-out lesion subjects round-robin.
std::vector<HeldOutCase> held_out_pseudo_lesions(const std::vector<Subject>& anatomy,
                                                 const std::vector<Subject>& lesion, int count);

// Lesion-region anatomy Dice per case, after adaptation with the case's
// mask and fill stream `fills.eval`.
std::vector<double> lesion_region_dice(const AnatomyModel& model, const std::vector<HeldOutCase>& cases,
                                       const SupportSample& support, const PipelineConfig& cfg,
                                       const SeedStreams& seeds, bool adapt_enabled = true);

// ---- degradation --------------------------------------------------------

struct DegradationSpec {
  double retain = 1.0;  // target retained fraction
  int block = 10;       // cubic block edge, voxels
  uint64_t seed = 0;
};

struct DegradationResult {
  LesionMask mask;
  double achieved = 1.0;  // retained fraction
  bool within_tolerance = true;
};

// Removes whole grid-aligned blocks, drawn uniformly without replacement
// among blocks touching the mask, until the retained fraction reaches the
// target. Output is always a subset of the input.
DegradationResult degrade_lesion_mask(const LesionMask& mask, const DegradationSpec& spec);

struct StudyTable {
  std::vector<std::string> columns;  // first column is the row label
  std::vector<std::vector<std::string>> rows;
  void write_csv(const std::filesystem::path& path) const;
};

struct DegradationStudy {
  std::vector<double> fractions;
  // [fraction][class] mean Dice over subjects
  std::vector<std::map<std::string, double>> per_class;
  std::vector<double> mean_anatomy;  // mean over anatomy classes
  std::vector<std::vector<double>> per_subject;  // [fraction][subject] mean anatomy Dice
  StudyTable table() const;
};

// Co-trained anatomy branch adapted with the degraded predicted lesion
// mask; the full predicted lesion is pasted over the anatomy output before
// scoring against the joint ground truth.
DegradationStudy run_degradation_study(const AnatomyModel& cotrained, const LesionModel& lesion_model,
                                       const std::vector<Subject>& subjects, const EvaluationSidecar& sidecar,
                                       const std::vector<double>& fractions, const SupportSample& support,
                                       const PipelineConfig& cfg, const SeedStreams& seeds);

struct MaskSourceStudy {
  std::map<std::string, std::map<std::string, double>> per_class;  // source -> class -> mean Dice
  StudyTable table() const;
};

MaskSourceStudy run_mask_source_study(const AnatomyModel& cotrained, const LesionModel& lesion_model,
                                      const std::vector<Subject>& anatomy, const std::vector<Subject>& lesion_train,
                                      const std::vector<Subject>& lesion_test, const EvaluationSidecar& sidecar,
                                      const PipelineConfig& cfg, const SeedStreams& seeds);

struct AblationStudy {
  std::vector<std::string> ids;
  std::vector<double> meta;
  std::vector<double> control;
  int meta_wins() const;
  StudyTable table() const;
};

// Trains the L_o-only control from the same pretrained weights and seeds
// and scores both on held-out pseudo-lesioned phantoms.
AblationStudy run_inner_loop_ablation(const AnatomyModel& pretrained, const AnatomyModel& meta_model,
                                      const std::vector<Subject>& anatomy_train,
                                      const std::vector<Subject>& lesion_train,
                                      const std::vector<HeldOutCase>& cases, const SupportSample& support,
                                      const PipelineConfig& cfg, const SeedStreams& seeds);

// ---- reports ------------------------------------------------------------

struct ReportOutputs {
  std::vector<std::filesystem::path> files;
  bool no_data = false;
};

// Aggregates every *.csv metrics file (columns subject_id, class_name,
// dice, hd95, stage) and every trace file (subject_id, member, step,
// inner_loss) under metrics_dir. File names carry `tag`.
ReportOutputs write_report(const std::filesystem::path& metrics_dir, const std::filesystem::path& out_dir,
                           const std::string& tag);

struct Aggregate {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for n = 1
  size_t n = 0;
};
// stage -> class -> aggregate of dice
std::map<std::string, std::map<std::string, Aggregate>> aggregate_dice(const std::vector<MetricRow>& rows);

// ---- manifests ----------------------------------------------------------

struct RunManifest {
  std::string stage;
  uint64_t config_hash = 0;
  uint64_t dataset_hash = 0;
  uint64_t seed = 0;
  std::vector<std::pair<std::string, std::string>> lineage;  // input path -> content hash
  std::vector<std::string> outputs;
  double wall_clock_s = 0.0;
};

std::string hex64(uint64_t v);
uint64_t file_hash(const std::filesystem::path& path);
// Writes <dir>/<stage>-<config>-<dataset>[-n].json without overwriting.
std::filesystem::path write_run_manifest(const std::filesystem::path& dir, const RunManifest& m);

}  // namespace jointseg

#pragma once

#include <filesystem>
#include <json.hpp>
#include <map>
#include <string>

#include "jointseg/networks.hpp"

namespace jointseg {

// T1 path: f_theta + g_A.
struct AnatomyModel {
  Extractor theta;
  Head g_a;
};

// FLAIR path: f_phi + g_L.
struct LesionModel {
  Extractor phi;
  Head g_l;
};

struct JointModel {
  AnatomyModel anatomy;
  LesionModel lesion;
  Fusion psi;
};

AnatomyModel init_anatomy_model(const ExtractorConfig& cfg, Rng& rng, torch::Dtype dtype = torch::kFloat);
LesionModel init_lesion_model(const ExtractorConfig& cfg, Rng& rng, torch::Dtype dtype = torch::kFloat);
AnatomyModel clone(const AnatomyModel& m);
LesionModel clone(const LesionModel& m);
JointModel clone(const JointModel& m);

enum class Stage { kPretrained, kCotrained, kJoint };
enum class ModelKind { kAnatomy, kLesion, kJoint };

std::string to_string(Stage s);
std::string to_string(ModelKind k);
Stage parse_stage(const std::string& s);
ModelKind parse_model_kind(const std::string& s);

// Self-describing container: gzip stream of a magic line, a JSON header
// (stage, kind, configs, RNG state, lineage, array directory) and the raw
// little-endian array bytes in directory order.
struct Checkpoint {
  Stage stage = Stage::kPretrained;
  ModelKind kind = ModelKind::kAnatomy;
  std::map<std::string, ParamSet> groups;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json meta = nlohmann::json::object();
  std::string rng_state;

  static Checkpoint of(const AnatomyModel& m, Stage stage);
  static Checkpoint of(const LesionModel& m, Stage stage);
  static Checkpoint of(const JointModel& m, Stage stage);

  // Throw ConfigError when the kind does not match or the stage is not the
  // expected one.
  AnatomyModel anatomy(Stage expected) const;
  LesionModel lesion(Stage expected) const;
  JointModel joint() const;
  AnatomyModel anatomy_any_stage() const;

  uint64_t hash_of(const std::string& group) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace jointseg

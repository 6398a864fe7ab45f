#include "jointseg/config.hpp"

#include <yaml-cpp/yaml.h>

#include <fstream>
#include <set>
#include <sstream>

#include "jointseg/error.hpp"
#include "jointseg/random.hpp"

namespace jointseg {
namespace {

// Reads typed keys from one mapping and rejects keys nobody asked for.
class Section {
 public:
  Section(const YAML::Node& node, std::string name)
      : node_(node), name_(std::move(name)), present_(node.IsDefined() && !node.IsNull()) {
    if (present_ && !node_.IsMap()) throw ConfigError("config section '" + name_ + "' must be a mapping");
  }
  ~Section() noexcept(false) {
    if (!present_ || std::uncaught_exceptions() > 0) return;
    for (const auto& kv : node_) {
      const auto key = kv.first.as<std::string>();
      if (!seen_.count(key)) throw ConfigError("unknown config key '" + path(key) + "'");
    }
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!present_ || !node_[key]) return;
    try {
      out = node_[key].template as<T>();
    } catch (const YAML::Exception&) {
      throw ConfigError("config key '" + path(key) + "' has the wrong type");
    }
  }

  YAML::Node child(const std::string& key) {
    seen_.insert(key);
    return present_ ? node_[key] : YAML::Node(YAML::NodeType::Undefined);
  }

 private:
  std::string path(const std::string& key) const { return name_.empty() ? key : name_ + "." + key; }

  YAML::Node node_;
  std::string name_;
  bool present_ = false;
  std::set<std::string> seen_;
};

void read_counts(Section& parent, const std::string& key, SplitCounts& c) {
  Section s(parent.child(key), "data." + key);
  s.get("train", c.train);
  s.get("val", c.val);
  s.get("test", c.test);
}

void read_pretrain(Section& parent, const std::string& key, PretrainConfig& p) {
  Section s(parent.child(key), key);
  s.get("epochs", p.epochs);
  s.get("batch_size", p.batch_size);
  s.get("lr", p.lr);
}

void emit_pretrain(YAML::Emitter& e, const char* key, const PretrainConfig& p) {
  e << YAML::Key << key << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "epochs" << YAML::Value << p.epochs;
  e << YAML::Key << "batch_size" << YAML::Value << p.batch_size;
  e << YAML::Key << "lr" << YAML::Value << p.lr;
  e << YAML::EndMap;
}

void check_pretrain(const PretrainConfig& p, const std::string& name) {
  if (p.epochs < 1) throw ConfigError(name + ".epochs must be >= 1");
  if (p.batch_size < 1) throw ConfigError(name + ".batch_size must be >= 1");
  if (!(p.lr > 0.0)) throw ConfigError(name + ".lr must be positive");
}

}  // namespace

std::string to_string(MaskSource m) { return m == MaskSource::kGroundTruth ? "gt" : "predicted"; }

MaskSource parse_mask_source(const std::string& s) {
  if (s == "gt") return MaskSource::kGroundTruth;
  if (s == "predicted") return MaskSource::kPredicted;
  throw ConfigError("mask source must be 'gt' or 'predicted', got '" + s + "'");
}

void PipelineConfig::validate() const {
  phantom.validate();
  extractor.validate();
  patch.validate();
  fills.validate();
  if (patch.size % extractor.divisor() != 0) throw ConfigError("patch.size must be divisible by 2^(levels-1)");
  if (fusion_hidden < 1) throw ConfigError("network.fusion_hidden must be >= 1");
  if (anatomy_counts.train < 2) throw ConfigError("need at least two anatomy training subjects");
  if (lesion_counts.train < lesion_folds) throw ConfigError("fewer lesion training subjects than folds");
  if (lesion_folds < 2) throw ConfigError("lesion_folds must be >= 2");
  check_pretrain(pretrain, "pretrain");
  check_pretrain(lesion_pretrain, "lesion_pretrain");
  if (!(meta.alpha >= 0.0)) throw ConfigError("meta.alpha must be >= 0");
  if (!(meta.beta > 0.0)) throw ConfigError("meta.beta must be positive");
  if (meta.epochs < 1 || meta.batch_size < 1) throw ConfigError("meta.epochs and meta.batch_size must be >= 1");
  if (meta.fold < 0 || meta.fold >= lesion_folds) throw ConfigError("meta.fold out of range");
  if (joint.epochs < 1 || joint.batch_size < 1 || !(joint.lr > 0.0)) throw ConfigError("invalid joint settings");
  if (joint.warmup_epochs < 0 || joint.warmup_epochs > joint.epochs) {
    throw ConfigError("joint.warmup_epochs must be in [0, joint.epochs]");
  }
  if (adapt.steps < 1) throw ConfigError("adapt.steps must be >= 1");
  if (!(adapt.lr >= 0.0)) throw ConfigError("adapt.lr must be >= 0");
  if (adapt.patience < 1) throw ConfigError("adapt.patience must be >= 1");
  if (ensemble.folds < 1 || ensemble.folds > lesion_folds) throw ConfigError("ensemble.folds out of range");
  if (ensemble.fills < 1 || ensemble.fills > static_cast<int>(fills.fill_values.size())) {
    throw ConfigError("ensemble.fills exceeds the fill set");
  }
}

std::string PipelineConfig::to_yaml() const {
  YAML::Emitter e;
  e.SetDoublePrecision(17);
  e << YAML::BeginMap;
  e << YAML::Key << "seed" << YAML::Value << seed;

  e << YAML::Key << "phantom" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "grid_size" << YAML::Value << phantom.grid_size;
  e << YAML::Key << "noise_std" << YAML::Value << phantom.noise_std;
  e << YAML::Key << "jitter" << YAML::Value << phantom.jitter;
  e << YAML::Key << "t1_means" << YAML::Value << YAML::Flow
    << std::vector<double>(phantom.t1_means.begin(), phantom.t1_means.end());
  e << YAML::Key << "flair_means" << YAML::Value << YAML::Flow
    << std::vector<double>(phantom.flair_means.begin(), phantom.flair_means.end());
  e << YAML::Key << "lesion_blobs" << YAML::Value << YAML::Flow
    << std::vector<int>{phantom.lesion_blobs_min, phantom.lesion_blobs_max};
  e << YAML::Key << "lesion_radius" << YAML::Value << YAML::Flow
    << std::vector<double>{phantom.lesion_radius_min, phantom.lesion_radius_max};
  e << YAML::Key << "lesion_voxels" << YAML::Value << YAML::Flow
    << std::vector<int64_t>{phantom.lesion_voxels_min, phantom.lesion_voxels_max};
  e << YAML::Key << "lesion_core_t1" << YAML::Value << phantom.lesion_core_t1;
  e << YAML::Key << "lesion_rim_t1" << YAML::Value << phantom.lesion_rim_t1;
  e << YAML::Key << "lesion_core_fraction" << YAML::Value << phantom.lesion_core_fraction;
  e << YAML::Key << "lesion_flair" << YAML::Value << phantom.lesion_flair;
  e << YAML::Key << "lesion_flair_margin" << YAML::Value << phantom.lesion_flair_margin;
  e << YAML::EndMap;

  e << YAML::Key << "data" << YAML::Value << YAML::BeginMap;
  for (const auto& [key, c] : {std::pair{"anatomy", anatomy_counts}, std::pair{"lesion", lesion_counts}}) {
    e << YAML::Key << key << YAML::Value << YAML::Flow << YAML::BeginMap;
    e << YAML::Key << "train" << YAML::Value << c.train;
    e << YAML::Key << "val" << YAML::Value << c.val;
    e << YAML::Key << "test" << YAML::Value << c.test;
    e << YAML::EndMap;
  }
  e << YAML::EndMap;

  e << YAML::Key << "network" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "levels" << YAML::Value << extractor.levels;
  e << YAML::Key << "base_filters" << YAML::Value << extractor.base_filters;
  e << YAML::Key << "feature_channels" << YAML::Value << extractor.feature_channels;
  e << YAML::Key << "convs_per_block" << YAML::Value << extractor.convs_per_block;
  e << YAML::Key << "fusion_hidden" << YAML::Value << fusion_hidden;
  e << YAML::EndMap;

  e << YAML::Key << "patch" << YAML::Value << YAML::Flow << YAML::BeginMap;
  e << YAML::Key << "size" << YAML::Value << patch.size;
  e << YAML::Key << "overlap" << YAML::Value << patch.overlap;
  e << YAML::EndMap;

  e << YAML::Key << "augment" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "enabled" << YAML::Value << augment.enabled;
  e << YAML::Key << "gain" << YAML::Value << YAML::Flow << std::vector<double>{augment.gain_min, augment.gain_max};
  e << YAML::Key << "shift" << YAML::Value << YAML::Flow << std::vector<double>{augment.shift_min, augment.shift_max};
  e << YAML::EndMap;

  emit_pretrain(e, "pretrain", pretrain);
  emit_pretrain(e, "lesion_pretrain", lesion_pretrain);
  e << YAML::Key << "lesion_folds" << YAML::Value << lesion_folds;

  e << YAML::Key << "meta" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "alpha" << YAML::Value << meta.alpha;
  e << YAML::Key << "beta" << YAML::Value << meta.beta;
  e << YAML::Key << "epochs" << YAML::Value << meta.epochs;
  e << YAML::Key << "batch_size" << YAML::Value << meta.batch_size;
  e << YAML::Key << "lesion_gate" << YAML::Value << meta.lesion_gate;
  e << YAML::Key << "inner_loop" << YAML::Value << meta.inner_loop;
  e << YAML::Key << "fold" << YAML::Value << meta.fold;
  e << YAML::EndMap;

  e << YAML::Key << "joint" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "epochs" << YAML::Value << joint.epochs;
  e << YAML::Key << "batch_size" << YAML::Value << joint.batch_size;
  e << YAML::Key << "lr" << YAML::Value << joint.lr;
  e << YAML::Key << "warmup_epochs" << YAML::Value << joint.warmup_epochs;
  e << YAML::Key << "mask_source" << YAML::Value << to_string(joint.mask_source);
  e << YAML::EndMap;

  e << YAML::Key << "adapt" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "steps" << YAML::Value << adapt.steps;
  e << YAML::Key << "lr" << YAML::Value << adapt.lr;
  e << YAML::Key << "patience" << YAML::Value << adapt.patience;
  e << YAML::Key << "support_id" << YAML::Value << adapt.support_id;
  e << YAML::EndMap;

  e << YAML::Key << "fills" << YAML::Value << YAML::Flow << fills.fill_values;

  e << YAML::Key << "ensemble" << YAML::Value << YAML::Flow << YAML::BeginMap;
  e << YAML::Key << "folds" << YAML::Value << ensemble.folds;
  e << YAML::Key << "fills" << YAML::Value << ensemble.fills;
  e << YAML::EndMap;

  e << YAML::EndMap;
  return std::string(e.c_str()) + "\n";
}

uint64_t PipelineConfig::hash() const { return fnv1a(to_yaml()); }

PipelineConfig parse_config(const std::string& yaml_text) {
  YAML::Node root;
  try {
    root = YAML::Load(yaml_text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("config is not valid YAML: ") + e.what());
  }
  if (root.IsNull()) root = YAML::Node(YAML::NodeType::Map);

  PipelineConfig c;
  {
    Section top(root, "");
    top.get("seed", c.seed);
    {
      Section s(top.child("phantom"), "phantom");
      auto& p = c.phantom;
      s.get("grid_size", p.grid_size);
      s.get("noise_std", p.noise_std);
      s.get("jitter", p.jitter);
      std::vector<double> t1(p.t1_means.begin(), p.t1_means.end());
      std::vector<double> fl(p.flair_means.begin(), p.flair_means.end());
      s.get("t1_means", t1);
      s.get("flair_means", fl);
      if (t1.size() != p.t1_means.size() || fl.size() != p.flair_means.size()) {
        throw ConfigError("phantom intensity means need one value per joint class");
      }
      std::copy(t1.begin(), t1.end(), p.t1_means.begin());
      std::copy(fl.begin(), fl.end(), p.flair_means.begin());
      std::vector<int> blobs{p.lesion_blobs_min, p.lesion_blobs_max};
      std::vector<double> radius{p.lesion_radius_min, p.lesion_radius_max};
      std::vector<int64_t> voxels{p.lesion_voxels_min, p.lesion_voxels_max};
      s.get("lesion_blobs", blobs);
      s.get("lesion_radius", radius);
      s.get("lesion_voxels", voxels);
      if (blobs.size() != 2 || radius.size() != 2 || voxels.size() != 2) {
        throw ConfigError("lesion ranges are [min, max] pairs");
      }
      p.lesion_blobs_min = blobs[0];
      p.lesion_blobs_max = blobs[1];
      p.lesion_radius_min = radius[0];
      p.lesion_radius_max = radius[1];
      p.lesion_voxels_min = voxels[0];
      p.lesion_voxels_max = voxels[1];
      s.get("lesion_core_t1", p.lesion_core_t1);
      s.get("lesion_rim_t1", p.lesion_rim_t1);
      s.get("lesion_core_fraction", p.lesion_core_fraction);
      s.get("lesion_flair", p.lesion_flair);
      s.get("lesion_flair_margin", p.lesion_flair_margin);
    }
    {
      Section s(top.child("data"), "data");
      read_counts(s, "anatomy", c.anatomy_counts);
      read_counts(s, "lesion", c.lesion_counts);
    }
    {
      Section s(top.child("network"), "network");
      s.get("levels", c.extractor.levels);
      s.get("base_filters", c.extractor.base_filters);
      s.get("feature_channels", c.extractor.feature_channels);
      s.get("convs_per_block", c.extractor.convs_per_block);
      s.get("fusion_hidden", c.fusion_hidden);
    }
    {
      Section s(top.child("patch"), "patch");
      s.get("size", c.patch.size);
      s.get("overlap", c.patch.overlap);
    }
    {
      Section s(top.child("augment"), "augment");
      s.get("enabled", c.augment.enabled);
      std::vector<double> gain{c.augment.gain_min, c.augment.gain_max};
      std::vector<double> shift{c.augment.shift_min, c.augment.shift_max};
      s.get("gain", gain);
      s.get("shift", shift);
      if (gain.size() != 2 || shift.size() != 2) throw ConfigError("augment ranges are [min, max] pairs");
      c.augment.gain_min = gain[0];
      c.augment.gain_max = gain[1];
      c.augment.shift_min = shift[0];
      c.augment.shift_max = shift[1];
    }
    read_pretrain(top, "pretrain", c.pretrain);
    read_pretrain(top, "lesion_pretrain", c.lesion_pretrain);
    top.get("lesion_folds", c.lesion_folds);
    {
      Section s(top.child("meta"), "meta");
      s.get("alpha", c.meta.alpha);
      s.get("beta", c.meta.beta);
      s.get("epochs", c.meta.epochs);
      s.get("batch_size", c.meta.batch_size);
      s.get("lesion_gate", c.meta.lesion_gate);
      s.get("inner_loop", c.meta.inner_loop);
      s.get("fold", c.meta.fold);
    }
    {
      Section s(top.child("joint"), "joint");
      s.get("epochs", c.joint.epochs);
      s.get("batch_size", c.joint.batch_size);
      s.get("lr", c.joint.lr);
      s.get("warmup_epochs", c.joint.warmup_epochs);
      std::string source = to_string(c.joint.mask_source);
      s.get("mask_source", source);
      c.joint.mask_source = parse_mask_source(source);
    }
    {
      Section s(top.child("adapt"), "adapt");
      s.get("steps", c.adapt.steps);
      s.get("lr", c.adapt.lr);
      s.get("patience", c.adapt.patience);
      s.get("support_id", c.adapt.support_id);
    }
    top.get("fills", c.fills.fill_values);
    {
      Section s(top.child("ensemble"), "ensemble");
      s.get("folds", c.ensemble.folds);
      s.get("fills", c.ensemble.fills);
    }
  }
  c.phantom.seed = c.seed;
  c.validate();
  return c;
}

PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

void save_config(const std::filesystem::path& path, const PipelineConfig& cfg) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << cfg.to_yaml();
}

}  // namespace jointseg

#include "jointseg/checkpoint.hpp"

#include <zlib.h>

#include <cstring>

#include "jointseg/error.hpp"

namespace jointseg {

using nlohmann::json;

namespace {

constexpr char kMagic[] = "JOINTSEG-CKPT 1\n";

json to_json(const ExtractorConfig& c) {
  return {{"levels", c.levels},
          {"base_filters", c.base_filters},
          {"feature_channels", c.feature_channels},
          {"convs_per_block", c.convs_per_block},
          {"in_channels", c.in_channels}};
}

ExtractorConfig extractor_from_json(const json& j) {
  ExtractorConfig c;
  c.levels = j.at("levels").get<int>();
  c.base_filters = j.at("base_filters").get<int>();
  c.feature_channels = j.at("feature_channels").get<int>();
  c.convs_per_block = j.at("convs_per_block").get<int>();
  c.in_channels = j.at("in_channels").get<int>();
  c.validate();
  return c;
}

json to_json(const FusionConfig& c) {
  return {{"feature_channels", c.feature_channels}, {"hidden_channels", c.hidden_channels}, {"classes", c.classes}};
}

FusionConfig fusion_from_json(const json& j) {
  FusionConfig c;
  c.feature_channels = j.at("feature_channels").get<int>();
  c.hidden_channels = j.at("hidden_channels").get<int>();
  c.classes = j.at("classes").get<int>();
  return c;
}

Head head_from(const ParamSet& p) {
  Head h;
  h.params = p;
  const auto& w = p.at("cls.weight");
  h.classes = static_cast<int>(w.size(0));
  h.in_channels = static_cast<int>(w.size(1));
  return h;
}

const ParamSet& group(const Checkpoint& c, const std::string& name) {
  auto it = c.groups.find(name);
  if (it == c.groups.end()) throw FormatError("checkpoint lacks parameter group '" + name + "'");
  return it->second;
}

void put_anatomy(Checkpoint& c, const AnatomyModel& m) {
  c.groups["theta"] = m.theta.params.clone();
  c.groups["theta.stats"] = m.theta.stats.clone();
  c.groups["g_a"] = m.g_a.params.clone();
  c.config["theta"] = to_json(m.theta.cfg);
}

void put_lesion(Checkpoint& c, const LesionModel& m) {
  c.groups["phi"] = m.phi.params.clone();
  c.groups["phi.stats"] = m.phi.stats.clone();
  c.groups["g_l"] = m.g_l.params.clone();
  c.config["phi"] = to_json(m.phi.cfg);
}

AnatomyModel get_anatomy(const Checkpoint& c) {
  AnatomyModel m;
  m.theta.cfg = extractor_from_json(c.config.at("theta"));
  m.theta.params = group(c, "theta").clone();
  m.theta.stats = group(c, "theta.stats").clone();
  m.g_a = head_from(group(c, "g_a").clone());
  return m;
}

LesionModel get_lesion(const Checkpoint& c) {
  LesionModel m;
  m.phi.cfg = extractor_from_json(c.config.at("phi"));
  m.phi.params = group(c, "phi").clone();
  m.phi.stats = group(c, "phi.stats").clone();
  m.g_l = head_from(group(c, "g_l").clone());
  return m;
}

void require(const Checkpoint& c, ModelKind kind, Stage stage) {
  if (c.kind != kind) {
    throw ConfigError("checkpoint holds a " + to_string(c.kind) + " model, expected " + to_string(kind));
  }
  if (c.stage != stage) {
    throw ConfigError("checkpoint stage is '" + to_string(c.stage) + "', expected '" + to_string(stage) + "'");
  }
}

std::string dtype_name(torch::Dtype d) {
  if (d == torch::kFloat) return "f32";
  if (d == torch::kDouble) return "f64";
  throw FormatError("unsupported checkpoint dtype");
}

torch::Dtype parse_dtype(const std::string& s) {
  if (s == "f32") return torch::kFloat;
  if (s == "f64") return torch::kDouble;
  throw FormatError("unsupported checkpoint dtype '" + s + "'");
}

}  // namespace

AnatomyModel init_anatomy_model(const ExtractorConfig& cfg, Rng& rng, torch::Dtype dtype) {
  AnatomyModel m;
  m.theta = init_extractor(cfg, rng, dtype);
  m.g_a = init_head(cfg.feature_channels, kAnatomyClassCount, rng, dtype);
  return m;
}

LesionModel init_lesion_model(const ExtractorConfig& cfg, Rng& rng, torch::Dtype dtype) {
  LesionModel m;
  m.phi = init_extractor(cfg, rng, dtype);
  m.g_l = init_head(cfg.feature_channels, 2, rng, dtype);
  return m;
}

AnatomyModel clone(const AnatomyModel& m) {
  AnatomyModel c = m;
  c.theta.params = m.theta.params.clone();
  c.theta.stats = m.theta.stats.clone();
  c.g_a.params = m.g_a.params.clone();
  return c;
}

LesionModel clone(const LesionModel& m) {
  LesionModel c = m;
  c.phi.params = m.phi.params.clone();
  c.phi.stats = m.phi.stats.clone();
  c.g_l.params = m.g_l.params.clone();
  return c;
}

JointModel clone(const JointModel& m) {
  JointModel c;
  c.anatomy = clone(m.anatomy);
  c.lesion = clone(m.lesion);
  c.psi = m.psi;
  c.psi.params = m.psi.params.clone();
  c.psi.stats = m.psi.stats.clone();
  return c;
}

std::string to_string(Stage s) {
  switch (s) {
    case Stage::kPretrained: return "pretrained";
    case Stage::kCotrained: return "cotrained";
    case Stage::kJoint: return "joint";
  }
  return "?";
}

std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::kAnatomy: return "anatomy";
    case ModelKind::kLesion: return "lesion";
    case ModelKind::kJoint: return "joint";
  }
  return "?";
}

Stage parse_stage(const std::string& s) {
  if (s == "pretrained") return Stage::kPretrained;
  if (s == "cotrained") return Stage::kCotrained;
  if (s == "joint") return Stage::kJoint;
  throw FormatError("unknown stage tag '" + s + "'");
}

ModelKind parse_model_kind(const std::string& s) {
  if (s == "anatomy") return ModelKind::kAnatomy;
  if (s == "lesion") return ModelKind::kLesion;
  if (s == "joint") return ModelKind::kJoint;
  throw FormatError("unknown model kind '" + s + "'");
}

Checkpoint Checkpoint::of(const AnatomyModel& m, Stage stage) {
  Checkpoint c;
  c.stage = stage;
  c.kind = ModelKind::kAnatomy;
  put_anatomy(c, m);
  return c;
}

Checkpoint Checkpoint::of(const LesionModel& m, Stage stage) {
  Checkpoint c;
  c.stage = stage;
  c.kind = ModelKind::kLesion;
  put_lesion(c, m);
  return c;
}

Checkpoint Checkpoint::of(const JointModel& m, Stage stage) {
  Checkpoint c;
  c.stage = stage;
  c.kind = ModelKind::kJoint;
  put_anatomy(c, m.anatomy);
  put_lesion(c, m.lesion);
  c.groups["psi"] = m.psi.params.clone();
  c.groups["psi.stats"] = m.psi.stats.clone();
  c.config["psi"] = to_json(m.psi.cfg);
  return c;
}

AnatomyModel Checkpoint::anatomy(Stage expected) const {
  require(*this, ModelKind::kAnatomy, expected);
  return get_anatomy(*this);
}

AnatomyModel Checkpoint::anatomy_any_stage() const {
  if (kind == ModelKind::kLesion) throw ConfigError("checkpoint holds no anatomy branch");
  return get_anatomy(*this);
}

LesionModel Checkpoint::lesion(Stage expected) const {
  require(*this, ModelKind::kLesion, expected);
  return get_lesion(*this);
}

JointModel Checkpoint::joint() const {
  require(*this, ModelKind::kJoint, Stage::kJoint);
  JointModel m;
  m.anatomy = get_anatomy(*this);
  m.lesion = get_lesion(*this);
  m.psi.cfg = fusion_from_json(config.at("psi"));
  m.psi.params = group(*this, "psi").clone();
  m.psi.stats = group(*this, "psi.stats").clone();
  return m;
}

uint64_t Checkpoint::hash_of(const std::string& name) const { return group(*this, name).content_hash(); }

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  json header{{"stage", to_string(ckpt.stage)},
              {"kind", to_string(ckpt.kind)},
              {"config", ckpt.config},
              {"meta", ckpt.meta},
              {"rng_state", ckpt.rng_state}};
  json dir = json::array();
  std::vector<torch::Tensor> payload;
  int64_t offset = 0;
  for (const auto& [gname, params] : ckpt.groups) {
    for (size_t i = 0; i < params.size(); ++i) {
      const auto t = params.tensors()[i].detach().contiguous().cpu();
      const int64_t nbytes = t.numel() * static_cast<int64_t>(t.element_size());
      dir.push_back({{"group", gname},
                     {"name", params.names()[i]},
                     {"dtype", dtype_name(t.scalar_type())},
                     {"shape", t.sizes().vec()},
                     {"offset", offset},
                     {"nbytes", nbytes}});
      offset += nbytes;
      payload.push_back(t);
    }
  }
  header["arrays"] = std::move(dir);
  const std::string text = header.dump();

  const auto tmp = path.string() + ".tmp";
  gzFile f = gzopen(tmp.c_str(), "wb6");
  if (f == nullptr) throw Error("cannot write checkpoint " + path.string());
  bool ok = gzwrite(f, kMagic, sizeof(kMagic) - 1) == static_cast<int>(sizeof(kMagic) - 1);
  const uint64_t len = text.size();
  ok = ok && gzwrite(f, &len, sizeof(len)) == sizeof(len);
  ok = ok && gzwrite(f, text.data(), static_cast<unsigned>(text.size())) == static_cast<int>(text.size());
  for (const auto& t : payload) {
    const auto n = static_cast<unsigned>(t.numel() * t.element_size());
    ok = ok && gzwrite(f, t.data_ptr(), n) == static_cast<int>(n);
  }
  ok = gzclose(f) == Z_OK && ok;
  if (!ok) throw Error("short write to checkpoint " + path.string());
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (f == nullptr) throw FormatError("cannot open checkpoint " + path.string());
  auto read_exact = [&](void* dst, size_t n) {
    if (n == 0) return;
    if (gzread(f, dst, static_cast<unsigned>(n)) != static_cast<int>(n)) {
      gzclose(f);
      throw FormatError("truncated checkpoint " + path.string());
    }
  };
  char magic[sizeof(kMagic) - 1];
  read_exact(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    gzclose(f);
    throw FormatError("not a checkpoint: " + path.string());
  }
  uint64_t len = 0;
  read_exact(&len, sizeof(len));
  if (len > (1u << 26)) {
    gzclose(f);
    throw FormatError("implausible checkpoint header in " + path.string());
  }
  std::string text(len, '\0');
  read_exact(text.data(), len);

  Checkpoint c;
  json header;
  try {
    header = json::parse(text);
    c.stage = parse_stage(header.at("stage").get<std::string>());
    c.kind = parse_model_kind(header.at("kind").get<std::string>());
    c.config = header.at("config");
    c.meta = header.value("meta", json::object());
    c.rng_state = header.value("rng_state", std::string());
  } catch (const json::exception& e) {
    gzclose(f);
    throw FormatError("bad checkpoint header in " + path.string() + ": " + e.what());
  }
  for (const auto& a : header.at("arrays")) {
    const auto shape = a.at("shape").get<std::vector<int64_t>>();
    auto t = torch::empty(shape, parse_dtype(a.at("dtype").get<std::string>()));
    const auto nbytes = a.at("nbytes").get<int64_t>();
    if (nbytes != t.numel() * static_cast<int64_t>(t.element_size())) {
      gzclose(f);
      throw FormatError("array size mismatch in " + path.string());
    }
    read_exact(t.data_ptr(), static_cast<size_t>(nbytes));
    c.groups[a.at("group").get<std::string>()].add(a.at("name").get<std::string>(), t);
  }
  gzclose(f);
  return c;
}

}  // namespace jointseg

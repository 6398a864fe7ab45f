#include "jointseg/dataset.hpp"

#include <fstream>
#include <json.hpp>

#include "jointseg/error.hpp"
#include "jointseg/labels.hpp"
#include "jointseg/nifti.hpp"
#include "jointseg/random.hpp"

namespace jointseg {

using nlohmann::json;
namespace fs = std::filesystem;

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::kLesionFree: return "lesion-free";
    case Provenance::kLesioned: return "lesioned";
    case Provenance::kPseudoLesioned: return "pseudo-lesioned";
  }
  return "?";
}

std::string to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

Provenance parse_provenance(const std::string& s) {
  if (s == "lesion-free") return Provenance::kLesionFree;
  if (s == "lesioned") return Provenance::kLesioned;
  if (s == "pseudo-lesioned") return Provenance::kPseudoLesioned;
  throw FormatError("unknown provenance '" + s + "'");
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw FormatError("unknown split '" + s + "'");
}

std::vector<SubjectRecord> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open manifest " + path.string());
  std::vector<SubjectRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      SubjectRecord r;
      r.id = j.at("id").get<std::string>();
      r.provenance = parse_provenance(j.at("provenance").get<std::string>());
      r.split = parse_split(j.at("split").get<std::string>());
      r.t1 = j.at("t1").get<std::string>();
      if (j.contains("flair")) r.flair = j["flair"].get<std::string>();
      if (j.contains("anatomy_labels")) r.anatomy_labels = j["anatomy_labels"].get<std::string>();
      if (j.contains("lesion_labels")) r.lesion_labels = j["lesion_labels"].get<std::string>();
      out.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_manifest(const fs::path& path, const std::vector<SubjectRecord>& records) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write manifest " + path.string());
  for (const auto& r : records) {
    json j{{"id", r.id}, {"provenance", to_string(r.provenance)}, {"split", to_string(r.split)}, {"t1", r.t1}};
    if (r.flair) j["flair"] = *r.flair;
    if (r.anatomy_labels) j["anatomy_labels"] = *r.anatomy_labels;
    if (r.lesion_labels) j["lesion_labels"] = *r.lesion_labels;
    out << j.dump() << "\n";
  }
}

std::vector<Subject> load_dataset(const fs::path& manifest) {
  const fs::path base = manifest.parent_path();
  std::vector<Subject> out;
  for (const auto& r : read_manifest(manifest)) {
    Subject s;
    s.id = r.id;
    s.provenance = r.provenance;
    s.split = r.split;
    s.t1 = load_volume(base / r.t1).first;
    if (r.flair) s.flair = load_volume(base / *r.flair).first;
    if (r.anatomy_labels) {
      LabelMap raw = load_labels(base / *r.anatomy_labels);
      raw.class_count = kJointClassCount;
      raw.validate();
      s.anatomy = std::move(raw);
    }
    if (r.lesion_labels) s.lesion = load_mask(base / *r.lesion_labels);
    out.push_back(std::move(s));
  }
  return out;
}

EvaluationSidecar load_sidecar(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open sidecar " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  EvaluationSidecar out;
  for (auto it = j.begin(); it != j.end(); ++it) {
    LabelMap m = load_labels(path.parent_path() / it.value().get<std::string>());
    m.class_count = kJointClassCount;
    out.emplace(it.key(), std::move(m));
  }
  return out;
}

namespace {

Split split_for(int index, const SplitCounts& counts) {
  if (index < counts.train) return Split::kTrain;
  if (index < counts.train + counts.val) return Split::kVal;
  return Split::kTest;
}

}  // namespace

SyntheticCorpus synthesize_corpus(const PhantomConfig& cfg, const SplitCounts& anatomy, const SplitCounts& lesion,
                                  uint64_t seed) {
  const SeedStreams streams(seed);
  SyntheticCorpus corpus;
  for (int i = 0; i < anatomy.total(); ++i) {
    auto ph = generate_anatomy_phantom(cfg, streams.derive("anatomy-phantom", static_cast<uint64_t>(i)));
    Subject s;
    s.id = "anat" + std::string(i < 10 ? "00" : (i < 100 ? "0" : "")) + std::to_string(i);
    s.provenance = Provenance::kLesionFree;
    s.split = split_for(i, anatomy);
    s.t1 = std::move(ph.t1);
    s.anatomy = std::move(ph.labels);
    corpus.anatomy.push_back(std::move(s));
  }
  for (int i = 0; i < lesion.total(); ++i) {
    auto ph = generate_lesion_phantom(cfg, streams.derive("lesion-phantom", static_cast<uint64_t>(i)));
    Subject s;
    s.id = "les" + std::string(i < 10 ? "00" : (i < 100 ? "0" : "")) + std::to_string(i);
    s.provenance = Provenance::kLesioned;
    s.split = split_for(i, lesion);
    s.t1 = std::move(ph.t1);
    s.flair = std::move(ph.flair);
    s.lesion = std::move(ph.lesion);
    corpus.sidecar.emplace(s.id, std::move(ph.full_gt));
    corpus.lesion.push_back(std::move(s));
  }
  return corpus;
}

void write_corpus(const SyntheticCorpus& corpus, const fs::path& dir) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "labels");
  fs::create_directories(dir / "eval");

  std::vector<SubjectRecord> anatomy;
  for (const auto& s : corpus.anatomy) {
    SubjectRecord r{s.id, s.provenance, s.split, "images/" + s.id + "_t1.nii.gz", {}, {}, {}};
    save_volume(dir / r.t1, s.t1, "T1");
    if (s.anatomy) {
      r.anatomy_labels = "labels/" + s.id + "_anatomy.nii.gz";
      save_labels(dir / *r.anatomy_labels, *s.anatomy, s.t1.spacing);
    }
    anatomy.push_back(std::move(r));
  }
  write_manifest(dir / "anatomy.jsonl", anatomy);

  std::vector<SubjectRecord> lesion;
  for (const auto& s : corpus.lesion) {
    SubjectRecord r{s.id, s.provenance, s.split, "images/" + s.id + "_t1.nii.gz", {}, {}, {}};
    save_volume(dir / r.t1, s.t1, "T1");
    if (s.flair) {
      r.flair = "images/" + s.id + "_flair.nii.gz";
      save_volume(dir / *r.flair, *s.flair, "FLAIR");
    }
    if (s.lesion) {
      r.lesion_labels = "labels/" + s.id + "_lesion.nii.gz";
      save_mask(dir / *r.lesion_labels, *s.lesion, s.t1.spacing);
    }
    lesion.push_back(std::move(r));
  }
  write_manifest(dir / "lesion.jsonl", lesion);

  json side = json::object();
  for (const auto& [id, gt] : corpus.sidecar) {
    const std::string rel = "eval/" + id + "_full_gt.nii.gz";
    save_labels(dir / rel, gt);
    side[id] = rel;
  }
  std::ofstream(dir / "eval_sidecar.json") << side.dump(2) << "\n";
}

std::vector<Subject> select_split(const std::vector<Subject>& subjects, Split split) {
  std::vector<Subject> out;
  for (const auto& s : subjects) {
    if (s.split == split) out.push_back(s);
  }
  return out;
}

}  // namespace jointseg

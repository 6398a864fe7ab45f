#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "jointseg/phantom.hpp"
#include "jointseg/volume.hpp"

namespace jointseg {

enum class Provenance { kLesionFree, kLesioned, kPseudoLesioned };
enum class Split { kTrain, kVal, kTest };

std::string to_string(Provenance p);
std::string to_string(Split s);
Provenance parse_provenance(const std::string& s);
Split parse_split(const std::string& s);

// One subject as a training/inference stage sees it. Lesion subjects never
// carry anatomy labels; their hidden anatomy lives in the evaluation sidecar.
struct Subject {
  std::string id;
  Provenance provenance = Provenance::kLesionFree;
  Split split = Split::kTrain;
  Volume t1;
  std::optional<Volume> flair;
  std::optional<LabelMap> anatomy;
  std::optional<LesionMask> lesion;
};

// Manifest line. Paths are relative to the manifest's directory.
struct SubjectRecord {
  std::string id;
  Provenance provenance = Provenance::kLesionFree;
  Split split = Split::kTrain;
  std::string t1;
  std::optional<std::string> flair;
  std::optional<std::string> anatomy_labels;
  std::optional<std::string> lesion_labels;
};

std::vector<SubjectRecord> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<SubjectRecord>& records);

std::vector<Subject> load_dataset(const std::filesystem::path& manifest);

using EvaluationSidecar = std::map<std::string, LabelMap>;
EvaluationSidecar load_sidecar(const std::filesystem::path& path);

struct SplitCounts {
  int train = 0;
  int val = 0;
  int test = 0;

  int total() const { return train + val + test; }
};

struct SyntheticCorpus {
  std::vector<Subject> anatomy;
  std::vector<Subject> lesion;
  EvaluationSidecar sidecar;
};

SyntheticCorpus synthesize_corpus(const PhantomConfig& cfg, const SplitCounts& anatomy, const SplitCounts& lesion,
                                  uint64_t seed);

// Materialises NIfTI files plus anatomy.jsonl, lesion.jsonl and
// eval_sidecar.json under `dir`.
void write_corpus(const SyntheticCorpus& corpus, const std::filesystem::path& dir);

std::vector<Subject> select_split(const std::vector<Subject>& subjects, Split split);

}  // namespace jointseg

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "jointseg/checkpoint.hpp"
#include "jointseg/config.hpp"
#include "jointseg/dataset.hpp"
#include "jointseg/error.hpp"
#include "jointseg/experiments.hpp"
#include "jointseg/infer.hpp"
#include "jointseg/metrics.hpp"
#include "jointseg/nifti.hpp"
#include "jointseg/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace jointseg;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kUsage = 2, kConfig = 3, kInput = 4, kTraining = 5 };

struct Globals {
  std::string work_dir = "work";
  std::string config_path;
  std::string data_dir;
  bool verbose = false;
};

// Paths under the work directory. Every stage reads its inputs from and
// writes its outputs to this layout unless a flag overrides it.
struct Workspace {
  fs::path root;
  fs::path data;

  fs::path checkpoints() const { return root / "checkpoints"; }
  fs::path logs() const { return root / "logs"; }
  fs::path metrics() const { return root / "metrics"; }
  fs::path manifests() const { return root / "manifests"; }
  fs::path pseudolabels() const { return root / "pseudolabels"; }
  fs::path predictions() const { return root / "predictions"; }
  fs::path experiments() const { return root / "experiments"; }
  fs::path reports() const { return root / "reports"; }

  fs::path anatomy_ckpt(const std::string& tag) const { return checkpoints() / ("anatomy_" + tag + ".ckpt"); }
  fs::path lesion_ckpt(int fold) const { return checkpoints() / ("lesion_fold" + std::to_string(fold) + ".ckpt"); }
  fs::path joint_ckpt(int fold) const { return checkpoints() / ("joint_fold" + std::to_string(fold) + ".ckpt"); }
};

class Timer {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

struct Session {
  Globals g;
  PipelineConfig cfg;
  Workspace ws;

  void init() {
    cfg = g.config_path.empty() ? PipelineConfig{} : load_config(g.config_path);
    ws.root = g.work_dir;
    ws.data = g.data_dir.empty() ? ws.root / "data" : fs::path(g.data_dir);
    fs::create_directories(ws.root);
  }

  SeedStreams seeds() const { return SeedStreams(cfg.seed); }

  TrainContext context(LossLog& log) const {
    TrainContext ctx;
    ctx.seeds = seeds();
    ctx.log = &log;
    ctx.verbose = g.verbose;
    ctx.on_divergence = [this](const Checkpoint& last) {
      fs::create_directories(ws.checkpoints());
      const auto path = ws.checkpoints() / "diverged_last_good.ckpt";
      save_checkpoint(path, last);
      std::cerr << "training diverged; last finite state saved to " << path.string() << "\n";
    };
    return ctx;
  }

  fs::path anatomy_manifest() const { return ws.data / "anatomy.jsonl"; }
  fs::path lesion_manifest() const { return ws.data / "lesion.jsonl"; }

  std::vector<Subject> anatomy() const { return load_dataset(anatomy_manifest()); }
  std::vector<Subject> lesion() const { return load_dataset(lesion_manifest()); }
  EvaluationSidecar sidecar() const { return load_sidecar(ws.data / "eval_sidecar.json"); }

  uint64_t dataset_hash() const {
    uint64_t h = fnv1a("");
    for (const auto& p : {anatomy_manifest(), lesion_manifest()}) {
      if (fs::exists(p)) h = fnv1a(hex64(file_hash(p)), h);
    }
    return h;
  }

  void write_losses(const LossLog& log) const {
    if (log.records().empty()) return;
    fs::create_directories(ws.logs());
    log.write_csv(ws.logs() / "losses.csv");
  }

  void manifest(const std::string& stage, const std::vector<fs::path>& inputs, const std::vector<fs::path>& outputs,
                const Timer& t) const {
    RunManifest m;
    m.stage = stage;
    m.config_hash = cfg.hash();
    m.dataset_hash = dataset_hash();
    m.seed = cfg.seed;
    for (const auto& p : inputs) {
      if (fs::is_regular_file(p)) m.lineage.emplace_back(p.string(), hex64(file_hash(p)));
    }
    for (const auto& p : outputs) m.outputs.push_back(p.string());
    m.wall_clock_s = t.seconds();
    const auto path = write_run_manifest(ws.manifests(), m);
    if (g.verbose) std::cerr << "manifest " << path.string() << "\n";
  }

  AnatomyModel load_anatomy(const std::string& tag, Stage stage) const {
    return load_checkpoint(ws.anatomy_ckpt(tag)).anatomy(stage);
  }
  LesionModel load_lesion(int fold) const { return load_checkpoint(ws.lesion_ckpt(fold)).lesion(Stage::kPretrained); }

  SupportSample support() const { return pick_support(anatomy(), cfg.adapt, cfg.patch.size); }
};

std::vector<std::string> subject_ids(const std::vector<Subject>& subjects) {
  std::vector<std::string> ids;
  for (const auto& s : subjects) ids.push_back(s.id);
  return ids;
}

std::string member_tag(int fold, float fill) {
  std::ostringstream os;
  os << "fold" << fold << "_fill" << fill;
  return os.str();
}

void write_traces(const fs::path& path, const std::vector<std::tuple<std::string, std::string, std::vector<double>>>& rows) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << "subject_id,member,step,inner_loss\n";
  for (const auto& [id, member, trace] : rows) {
    for (size_t k = 0; k < trace.size(); ++k) out << id << "," << member << "," << k << "," << trace[k] << "\n";
  }
}

// ---- stages ---------------------------------------------------------------

int cmd_synth(Session& s, const std::string& out_dir) {
  Timer t;
  const fs::path dir = out_dir.empty() ? s.ws.data : fs::path(out_dir);
  const auto corpus = synthesize_corpus(s.cfg.phantom, s.cfg.anatomy_counts, s.cfg.lesion_counts, s.cfg.seed);
  write_corpus(corpus, dir);
  save_config(dir / "config.yaml", s.cfg);
  s.ws.data = dir;
  s.manifest("synth-data", {}, {dir / "anatomy.jsonl", dir / "lesion.jsonl", dir / "eval_sidecar.json"}, t);
  std::cout << "wrote " << corpus.anatomy.size() << " anatomy and " << corpus.lesion.size()
            << " lesion phantoms to " << dir.string() << "\n";
  return kOk;
}

int cmd_pretrain(Session& s, const std::string& branch) {
  Timer t;
  LossLog log;
  TrainContext ctx = s.context(log);
  fs::create_directories(s.ws.checkpoints());
  std::vector<fs::path> outputs;
  if (branch == "anatomy" || branch == "all") {
    const auto train = select_split(s.anatomy(), Split::kTrain);
    const auto model = pretrain_anatomy(train, s.cfg, ctx);
    auto ck = Checkpoint::of(model, Stage::kPretrained);
    ck.meta["train_ids"] = subject_ids(train);
    outputs.push_back(s.ws.anatomy_ckpt("pretrained"));
    save_checkpoint(outputs.back(), ck);
    std::cout << "anatomy branch: " << outputs.back().string() << "\n";
  }
  if (branch == "lesion" || branch == "all") {
    const auto train = select_split(s.lesion(), Split::kTrain);
    const auto folds = pretrain_lesion(train, s.cfg, ctx);
    for (size_t k = 0; k < folds.models.size(); ++k) {
      auto ck = Checkpoint::of(folds.models[k], Stage::kPretrained);
      ck.meta["fold"] = k;
      ck.meta["ids"] = folds.ids;
      ck.meta["fold_of"] = folds.fold_of;
      outputs.push_back(s.ws.lesion_ckpt(static_cast<int>(k)));
      save_checkpoint(outputs.back(), ck);
    }
    std::cout << "lesion branch: " << folds.models.size() << " fold checkpoints\n";
  }
  s.write_losses(log);
  s.manifest("pretrain-" + branch, {s.anatomy_manifest(), s.lesion_manifest()}, outputs, t);
  return kOk;
}

int cmd_meta(Session& s, bool control) {
  Timer t;
  LossLog log;
  TrainContext ctx = s.context(log);
  if (control) s.cfg.meta.inner_loop = false;
  const auto pre = s.load_anatomy("pretrained", Stage::kPretrained);
  const auto model = meta_cotrain(pre, select_split(s.anatomy(), Split::kTrain),
                                  select_split(s.lesion(), Split::kTrain), s.cfg, ctx);
  const auto out = s.ws.anatomy_ckpt(control ? "control" : "cotrained");
  auto ck = Checkpoint::of(model, Stage::kCotrained);
  ck.meta["inner_loop"] = !control;
  save_checkpoint(out, ck);
  s.write_losses(log);
  s.manifest(control ? "meta-train-control" : "meta-train", {s.ws.anatomy_ckpt("pretrained")}, {out}, t);
  std::cout << "co-trained anatomy branch: " << out.string() << "\n";
  return kOk;
}

int cmd_pseudolabel(Session& s) {
  Timer t;
  const auto model = s.load_anatomy("cotrained", Stage::kCotrained);
  const auto train = select_split(s.lesion(), Split::kTrain);
  const auto labels = generate_pseudolabels(model, train, s.support(), s.cfg, s.seeds());
  fs::create_directories(s.ws.pseudolabels());
  json index = json::object();
  std::vector<fs::path> outputs;
  std::vector<std::tuple<std::string, std::string, std::vector<double>>> traces;
  int flagged = 0;
  for (const auto& pl : labels) {
    const auto path = s.ws.pseudolabels() / (pl.id + "_target.nii.gz");
    save_probability_map(path, pl.target);
    outputs.push_back(path);
    index[pl.id] = {{"path", path.filename().string()}, {"flagged", pl.flagged}};
    traces.emplace_back(pl.id, "pseudolabel", pl.trace);
    flagged += pl.flagged ? 1 : 0;
  }
  std::ofstream(s.ws.pseudolabels() / "index.json") << index.dump(2) << "\n";
  write_traces(s.ws.metrics() / "pseudolabel_traces.csv", traces);
  s.manifest("pseudolabel", {s.ws.anatomy_ckpt("cotrained"), s.lesion_manifest()}, outputs, t);
  std::cout << labels.size() << " pseudolabels, " << flagged << " flagged for divergent adaptation\n";
  return kOk;
}

int cmd_joint(Session& s, const std::string& mask_source, int folds) {
  Timer t;
  if (!mask_source.empty()) s.cfg.joint.mask_source = parse_mask_source(mask_source);
  if (folds <= 0) folds = s.cfg.ensemble.folds;
  LossLog log;
  TrainContext ctx = s.context(log);
  const auto cotrained = s.load_anatomy("cotrained", Stage::kCotrained);
  const auto anatomy = select_split(s.anatomy(), Split::kTrain);
  const auto train = select_split(s.lesion(), Split::kTrain);

  std::ifstream idx_in(s.ws.pseudolabels() / "index.json");
  if (!idx_in) throw InputError("no pseudolabels under " + s.ws.pseudolabels().string() + "; run pseudolabel first");
  const json index = json::parse(idx_in);
  std::vector<const Subject*> used;
  std::vector<ProbabilityMap> targets;
  for (const auto& subj : train) {
    if (!index.contains(subj.id) || index[subj.id]["flagged"].get<bool>()) continue;
    used.push_back(&subj);
    targets.push_back(load_probability_map(s.ws.pseudolabels() / index[subj.id]["path"].get<std::string>()));
  }

  std::vector<fs::path> outputs;
  std::vector<fs::path> inputs{s.ws.anatomy_ckpt("cotrained")};
  for (int k = 0; k < folds; ++k) {
    const auto lesion_model = s.load_lesion(k);
    inputs.push_back(s.ws.lesion_ckpt(k));
    const uint64_t phi_before = Checkpoint::of(lesion_model, Stage::kPretrained).hash_of("phi");
    std::vector<JointSample> data;
    for (size_t i = 0; i < used.size(); ++i) {
      JointSample js;
      js.subject = used[i];
      js.target = &targets[i];
      js.mask = s.cfg.joint.mask_source == MaskSource::kGroundTruth
                    ? *used[i]->lesion
                    : infer_lesion_mask(lesion_model, *used[i]->flair, s.cfg.patch);
      data.push_back(std::move(js));
    }
    const auto model = joint_train(cotrained, lesion_model, data, anatomy, s.cfg, ctx, k);
    auto ck = Checkpoint::of(model, Stage::kJoint);
    if (ck.hash_of("phi") != phi_before) throw TrainingError("joint training modified the frozen FLAIR branch");
    ck.meta["fold"] = k;
    ck.meta["mask_source"] = to_string(s.cfg.joint.mask_source);
    ck.meta["phi_hash"] = hex64(phi_before);
    outputs.push_back(s.ws.joint_ckpt(k));
    save_checkpoint(outputs.back(), ck);
    std::cout << "joint model fold " << k << ": " << outputs.back().string() << "\n";
  }
  s.write_losses(log);
  s.manifest("joint-train", inputs, outputs, t);
  return kOk;
}

std::vector<JointModel> load_joint_models(const Session& s, std::vector<std::string> paths,
                                          std::vector<fs::path>& inputs) {
  if (paths.empty()) {
    for (int k = 0; k < s.cfg.ensemble.folds; ++k) paths.push_back(s.ws.joint_ckpt(k).string());
  }
  std::vector<JointModel> models;
  for (const auto& p : paths) {
    models.push_back(load_checkpoint(p).joint());
    inputs.emplace_back(p);
  }
  return models;
}

int cmd_infer(Session& s, const std::vector<std::string>& ckpts, const std::string& t1_path,
              const std::string& flair_path, std::vector<float> fills, int steps, std::string out_dir) {
  Timer t;
  if (steps > 0) s.cfg.adapt.steps = steps;
  if (fills.empty()) fills = ensemble_fills(s.cfg.fills, s.cfg.ensemble.fills);
  const fs::path out = out_dir.empty() ? s.ws.predictions() : fs::path(out_dir);
  fs::create_directories(out);
  std::vector<fs::path> inputs;
  const auto models = load_joint_models(s, ckpts, inputs);
  const auto support = s.support();

  struct Case {
    std::string id;
    Volume t1;
    std::optional<Volume> flair;
  };
  std::vector<Case> cases;
  if (!t1_path.empty()) {
    Case c{fs::path(t1_path).filename().string(), load_volume(t1_path).first, std::nullopt};
    c.id = c.id.substr(0, c.id.find('.'));
    if (!flair_path.empty()) c.flair = load_volume(flair_path).first;
    inputs.emplace_back(t1_path);
    if (!flair_path.empty()) inputs.emplace_back(flair_path);
    cases.push_back(std::move(c));
  } else {
    for (auto& subj : select_split(s.lesion(), Split::kTest)) cases.push_back({subj.id, subj.t1, subj.flair});
  }

  std::vector<fs::path> outputs;
  std::vector<std::tuple<std::string, std::string, std::vector<double>>> traces;
  for (const auto& c : cases) {
    const auto members_dir = out / "members" / c.id;
    const auto r = infer_ensemble(models, fills, c.t1, c.flair, support, s.cfg.patch, s.cfg.adapt, members_dir);
    for (const auto& [suffix, save] :
         std::vector<std::pair<std::string, std::function<void(const fs::path&)>>>{
             {"_joint.nii.gz", [&](const fs::path& p) { save_labels(p, r.joint, c.t1.spacing); }},
             {"_anatomy.nii.gz", [&](const fs::path& p) { save_labels(p, r.anatomy, c.t1.spacing); }},
             {"_lesion.nii.gz", [&](const fs::path& p) { save_mask(p, r.lesion, c.t1.spacing); }}}) {
      outputs.push_back(out / (c.id + suffix));
      save(outputs.back());
    }
    for (const auto& m : r.members) {
      for (size_t k = 0; k < m.result.traces.size(); ++k) {
        traces.emplace_back(c.id, member_tag(m.fold, m.fill) + "_patch" + std::to_string(k), m.result.traces[k]);
      }
    }
    std::cout << c.id << ": " << r.survivors << "/" << r.members.size() << " members\n";
  }
  write_traces(out / "adaptation_traces.csv", traces);
  if (t1_path.empty()) write_traces(s.ws.metrics() / "infer_traces.csv", traces);
  s.manifest("infer", inputs, outputs, t);
  return kOk;
}

int cmd_evaluate(Session& s, std::string pred_dir) {
  Timer t;
  const fs::path preds = pred_dir.empty() ? s.ws.predictions() : fs::path(pred_dir);
  fs::create_directories(s.ws.metrics());
  std::vector<fs::path> outputs;
  std::vector<fs::path> inputs;

  // Pretrained branches on their own held-out phantoms.
  if (fs::exists(s.ws.anatomy_ckpt("pretrained"))) {
    const auto model = s.load_anatomy("pretrained", Stage::kPretrained);
    std::vector<MetricRow> rows;
    for (const auto& subj : select_split(s.anatomy(), Split::kTest)) {
      const auto inf = infer_anatomy(model, subj.t1, nullptr, nullptr, 0.0f, s.cfg.patch, s.cfg.adapt, false);
      auto r = score_subject(subj.id, anatomy_labels(inf.probs), *subj.anatomy, subj.t1.spacing, "anatomy_pretrained");
      rows.insert(rows.end(), r.begin(), r.end());
    }
    outputs.push_back(s.ws.metrics() / "anatomy_pretrained.csv");
    write_metrics_csv(outputs.back(), rows);
    inputs.push_back(s.ws.anatomy_ckpt("pretrained"));
  }
  for (int k = 0; fs::exists(s.ws.lesion_ckpt(k)); ++k) {
    const auto model = s.load_lesion(k);
    std::vector<MetricRow> rows;
    for (const auto& subj : select_split(s.lesion(), Split::kTest)) {
      const auto pred = infer_lesion_mask(model, *subj.flair, s.cfg.patch);
      const auto dice = dice_score(pred, *subj.lesion);
      rows.push_back({subj.id, "lesion", dice, hd95(pred, *subj.lesion, subj.t1.spacing),
                      "lesion_fold" + std::to_string(k)});
    }
    outputs.push_back(s.ws.metrics() / ("lesion_fold" + std::to_string(k) + ".csv"));
    write_metrics_csv(outputs.back(), rows);
    inputs.push_back(s.ws.lesion_ckpt(k));
  }

  // Ensemble predictions against the hidden joint ground truth.
  if (fs::exists(preds)) {
    const auto sidecar = s.sidecar();
    std::vector<MetricRow> rows;
    for (const auto& subj : select_split(s.lesion(), Split::kTest)) {
      const auto joint_path = preds / (subj.id + "_joint.nii.gz");
      if (!fs::exists(joint_path)) continue;
      const auto gt_it = sidecar.find(subj.id);
      if (gt_it == sidecar.end()) throw InputError("no hidden ground truth for '" + subj.id + "'");
      const auto gt = joint_ground_truth(gt_it->second, *subj.lesion);
      auto joint = score_subject(subj.id, load_labels(joint_path), gt, subj.t1.spacing, "joint");
      rows.insert(rows.end(), joint.begin(), joint.end());
      const auto anat_path = preds / (subj.id + "_anatomy.nii.gz");
      if (fs::exists(anat_path)) {
        auto a = score_subject(subj.id, load_labels(anat_path), gt_it->second, subj.t1.spacing, "anatomy");
        rows.insert(rows.end(), a.begin(), a.end());
      }
      inputs.push_back(joint_path);
    }
    if (!rows.empty()) {
      outputs.push_back(s.ws.metrics() / "joint.csv");
      write_metrics_csv(outputs.back(), rows);
    }
  }
  if (outputs.empty()) {
    std::cout << "nothing to evaluate under " << s.ws.root.string() << "\n";
    return kOk;
  }
  for (const auto& p : outputs) {
    const auto agg = aggregate_dice(read_metrics_csv(p));
    for (const auto& [stage, classes] : agg) {
      for (const auto& [cls, a] : classes) {
        std::cout << stage << " " << cls << " dice " << a.mean << " +- " << a.std << " (n=" << a.n << ")\n";
      }
    }
  }
  s.manifest("evaluate", inputs, outputs, t);
  return kOk;
}

int cmd_experiment(Session& s, const std::string& name) {
  Timer t;
  fs::create_directories(s.ws.experiments());
  std::vector<fs::path> outputs;
  const bool all = name == "all";
  const auto anatomy = s.anatomy();
  const auto lesion = s.lesion();
  const auto support = pick_support(anatomy, s.cfg.adapt, s.cfg.patch.size);
  const auto seeds = s.seeds();

  if (all || name == "degradation") {
    const auto cotrained = s.load_anatomy("cotrained", Stage::kCotrained);
    const auto st = run_degradation_study(cotrained, s.load_lesion(0), select_split(lesion, Split::kTest),
                                          s.sidecar(), {1.0, 0.5, 0.25}, support, s.cfg, seeds);
    outputs.push_back(s.ws.experiments() / "degradation.csv");
    st.table().write_csv(outputs.back());
    for (size_t f = 0; f < st.fractions.size(); ++f) {
      std::cout << "degradation retain " << st.fractions[f] << " mean anatomy dice " << st.mean_anatomy[f] << "\n";
    }
  }
  if (all || name == "mask-source") {
    LossLog log;
    const auto cotrained = s.load_anatomy("cotrained", Stage::kCotrained);
    const auto st = run_mask_source_study(cotrained, s.load_lesion(0), select_split(anatomy, Split::kTrain),
                                          select_split(lesion, Split::kTrain), select_split(lesion, Split::kTest),
                                          s.sidecar(), s.cfg, seeds);
    outputs.push_back(s.ws.experiments() / "mask_source.csv");
    st.table().write_csv(outputs.back());
    for (const auto& [src, classes] : st.per_class) {
      double sum = 0;
      for (const auto& [c, d] : classes) sum += d;
      std::cout << "mask source " << src << " mean dice " << sum / static_cast<double>(classes.size()) << "\n";
    }
  }
  if (all || name == "ablation") {
    const auto pre = s.load_anatomy("pretrained", Stage::kPretrained);
    const auto meta = s.load_anatomy("cotrained", Stage::kCotrained);
    const auto cases =
        held_out_pseudo_lesions(select_split(anatomy, Split::kTest), select_split(lesion, Split::kTest), 10);
    const auto st = run_inner_loop_ablation(pre, meta, select_split(anatomy, Split::kTrain),
                                            select_split(lesion, Split::kTrain), cases, support, s.cfg, seeds);
    outputs.push_back(s.ws.experiments() / "inner_loop_ablation.csv");
    st.table().write_csv(outputs.back());
    std::cout << "inner-loop ablation: meta wins " << st.meta_wins() << "/" << st.ids.size() << "\n";
  }
  if (outputs.empty()) throw InputError("unknown experiment '" + name + "'");
  s.manifest("experiment-" + name, {s.anatomy_manifest(), s.lesion_manifest()}, outputs, t);
  return kOk;
}

int cmd_report(Session& s, std::string metrics_dir, std::string out_dir, std::string tag) {
  const fs::path in = metrics_dir.empty() ? s.ws.metrics() : fs::path(metrics_dir);
  const fs::path out = out_dir.empty() ? s.ws.reports() : fs::path(out_dir);
  if (tag.empty()) tag = hex64(s.cfg.hash()).substr(0, 12);
  const auto r = write_report(in, out, tag);
  for (const auto& f : r.files) std::cout << f.string() << "\n";
  if (r.no_data) std::cout << "no data under " << in.string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint healthy-tissue and lesion segmentation from disparately labelled data"};
  app.require_subcommand(1);
  app.fallthrough();
  Session s;
  app.add_option("-w,--work-dir", s.g.work_dir, "Working directory for checkpoints, logs and metrics");
  app.add_option("-c,--config", s.g.config_path, "YAML configuration (defaults to built-in desk settings)");
  app.add_option("-d,--data-dir", s.g.data_dir, "Dataset directory (default <work-dir>/data)");
  app.add_flag("-v,--verbose", s.g.verbose, "Per-epoch progress on stderr");

  std::function<int()> run;

  auto* synth = app.add_subcommand("synth-data", "Generate the phantom corpus as NIfTI plus manifests");
  std::string synth_out;
  synth->add_option("-o,--out", synth_out, "Output directory (default <work-dir>/data)");
  synth->callback([&] { run = [&] { return cmd_synth(s, synth_out); }; });

  auto* pretrain = app.add_subcommand("pretrain", "Pretrain the T1 anatomy branch and the FLAIR lesion folds");
  std::string branch = "all";
  pretrain->add_option("--branch", branch, "anatomy, lesion or all")
      ->check(CLI::IsMember({"anatomy", "lesion", "all"}));
  pretrain->callback([&] { run = [&] { return cmd_pretrain(s, branch); }; });

  auto* meta = app.add_subcommand("meta-train", "Meta co-training of the anatomy branch on pseudo-lesions");
  bool control = false;
  meta->add_flag("--no-inner-loop", control, "Train the outer-loss-only control instead");
  meta->callback([&] { run = [&] { return cmd_meta(s, control); }; });

  auto* pseudo = app.add_subcommand("pseudolabel", "Adapted anatomy pseudolabels for the lesion training set");
  pseudo->callback([&] { run = [&] { return cmd_pseudolabel(s); }; });

  auto* joint = app.add_subcommand("joint-train", "Train the fusion model per lesion fold with the FLAIR branch frozen");
  std::string mask_source;
  int joint_folds = 0;
  joint->add_option("--mask-source", mask_source, "gt or predicted (default from config)")
      ->check(CLI::IsMember({"gt", "predicted"}));
  joint->add_option("--folds", joint_folds, "Number of folds to train (default ensemble.folds)");
  joint->callback([&] { run = [&] { return cmd_joint(s, mask_source, joint_folds); }; });

  auto* infer = app.add_subcommand("infer", "Ensemble inference with inference-time adaptation");
  std::vector<std::string> ckpts;
  std::string t1, flair, infer_out;
  std::vector<float> fills;
  int steps = 0;
  infer->add_option("--checkpoints", ckpts, "Joint checkpoints (default the fold checkpoints in the work dir)");
  infer->add_option("--t1", t1, "T1 volume; without it the lesion test split is processed");
  infer->add_option("--flair", flair, "FLAIR volume");
  infer->add_option("--fills", fills, "Fill values (default the first ensemble.fills configured values)");
  infer->add_option("--steps", steps, "Adaptation steps (default adapt.steps)");
  infer->add_option("-o,--out-dir", infer_out, "Output directory (default <work-dir>/predictions)");
  infer->callback([&] { run = [&] { return cmd_infer(s, ckpts, t1, flair, fills, steps, infer_out); }; });

  auto* evaluate = app.add_subcommand("evaluate", "Dice and HD95 for every available stage");
  std::string pred_dir;
  evaluate->add_option("--predictions", pred_dir, "Prediction directory (default <work-dir>/predictions)");
  evaluate->callback([&] { run = [&] { return cmd_evaluate(s, pred_dir); }; });

  auto* experiment = app.add_subcommand("experiment", "Degradation, mask-source and inner-loop ablation studies");
  std::string exp_name = "all";
  experiment->add_option("name", exp_name, "degradation, mask-source, ablation or all")
      ->check(CLI::IsMember({"degradation", "mask-source", "ablation", "all"}));
  experiment->callback([&] { run = [&] { return cmd_experiment(s, exp_name); }; });

  auto* report = app.add_subcommand("report", "Aggregate metric and trace CSVs into tables and figures");
  std::string metrics_dir, report_out, tag;
  report->add_option("--metrics-dir", metrics_dir, "Metric CSV directory (default <work-dir>/metrics)");
  report->add_option("-o,--out-dir", report_out, "Report directory (default <work-dir>/reports)");
  report->add_option("--tag", tag, "File name tag (default derived from the config hash)");
  report->callback([&] { run = [&] { return cmd_report(s, metrics_dir, report_out, tag); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    s.init();
    return run();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const TrainingError& e) {
    std::cerr << "training error: " << e.what() << "\n";
    return kTraining;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
}

// Acceptance run: one PASS/FAIL line per criterion. Criteria 1-2 run the
// unit suites, criterion 3 drives the CLI end to end (twice, for
// determinism) and the remaining criteria reuse the first run's artifacts.

#include <CLI11.hpp>
#include <torch/torch.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "jointseg/checkpoint.hpp"
#include "jointseg/config.hpp"
#include "jointseg/dataset.hpp"
#include "jointseg/experiments.hpp"
#include "jointseg/infer.hpp"
#include "jointseg/losses.hpp"
#include "jointseg/nifti.hpp"
#include "jointseg/tensor_bridge.hpp"

namespace fs = std::filesystem;
using namespace jointseg;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

int run(const std::string& cmd, const fs::path& log) {
  const std::string full = cmd + " >>" + log.string() + " 2>&1";
  const int status = std::system(full.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome unit_suite(const std::string& unit, const std::string& suite, double budget_s, const fs::path& log) {
  const auto t0 = std::chrono::steady_clock::now();
  const int rc = run(unit + " --test-suite=" + suite, log);
  const double s = since(t0);
  return {rc == 0 && s < budget_s, "suite " + suite + " exit " + std::to_string(rc) + " in " + fmt(s, 1) + " s (< " +
                                       fmt(budget_s, 0) + " s)"};
}

struct Pipeline {
  std::string cli;
  std::string config;

  // Returns the failing stage, empty on success.
  std::string execute(const fs::path& work, double& seconds) const {
    fs::remove_all(work);
    fs::create_directories(work);
    const auto log = work / "cli.log";
    const std::string base = cli + " -w " + work.string() + " -c " + config + " ";
    const std::vector<std::string> stages{"synth-data",  "pretrain",   "meta-train", "pseudolabel",
                                          "joint-train", "infer",      "evaluate"};
    const auto t0 = std::chrono::steady_clock::now();
    for (const auto& st : stages) {
      std::cerr << "  [" << work.filename().string() << "] " << st << " (" << fmt(since(t0), 0) << " s)\n";
      if (run(base + st, log) != 0) return st;
    }
    seconds = since(t0);
    return {};
  }
};

// Content that must match between two runs from the same seed. Checkpoints
// are compared by parameter hashes; NIfTI and CSV outputs byte for byte.
std::map<std::string, std::string> fingerprint(const fs::path& work) {
  std::map<std::string, std::string> fp;
  for (const auto& e : fs::directory_iterator(work / "checkpoints")) {
    const auto ck = load_checkpoint(e.path());
    for (const auto& [group, params] : ck.groups) {
      fp["checkpoints/" + e.path().filename().string() + ":" + group] = hex64(params.content_hash());
    }
  }
  for (const auto* sub : {"predictions", "metrics", "pseudolabels"}) {
    for (const auto& e : fs::recursive_directory_iterator(work / sub)) {
      if (!e.is_regular_file()) continue;
      fp[fs::relative(e.path(), work).string()] = hex64(file_hash(e.path()));
    }
  }
  return fp;
}

Outcome quality_gates(const fs::path& work) {
  std::ostringstream os;
  bool ok = true;
  const auto anatomy = aggregate_dice(read_metrics_csv(work / "metrics" / "anatomy_pretrained.csv"));
  double worst_a = 1.0;
  std::string worst_class;
  for (const auto& [cls, a] : anatomy.at("anatomy_pretrained")) {
    if (a.mean < worst_a) {
      worst_a = a.mean;
      worst_class = cls;
    }
  }
  ok = ok && worst_a > 0.90;
  os << "anatomy min per-class Dice " << fmt(worst_a) << " (" << worst_class << ") > 0.90";
  double worst_l = 1.0;
  int folds = 0;
  for (; fs::exists(work / "metrics" / ("lesion_fold" + std::to_string(folds) + ".csv")); ++folds) {
    const auto tag = "lesion_fold" + std::to_string(folds);
    const auto agg = aggregate_dice(read_metrics_csv(work / "metrics" / (tag + ".csv")));
    worst_l = std::min(worst_l, agg.at(tag).at("lesion").mean);
  }
  ok = ok && folds > 0 && worst_l > 0.85;
  os << "; lesion min fold Dice " << fmt(worst_l) << " over " << folds << " folds > 0.85";
  return {ok, os.str()};
}

// 1 - soft Dice between predictions on the clean patch and on the patch
// with the lesion filled by `fill`.
double consistency_dice(const AnatomyModel& m, const ParamSet& theta, const torch::Tensor& x,
                        const torch::Tensor& mask, float fill) {
  torch::NoGradGuard ng;
  const AnatomyPath path(m.theta, m.g_a.params, NormMode::kRunning);
  const auto clean = path.probs(x, theta);
  const auto filled = path.probs(randomize_tensor(x, mask, {fill}), theta);
  return 1.0 - soft_dice_loss(filled, clean).item();
}

JointModel tiny_joint(uint64_t seed) {
  const ExtractorConfig tiny{2, 4, 4, 1, 1};
  Rng rng(seed);
  JointModel m;
  m.anatomy = init_anatomy_model(tiny, rng);
  m.lesion = init_lesion_model(tiny, rng);
  m.psi = init_fusion({tiny.feature_channels, 4, kJointClassCount}, rng);
  return m;
}

SupportSample tiny_support(int p) {
  torch::manual_seed(40);
  SupportSample s;
  s.id = "support";
  s.x = torch::randn({1, 1, p, p, p});
  const auto idx = torch::randint(0, kAnatomyClassCount, {1, p, p, p}, torch::kLong);
  s.y = torch::one_hot(idx, kAnatomyClassCount).permute({0, 4, 1, 2, 3}).to(torch::kFloat).contiguous();
  return s;
}

void report(int id, const std::string& name, const Outcome& o, int& failures) {
  std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << id << "  " << name << ": " << o.detail << std::endl;
  if (!o.pass) ++failures;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string cli, unit, config, paper_config;
  std::string work = "acceptance_work";
  bool reuse = false;
  app.add_option("--cli", cli)->required();
  app.add_option("--unit-tests", unit)->required();
  app.add_option("--config", config)->required();
  app.add_option("--paper-config", paper_config)->required();
  app.add_option("--work", work);
  app.add_flag("--reuse", reuse, "Skip the pipeline runs when both work directories are complete");
  CLI11_PARSE(app, argc, argv);

  const fs::path root = fs::absolute(work);
  fs::create_directories(root);
  const auto log = root / "unit.log";
  fs::remove(log);
  int failures = 0;

  report(1, "unit/oracle suite", unit_suite(unit, "oracle", 60.0, log), failures);
  report(2, "gradient checks", unit_suite(unit, "gradient", 120.0, log), failures);

  // ---- 3: pipeline smoke -------------------------------------------------
  const Pipeline pipe{cli, config};
  const auto run1 = root / "run1", run2 = root / "run2";
  const bool have = reuse && fs::exists(run1 / "metrics" / "joint.csv") && fs::exists(run2 / "metrics" / "joint.csv");
  std::string failed1, failed2;
  double t1 = 0.0, t2 = 0.0;
  if (!have) {
    failed1 = pipe.execute(run1, t1);
    if (failed1.empty()) failed2 = pipe.execute(run2, t2);
  }
  bool pipeline_ok = failed1.empty();
  {
    Outcome o;
    if (!failed1.empty() || !failed2.empty()) {
      o.detail = "stage '" + (failed1.empty() ? failed2 : failed1) + "' failed (see cli.log)";
    } else {
      const auto a = fingerprint(run1), b = fingerprint(run2);
      size_t diff = 0;
      for (const auto& [k, v] : a) diff += !b.count(k) || b.at(k) != v;
      diff += b.size() > a.size() ? b.size() - a.size() : 0;
      const auto cfg = load_config(config);
      const bool sizes = cfg.anatomy_counts.total() >= 20 && cfg.lesion_counts.total() >= 20 && cfg.patch.size == 32;
      o.pass = diff == 0 && !a.empty() && sizes && (have || t1 < 1800.0);
      o.detail = std::to_string(a.size()) + " artifacts, " + std::to_string(diff) + " differ between runs; " +
                 (have ? std::string("timing from earlier run") : "wall clock " + fmt(t1, 0) + " s (< 1800 s)");
    }
    report(3, "pipeline smoke and determinism", o, failures);
  }

  if (!pipeline_ok) {
    for (int id = 4; id <= 9; ++id) report(id, "requires pipeline artifacts", {false, "pipeline failed"}, failures);
    return failures == 0 ? 0 : 1;
  }

  const auto cfg = load_config(config);
  const auto data = run1 / "data";
  const auto anatomy = load_dataset(data / "anatomy.jsonl");
  const auto lesion = load_dataset(data / "lesion.jsonl");
  const auto sidecar = load_sidecar(data / "eval_sidecar.json");
  const auto ckpts = run1 / "checkpoints";
  const auto pre = load_checkpoint(ckpts / "anatomy_pretrained.ckpt").anatomy(Stage::kPretrained);
  const auto meta = load_checkpoint(ckpts / "anatomy_cotrained.ckpt").anatomy(Stage::kCotrained);
  const auto lesion0 = load_checkpoint(ckpts / "lesion_fold0.ckpt").lesion(Stage::kPretrained);
  const SeedStreams seeds(cfg.seed);
  const auto support = pick_support(anatomy, cfg.adapt, cfg.patch.size);
  const auto cases =
      held_out_pseudo_lesions(select_split(anatomy, Split::kTest), select_split(lesion, Split::kTest), 10);

  report(4, "pretraining quality gates", quality_gates(run1), failures);

  // ---- 5: co-training benefit ---------------------------------------------
  const auto pre_d = lesion_region_dice(pre, cases, support, cfg, seeds);
  const auto meta_d = lesion_region_dice(meta, cases, support, cfg, seeds);
  {
    const double margin = mean(meta_d) - mean(pre_d);
    report(5, "meta co-training benefit",
           {margin >= 0.03, "lesion-region anatomy Dice pretrained " + fmt(mean(pre_d)) + " -> co-trained " +
                                fmt(mean(meta_d)) + ", margin " + fmt(margin) + " >= 0.03 over " +
                                std::to_string(cases.size()) + " phantoms"},
           failures);
  }

  // ---- 6: inner-loop ablation ----------------------------------------------
  {
    const auto st = run_inner_loop_ablation(pre, meta, select_split(anatomy, Split::kTrain),
                                            select_split(lesion, Split::kTrain), cases, support, cfg, seeds);
    st.table().write_csv(root / "inner_loop_ablation.csv");
    report(6, "inner-loop ablation",
           {st.meta_wins() >= 6, "meta wins " + std::to_string(st.meta_wins()) + "/" + std::to_string(st.ids.size()) +
                                     " (>= 6); mean meta " + fmt(mean(st.meta)) + " vs control " +
                                     fmt(mean(st.control))},
           failures);
  }

  // ---- 7: adaptation behaviour ----------------------------------------------
  {
    int decreased = 0, improved = 0;
    const auto fills = ensemble_fills(cfg.fills, static_cast<int>(cfg.fills.fill_values.size()));
    for (size_t i = 0; i < cases.size(); ++i) {
      const auto x = to_tensor(cases[i].x_p);
      const auto m = to_tensor(cases[i].mask);
      const float fill = fills[i % fills.size()];
      const float held_out = fills[(i + fills.size() / 2) % fills.size()];
      const auto r = adapt(meta, x, m, support, fill, cfg.adapt);
      decreased += !r.failed && r.trace.back() < r.trace.front();
      improved += consistency_dice(meta, r.theta, x, m, held_out) > consistency_dice(meta, meta.theta.params, x, m, held_out);
    }
    const auto n = static_cast<int>(cases.size());
    report(7, "adaptation behaviour",
           {decreased * 10 >= 8 * n && improved * 2 > n,
            "L_i decreased for " + std::to_string(decreased) + "/" + std::to_string(n) +
                " (>= 80%); held-out-fill consistency improved for " + std::to_string(improved) + "/" +
                std::to_string(n) + " (majority)"},
           failures);
  }

  // ---- 8: degradation --------------------------------------------------------
  {
    const auto st = run_degradation_study(meta, lesion0, select_split(lesion, Split::kTest), sidecar,
                                          {1.0, 0.5, 0.25}, support, cfg, seeds);
    st.table().write_csv(root / "degradation.csv");
    const auto& d = st.mean_anatomy;
    report(8, "degradation study",
           {d[0] + 0.01 >= d[1] && d[1] + 0.01 >= d[2],
            "anatomy Dice full " + fmt(d[0]) + ", half " + fmt(d[1]) + ", quarter " + fmt(d[2]) +
                " (non-increasing within 0.01) over " + std::to_string(st.per_subject.front().size()) + " phantoms"},
           failures);
  }

  // ---- 9: freeze and ensemble contracts ----------------------------------
  {
    std::ostringstream os;
    bool ok = true;
    int folds = 0;
    for (; fs::exists(ckpts / ("joint_fold" + std::to_string(folds) + ".ckpt")); ++folds) {
      const auto k = std::to_string(folds);
      const auto l = load_checkpoint(ckpts / ("lesion_fold" + k + ".ckpt")).hash_of("phi");
      const auto j = load_checkpoint(ckpts / ("joint_fold" + k + ".ckpt")).hash_of("phi");
      ok = ok && l == j;
    }
    ok = ok && folds > 0;
    os << "phi hash unchanged in " << folds << " joint folds";

    const auto joint0 = load_checkpoint(ckpts / "joint_fold0.ckpt").joint();
    const auto subject = select_split(lesion, Split::kTest).front();
    const float fill = cfg.fills.fill_values.front();
    const auto single = infer_single(joint0, subject.t1, subject.flair, fill, support, cfg.patch, cfg.adapt);
    const auto one = infer_ensemble({joint0}, {fill}, subject.t1, subject.flair, support, cfg.patch, cfg.adapt);
    const bool same = one.joint.data == single.joint.data && one.anatomy.data == single.anatomy.data &&
                      one.lesion.data == single.lesion.data;
    ok = ok && same;
    os << "; 1x1 ensemble " << (same ? "equals" : "differs from") << " single inference";

    const auto paper = load_config(paper_config);
    std::vector<JointModel> models;
    for (int k = 0; k < paper.ensemble.folds; ++k) models.push_back(tiny_joint(100 + static_cast<uint64_t>(k)));
    const auto paper_fills = ensemble_fills(paper.fills, paper.ensemble.fills);
    std::mt19937_64 rng(5);
    auto t1 = Volume::zeros(cube(8)), flair = Volume::zeros(cube(8));
    std::normal_distribution<float> nd;
    for (auto& v : t1.data) v = nd(rng);
    for (auto& v : flair.data) v = nd(rng);
    AdaptConfig quick = paper.adapt;
    quick.steps = 1;
    const auto ens = infer_ensemble(models, paper_fills, t1, flair, tiny_support(8), {8, 4}, quick);
    std::set<std::pair<int, float>> members;
    for (const auto& m : ens.members) members.emplace(m.fold, m.fill);
    const bool accounting = paper.ensemble.members() == 30 && ens.members.size() == 30 && members.size() == 30 &&
                            std::set<float>(paper_fills.begin(), paper_fills.end()).size() == 6;
    ok = ok && accounting;
    os << "; paper scale " << paper.ensemble.folds << "x" << paper_fills.size() << " -> " << ens.members.size()
       << " distinct members " << (accounting ? "(= 30)" : "(!= 30)");
    report(9, "freeze and ensemble contracts", {ok, os.str()}, failures);
  }

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}

#include "jointseg/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <numeric>
#include <set>
#include <sstream>

#include "jointseg/error.hpp"
#include "jointseg/metrics.hpp"

namespace jointseg {
namespace {

constexpr const char* kMetricHeader = "subject_id,class_name,dice,hd95,stage";
constexpr const char* kTraceHeader = "subject_id,member,step,inner_loss";

std::string fmt(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
  return buf;
}

LesionMask class_mask(const LabelMap& m, int32_t id) {
  LesionMask out = LesionMask::zeros(m.shape);
  for (size_t i = 0; i < m.data.size(); ++i) out.data[i] = m.data[i] == id ? 1 : 0;
  return out;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

std::string first_line(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

float eval_fill(const PipelineConfig& cfg, const SeedStreams& seeds, size_t i) {
  Rng rng = seeds.stream("fills.eval", i);
  const auto& v = cfg.fills.fill_values;
  return v[static_cast<size_t>(uniform_int(rng, 0, static_cast<int64_t>(v.size()) - 1))];
}

// Mean anatomy Dice over the non-background anatomy classes present in gt.
double mean_anatomy_dice(const std::map<std::string, double>& per_class) {
  double sum = 0.0;
  int n = 0;
  for (const auto& [name, d] : per_class) {
    sum += d;
    ++n;
  }
  return n ? sum / n : std::nan("");
}

std::map<std::string, double> anatomy_class_dice(const LabelMap& pred, const LabelMap& gt) {
  std::map<std::string, double> out;
  for (int32_t id : kAnatomyClassIds) {
    if (id == kBackground) continue;
    bool present = false;
    for (int32_t v : gt.data) {
      if (v == id) {
        present = true;
        break;
      }
    }
    if (present) out[std::string(class_name(id))] = dice_score(pred, gt, id);
  }
  return out;
}

LabelMap paste_lesion(LabelMap labels, const LesionMask& lesion) {
  for (size_t i = 0; i < labels.data.size(); ++i) {
    if (lesion.data[i]) labels.data[i] = kLesion;
  }
  labels.class_count = std::max(labels.class_count, kJointClassCount);
  return labels;
}

std::string svg_traces(const std::map<std::string, std::vector<double>>& traces) {
  const double w = 640, h = 400, pad = 50;
  double ymin = 1e300, ymax = -1e300;
  size_t xmax = 1;
  for (const auto& [k, t] : traces) {
    for (double v : t) {
      ymin = std::min(ymin, v);
      ymax = std::max(ymax, v);
    }
    xmax = std::max(xmax, t.size() > 1 ? t.size() - 1 : size_t{1});
  }
  if (!(ymax > ymin)) {
    ymin -= 0.5;
    ymax += 0.5;
  }
  auto px = [&](size_t i) { return pad + (w - 2 * pad) * static_cast<double>(i) / static_cast<double>(xmax); };
  auto py = [&](double v) { return h - pad - (h - 2 * pad) * (v - ymin) / (ymax - ymin); };
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<line x1=\"" << pad << "\" y1=\"" << h - pad << "\" x2=\"" << w - pad << "\" y2=\"" << h - pad
    << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << pad << "\" y1=\"" << pad << "\" x2=\"" << pad << "\" y2=\"" << h - pad
    << "\" stroke=\"black\"/>\n";
  s << "<text x=\"" << w / 2 << "\" y=\"" << h - 10 << "\" text-anchor=\"middle\">adaptation step</text>\n";
  s << "<text x=\"12\" y=\"" << h / 2 << "\" transform=\"rotate(-90 12 " << h / 2
    << ")\" text-anchor=\"middle\">inner loss</text>\n";
  s << "<text x=\"" << pad - 4 << "\" y=\"" << py(ymax) << "\" text-anchor=\"end\">" << fmt(ymax, 3) << "</text>\n";
  s << "<text x=\"" << pad - 4 << "\" y=\"" << py(ymin) << "\" text-anchor=\"end\">" << fmt(ymin, 3) << "</text>\n";
  for (const auto& [k, t] : traces) {
    s << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-opacity=\"0.6\" points=\"";
    for (size_t i = 0; i < t.size(); ++i) s << px(i) << "," << py(t[i]) << " ";
    s << "\"><title>" << k << "</title></polyline>\n";
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace

std::vector<MetricRow> score_subject(const std::string& id, const LabelMap& pred, const LabelMap& gt,
                                     const Vec3& spacing, const std::string& stage) {
  require_same_shape(pred.shape, gt.shape, "score_subject");
  std::set<int32_t> classes(gt.data.begin(), gt.data.end());
  classes.insert(pred.data.begin(), pred.data.end());
  std::vector<MetricRow> rows;
  for (int32_t c : classes) {
    MetricRow r;
    r.subject_id = id;
    r.class_name = std::string(class_name(c));
    r.dice = dice_score(pred, gt, c);
    r.hd95 = hd95(class_mask(pred, c), class_mask(gt, c), spacing);
    r.stage = stage;
    rows.push_back(std::move(r));
  }
  return rows;
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricRow>& rows) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << kMetricHeader << "\n";
  out.precision(12);
  for (const auto& r : rows) {
    out << r.subject_id << ',' << r.class_name << ',' << r.dice << ',';
    if (r.hd95) out << *r.hd95;
    out << ',' << r.stage << '\n';
  }
}

std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kMetricHeader) throw FormatError("unexpected metrics header in " + path.string());
  std::vector<MetricRow> rows;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto c = split_csv(line);
    if (c.size() != 5) throw FormatError("malformed metrics row in " + path.string());
    MetricRow r;
    r.subject_id = c[0];
    r.class_name = c[1];
    r.dice = std::stod(c[2]);
    if (!c[3].empty()) r.hd95 = std::stod(c[3]);
    r.stage = c[4];
    rows.push_back(std::move(r));
  }
  return rows;
}

LabelMap joint_ground_truth(const LabelMap& full_gt, const LesionMask& lesion) {
  require_same_shape(full_gt.shape, lesion.shape, "joint_ground_truth");
  return paste_lesion(full_gt, lesion);
}

std::vector<HeldOutCase> held_out_pseudo_lesions(const std::vector<Subject>& anatomy,
                                                 const std::vector<Subject>& lesion, int count) {
  if (anatomy.empty() || lesion.empty()) throw InputError("held-out cases need anatomy and lesion subjects");
  std::vector<HeldOutCase> cases;
  for (int i = 0; i < count; ++i) {
    const Subject& a = anatomy[static_cast<size_t>(i) % anatomy.size()];
    const Subject& l = lesion[static_cast<size_t>(i) % lesion.size()];
    if (!a.anatomy || !l.lesion) throw InputError("held-out case sources lack labels");
    const PseudoLesionSample ps = compose_pseudo_lesion(a.t1, *a.anatomy, l.t1, *l.lesion);
    cases.push_back({a.id + "+" + l.id, ps.x_p, ps.y_l, ps.hidden_y_a});
  }
  return cases;
}

std::vector<double> lesion_region_dice(const AnatomyModel& model, const std::vector<HeldOutCase>& cases,
                                       const SupportSample& support, const PipelineConfig& cfg,
                                       const SeedStreams& seeds, bool adapt_enabled) {
  std::vector<double> out;
  for (size_t i = 0; i < cases.size(); ++i) {
    const auto& c = cases[i];
    const AnatomyInference inf =
        infer_anatomy(model, c.x_p, &c.mask, &support, eval_fill(cfg, seeds, i), cfg.patch, cfg.adapt, adapt_enabled);
    out.push_back(region_mean_dice(anatomy_labels(inf.probs), c.hidden_y_a, c.mask).value_or(0.0));
  }
  return out;
}

DegradationResult degrade_lesion_mask(const LesionMask& mask, const DegradationSpec& spec) {
  if (spec.block < 1) throw ConfigError("degradation block edge must be positive");
  if (!(spec.retain >= 0.0 && spec.retain <= 1.0)) throw ConfigError("retained fraction must lie in [0, 1]");
  DegradationResult r;
  r.mask = mask;
  const int64_t total = mask.count();
  if (total == 0) throw InputError("degrade_lesion_mask: empty mask");
  if (spec.retain >= 1.0) return r;

  const Shape3& s = mask.shape;
  const int64_t b = spec.block;
  const int64_t bx = (s.nx + b - 1) / b, by = (s.ny + b - 1) / b, bz = (s.nz + b - 1) / b;
  std::vector<int64_t> per_block(static_cast<size_t>(bx * by * bz), 0);
  auto block_of = [&](int64_t x, int64_t y, int64_t z) { return ((z / b) * by + (y / b)) * bx + (x / b); };
  for (int64_t z = 0; z < s.nz; ++z) {
    for (int64_t y = 0; y < s.ny; ++y) {
      for (int64_t x = 0; x < s.nx; ++x) {
        if (mask.data[static_cast<size_t>(s.index(x, y, z))]) ++per_block[static_cast<size_t>(block_of(x, y, z))];
      }
    }
  }
  std::vector<int64_t> candidates;
  for (size_t k = 0; k < per_block.size(); ++k) {
    if (per_block[k] > 0) candidates.push_back(static_cast<int64_t>(k));
  }
  Rng rng(splitmix64(spec.seed));
  std::shuffle(candidates.begin(), candidates.end(), rng);

  const double target = spec.retain * static_cast<double>(total);
  std::vector<char> removed(per_block.size(), 0);
  double retained = static_cast<double>(total);
  for (int64_t k : candidates) {
    if (retained <= target) break;
    const double after = retained - static_cast<double>(per_block[static_cast<size_t>(k)]);
    // Crossing step: keep whichever side lands nearer the target.
    if (after < target && (target - after) > (retained - target)) break;
    removed[static_cast<size_t>(k)] = 1;
    retained = after;
  }
  for (int64_t z = 0; z < s.nz; ++z) {
    for (int64_t y = 0; y < s.ny; ++y) {
      for (int64_t x = 0; x < s.nx; ++x) {
        if (removed[static_cast<size_t>(block_of(x, y, z))]) r.mask.data[static_cast<size_t>(s.index(x, y, z))] = 0;
      }
    }
  }
  r.achieved = static_cast<double>(r.mask.count()) / static_cast<double>(total);
  r.within_tolerance = std::abs(r.achieved - spec.retain) <= 0.05;
  return r;
}

void StudyTable::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  for (size_t i = 0; i < columns.size(); ++i) out << (i ? "," : "") << columns[i];
  out << "\n";
  for (const auto& row : rows) {
    for (size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << row[i];
    out << "\n";
  }
}

namespace {

std::string fraction_label(double f) {
  if (f == 1.0) return "Full";
  if (f == 0.5) return "Half";
  if (f == 0.25) return "Quarter";
  return fmt(f, 3);
}

std::vector<std::string> anatomy_columns() {
  std::vector<std::string> cols;
  for (int32_t id : kAnatomyClassIds) {
    if (id != kBackground) cols.emplace_back(class_name(id));
  }
  return cols;
}

}  // namespace

StudyTable DegradationStudy::table() const {
  StudyTable t;
  t.columns = {"mask"};
  const auto cols = anatomy_columns();
  t.columns.insert(t.columns.end(), cols.begin(), cols.end());
  t.columns.push_back("mean");
  for (size_t f = 0; f < fractions.size(); ++f) {
    std::vector<std::string> row{fraction_label(fractions[f])};
    for (const auto& c : cols) {
      const auto it = per_class[f].find(c);
      row.push_back(it == per_class[f].end() ? "" : fmt(it->second));
    }
    row.push_back(fmt(mean_anatomy[f]));
    t.rows.push_back(std::move(row));
  }
  return t;
}

DegradationStudy run_degradation_study(const AnatomyModel& cotrained, const LesionModel& lesion_model,
                                       const std::vector<Subject>& subjects, const EvaluationSidecar& sidecar,
                                       const std::vector<double>& fractions, const SupportSample& support,
                                       const PipelineConfig& cfg, const SeedStreams& seeds) {
  DegradationStudy st;
  st.fractions = fractions;
  st.per_class.resize(fractions.size());
  st.mean_anatomy.assign(fractions.size(), 0.0);
  st.per_subject.resize(fractions.size());
  std::vector<std::map<std::string, std::pair<double, int>>> sums(fractions.size());

  for (size_t i = 0; i < subjects.size(); ++i) {
    const Subject& s = subjects[i];
    if (!s.flair || !s.lesion) throw InputError("degradation study: subject '" + s.id + "' lacks FLAIR or mask");
    const auto gt_it = sidecar.find(s.id);
    if (gt_it == sidecar.end()) throw InputError("degradation study: no hidden ground truth for '" + s.id + "'");
    const LabelMap gt = joint_ground_truth(gt_it->second, *s.lesion);
    const LesionMask predicted = infer_lesion_mask(lesion_model, *s.flair, cfg.patch);
    const float fill = eval_fill(cfg, seeds, i);
    for (size_t f = 0; f < fractions.size(); ++f) {
      LesionMask used = predicted;
      if (predicted.count() > 0) {
        const auto d = degrade_lesion_mask(predicted, {fractions[f], 10, seeds.derive("degradation", i)});
        if (!d.within_tolerance) {
          std::cerr << "warning: " << s.id << " retained " << fmt(d.achieved, 3) << " of the mask (target "
                    << fmt(fractions[f], 2) << ")\n";
        }
        used = d.mask;
      }
      const AnatomyInference inf = infer_anatomy(cotrained, s.t1, &used, &support, fill, cfg.patch, cfg.adapt);
      const LabelMap pred = paste_lesion(anatomy_labels(inf.probs), predicted);
      const auto dice = anatomy_class_dice(pred, gt);
      for (const auto& [c, d] : dice) {
        sums[f][c].first += d;
        sums[f][c].second += 1;
      }
      st.per_subject[f].push_back(mean_anatomy_dice(dice));
    }
  }
  for (size_t f = 0; f < fractions.size(); ++f) {
    for (const auto& [c, sn] : sums[f]) st.per_class[f][c] = sn.first / sn.second;
    st.mean_anatomy[f] = mean_anatomy_dice(st.per_class[f]);
  }
  return st;
}

StudyTable MaskSourceStudy::table() const {
  StudyTable t;
  t.columns = {"training_masks"};
  std::vector<std::string> cols;
  for (int32_t id = 0; id < kJointClassCount; ++id) {
    if (id != kBackground) cols.emplace_back(class_name(id));
  }
  t.columns.insert(t.columns.end(), cols.begin(), cols.end());
  for (const char* src : {"gt", "predicted"}) {
    const auto it = per_class.find(src);
    if (it == per_class.end()) continue;
    std::vector<std::string> row{src == std::string("gt") ? "ground_truth" : "predicted"};
    for (const auto& c : cols) {
      const auto jt = it->second.find(c);
      row.push_back(jt == it->second.end() ? "" : fmt(jt->second));
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

MaskSourceStudy run_mask_source_study(const AnatomyModel& cotrained, const LesionModel& lesion_model,
                                      const std::vector<Subject>& anatomy, const std::vector<Subject>& lesion_train,
                                      const std::vector<Subject>& lesion_test, const EvaluationSidecar& sidecar,
                                      const PipelineConfig& cfg, const SeedStreams& seeds) {
  const SupportSample support = pick_support(anatomy, cfg.adapt, cfg.patch.size);
  const auto labels = generate_pseudolabels(cotrained, lesion_train, support, cfg, seeds);
  std::vector<LesionMask> predicted;
  for (const auto& s : lesion_train) predicted.push_back(infer_lesion_mask(lesion_model, *s.flair, cfg.patch));

  MaskSourceStudy st;
  for (MaskSource source : {MaskSource::kGroundTruth, MaskSource::kPredicted}) {
    std::vector<JointSample> data;
    for (size_t i = 0; i < lesion_train.size(); ++i) {
      if (labels[i].flagged) continue;
      data.push_back({&lesion_train[i], &labels[i].target,
                      source == MaskSource::kGroundTruth ? *lesion_train[i].lesion : predicted[i]});
    }
    PipelineConfig run = cfg;
    run.joint.mask_source = source;
    TrainContext ctx;
    ctx.seeds = seeds;
    const JointModel model = joint_train(cotrained, lesion_model, data, anatomy, run, ctx);

    std::map<std::string, std::pair<double, int>> sums;
    for (size_t i = 0; i < lesion_test.size(); ++i) {
      const Subject& s = lesion_test[i];
      const auto gt_it = sidecar.find(s.id);
      if (gt_it == sidecar.end()) throw InputError("mask-source study: no hidden ground truth for '" + s.id + "'");
      const LabelMap gt = joint_ground_truth(gt_it->second, *s.lesion);
      const SingleInference inf = infer_single(model, s.t1, s.flair, eval_fill(cfg, seeds, i), support, cfg.patch,
                                               cfg.adapt);
      for (int32_t id = 1; id < kJointClassCount; ++id) {
        const std::string name(class_name(id));
        sums[name].first += dice_score(inf.joint, gt, id);
        sums[name].second += 1;
      }
    }
    for (const auto& [c, sn] : sums) st.per_class[to_string(source)][c] = sn.first / sn.second;
  }
  return st;
}

int AblationStudy::meta_wins() const {
  int wins = 0;
  for (size_t i = 0; i < meta.size(); ++i) wins += meta[i] > control[i] ? 1 : 0;
  return wins;
}

StudyTable AblationStudy::table() const {
  StudyTable t;
  t.columns = {"case", "meta", "control", "delta"};
  for (size_t i = 0; i < ids.size(); ++i) t.rows.push_back({ids[i], fmt(meta[i]), fmt(control[i]), fmt(meta[i] - control[i])});
  const double mm = std::accumulate(meta.begin(), meta.end(), 0.0) / std::max<size_t>(1, meta.size());
  const double mc = std::accumulate(control.begin(), control.end(), 0.0) / std::max<size_t>(1, control.size());
  t.rows.push_back({"mean", fmt(mm), fmt(mc), fmt(mm - mc)});
  return t;
}

AblationStudy run_inner_loop_ablation(const AnatomyModel& pretrained, const AnatomyModel& meta_model,
                                      const std::vector<Subject>& anatomy_train,
                                      const std::vector<Subject>& lesion_train,
                                      const std::vector<HeldOutCase>& cases, const SupportSample& support,
                                      const PipelineConfig& cfg, const SeedStreams& seeds) {
  PipelineConfig control_cfg = cfg;
  control_cfg.meta.inner_loop = false;
  TrainContext ctx;
  ctx.seeds = seeds;
  const AnatomyModel control = meta_cotrain(pretrained, anatomy_train, lesion_train, control_cfg, ctx);
  AblationStudy st;
  for (const auto& c : cases) st.ids.push_back(c.id);
  st.meta = lesion_region_dice(meta_model, cases, support, cfg, seeds);
  st.control = lesion_region_dice(control, cases, support, cfg, seeds);
  return st;
}

std::map<std::string, std::map<std::string, Aggregate>> aggregate_dice(const std::vector<MetricRow>& rows) {
  std::map<std::string, std::map<std::string, std::vector<double>>> groups;
  for (const auto& r : rows) groups[r.stage][r.class_name].push_back(r.dice);
  std::map<std::string, std::map<std::string, Aggregate>> out;
  for (const auto& [stage, classes] : groups) {
    for (const auto& [c, v] : classes) {
      Aggregate a;
      a.n = v.size();
      a.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(a.n);
      if (a.n > 1) {
        double ss = 0.0;
        for (double x : v) ss += (x - a.mean) * (x - a.mean);
        a.std = std::sqrt(ss / static_cast<double>(a.n - 1));
      }
      out[stage][c] = a;
    }
  }
  return out;
}

ReportOutputs write_report(const std::filesystem::path& metrics_dir, const std::filesystem::path& out_dir,
                           const std::string& tag) {
  std::vector<MetricRow> rows;
  std::map<std::string, std::vector<double>> traces;
  std::vector<std::filesystem::path> files;
  if (std::filesystem::is_directory(metrics_dir)) {
    for (const auto& e : std::filesystem::recursive_directory_iterator(metrics_dir)) {
      if (e.is_regular_file() && e.path().extension() == ".csv") files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    const std::string head = first_line(f);
    if (head == kMetricHeader) {
      const auto r = read_metrics_csv(f);
      rows.insert(rows.end(), r.begin(), r.end());
    } else if (head == kTraceHeader) {
      std::ifstream in(f);
      std::string line;
      std::getline(in, line);
      while (std::getline(in, line)) {
        const auto c = split_csv(line);
        if (c.size() != 4) continue;
        traces[f.stem().string() + "/" + c[0] + "/" + c[1]].push_back(std::stod(c[3]));
      }
    }
  }

  std::filesystem::create_directories(out_dir);
  ReportOutputs out;
  const auto md_path = out_dir / ("report-" + tag + ".md");
  std::ofstream md(md_path);
  if (!md) throw Error("cannot write " + md_path.string());
  out.files.push_back(md_path);
  if (rows.empty() && traces.empty()) {
    md << "# Report\n\nno data: no metric or trace files under " << metrics_dir.string() << "\n";
    out.no_data = true;
    return out;
  }

  md << "# Report\n\n";
  const auto agg = aggregate_dice(rows);
  const auto csv_path = out_dir / ("summary-" + tag + ".csv");
  std::ofstream csv(csv_path);
  csv << "stage,class_name,mean_dice,std_dice,n\n";
  csv.precision(12);
  for (const auto& [stage, classes] : agg) {
    md << "## " << stage << "\n\n| class | Dice (mean ± std) | n |\n|---|---|---|\n";
    for (const auto& [c, a] : classes) {
      md << "| " << c << " | " << fmt(a.mean) << " ± " << fmt(a.std) << " | " << a.n << " |\n";
      csv << stage << ',' << c << ',' << a.mean << ',' << a.std << ',' << a.n << '\n';
    }
    md << "\n";
  }
  out.files.push_back(csv_path);
  if (!traces.empty()) {
    const auto svg_path = out_dir / ("traces-" + tag + ".svg");
    std::ofstream svg(svg_path);
    svg << svg_traces(traces);
    out.files.push_back(svg_path);
    md << "Adaptation traces: `" << svg_path.filename().string() << "`\n\n";
  }
  md << "Note: degradation-study anatomy scores paste the predicted lesion over the anatomy output, so errors "
        "under predicted lesion voxels are not counted.\n";
  return out;
}

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

uint64_t file_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot hash " + path.string());
  uint64_t h = fnv1a({});
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    const auto n = static_cast<size_t>(in.gcount());
    if (n) h = fnv1a(std::string_view(buf.data(), n), h);
  }
  return h;
}

std::filesystem::path write_run_manifest(const std::filesystem::path& dir, const RunManifest& m) {
  std::filesystem::create_directories(dir);
  nlohmann::json j{{"stage", m.stage},
                   {"config_hash", hex64(m.config_hash)},
                   {"dataset_hash", hex64(m.dataset_hash)},
                   {"seed", m.seed},
                   {"outputs", m.outputs},
                   {"wall_clock_s", m.wall_clock_s}};
  j["lineage"] = nlohmann::json::array();
  for (const auto& [p, h] : m.lineage) j["lineage"].push_back({{"path", p}, {"hash", h}});
  const std::string stem = m.stage + "-" + hex64(m.config_hash) + "-" + hex64(m.dataset_hash);
  std::filesystem::path path = dir / (stem + ".json");
  for (int n = 1; std::filesystem::exists(path); ++n) path = dir / (stem + "-" + std::to_string(n) + ".json");
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << "\n";
  return path;
}

}  // namespace jointseg

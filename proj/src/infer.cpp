#include "jointseg/infer.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

#include "jointseg/error.hpp"
#include "jointseg/losses.hpp"
#include "jointseg/metrics.hpp"
#include "jointseg/nifti.hpp"
#include "jointseg/tensor_bridge.hpp"

namespace jointseg {
namespace {

Offset3 centre_offset(const Shape3& s, int p) {
  auto c = [p](int64_t extent) { return std::max<int64_t>(0, (extent - p) / 2); };
  return {c(s.nx), c(s.ny), c(s.nz)};
}

std::string fill_tag(float fill) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", static_cast<double>(fill));
  std::string s = buf;
  for (auto& ch : s) {
    if (ch == '-') ch = 'm';
    if (ch == '.') ch = 'p';
  }
  return s;
}

LesionMask lesion_from_probs(const ProbabilityMap& probs) {
  const LabelMap lab = argmax(probs);
  LesionMask m = LesionMask::zeros(lab.shape);
  for (size_t i = 0; i < lab.data.size(); ++i) m.data[i] = lab.data[i] == 1 ? 1 : 0;
  return m;
}

LabelMap mask_as_labels(const LesionMask& m) {
  LabelMap l = LabelMap::filled(m.shape, 2, 0);
  for (size_t i = 0; i < m.data.size(); ++i) l.data[i] = m.data[i];
  return l;
}

}  // namespace

SupportSample make_support(const Subject& s, int patch_size) {
  if (!s.anatomy) throw InputError("support subject '" + s.id + "' has no anatomy labels");
  const Offset3 off = centre_offset(s.t1.shape, patch_size);
  SupportSample sup;
  sup.id = s.id;
  sup.x = to_tensor(crop(s.t1, off, patch_size));
  sup.y = anatomy_one_hot(crop(*s.anatomy, off, patch_size));
  return sup;
}

SupportSample pick_support(const std::vector<Subject>& anatomy, const AdaptConfig& cfg, int patch_size) {
  for (const auto& s : anatomy) {
    if (!s.anatomy) continue;
    if (cfg.support_id.empty() ? s.split == Split::kTrain : s.id == cfg.support_id) return make_support(s, patch_size);
  }
  throw ConfigError(cfg.support_id.empty() ? "no anatomy training subject available as support"
                                           : "support subject '" + cfg.support_id + "' not found");
}

AdaptResult adapt(const AnatomyModel& model, const torch::Tensor& x_t1, const torch::Tensor& mask,
                  const SupportSample& support, float fill, const AdaptConfig& cfg) {
  if (cfg.steps < 1) throw ConfigError("adaptation needs at least one step");
  AdaptResult r;
  ParamSet theta = model.theta.params.leaves();
  const AnatomyPath path(model.theta, model.g_a.params, NormMode::kRunning);
  torch::optim::Adam opt(theta.tensors(), torch::optim::AdamOptions(cfg.lr));
  const InnerLossInputs in{support.x, support.y, x_t1, mask, {fill}};

  double best = std::numeric_limits<double>::infinity();
  int stale = 0;
  for (int k = 0;; ++k) {
    opt.zero_grad();
    const InnerLossTerms terms = inner_loss(path, theta, in);
    const double value = terms.item();
    if (!std::isfinite(value)) {
      r.failed = true;
      r.theta = model.theta.params.clone();
      return r;
    }
    r.trace.push_back(value);
    r.consistency.push_back(terms.consistency.item());
    if (k == cfg.steps) break;
    if (value < best) {
      best = value;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      break;
    }
    terms.total.backward();
    opt.step();
  }
  r.theta = theta.clone();
  return r;
}

AnatomyInference infer_anatomy(const AnatomyModel& model, const Volume& t1, const LesionMask* mask,
                               const SupportSample* support, float fill, const PatchSpec& patch,
                               const AdaptConfig& cfg, bool adapt_enabled) {
  if (mask) require_same_shape(mask->shape, t1.shape, "infer_anatomy mask");
  const PatchGrid grid = plan_patches(t1.shape, patch);
  AnatomyInference out;
  std::vector<ProbabilityMap> parts;
  parts.reserve(grid.offsets.size());
  for (const auto& off : grid.offsets) {
    const auto x = to_tensor(crop(t1, off, patch.size));
    const ParamSet* theta = &model.theta.params;
    AdaptResult adapted;
    if (adapt_enabled && mask && support) {
      const LesionMask m = crop(*mask, off, patch.size);
      if (m.count() > 0) {
        adapted = adapt(model, x, to_tensor(m), *support, fill, cfg);
        out.traces.push_back(adapted.trace);
        out.consistency.push_back(adapted.consistency);
        if (adapted.failed) ++out.failed_patches;
        theta = &adapted.theta;
      }
    }
    torch::NoGradGuard no_grad;
    const auto w = forward_t1(model.theta, x, *theta, NormMode::kRunning);
    parts.push_back(to_probability_map(predict_anatomy(w, model.g_a.params)));
  }
  out.probs = reassemble(parts, grid.offsets, patch, t1.shape);
  return out;
}

ProbabilityMap infer_lesion_probs(const LesionModel& model, const Volume& flair, const PatchSpec& patch) {
  const PatchGrid grid = plan_patches(flair.shape, patch);
  std::vector<ProbabilityMap> parts;
  torch::NoGradGuard no_grad;
  for (const auto& off : grid.offsets) {
    const auto w = forward_flair(model.phi, to_tensor(crop(flair, off, patch.size)), model.phi.params,
                                 NormMode::kRunning);
    parts.push_back(to_probability_map(predict_lesion(w, model.g_l.params)));
  }
  return reassemble(parts, grid.offsets, patch, flair.shape);
}

LesionMask infer_lesion_mask(const LesionModel& model, const Volume& flair, const PatchSpec& patch) {
  return lesion_from_probs(infer_lesion_probs(model, flair, patch));
}

LabelMap anatomy_labels(const ProbabilityMap& anatomy_probs) {
  if (anatomy_probs.channels != kAnatomyClassCount) throw ShapeError("expected anatomy-head probabilities");
  return anatomy_channels_to_ids(argmax(anatomy_probs));
}

SingleInference infer_single(const JointModel& model, const Volume& t1, const std::optional<Volume>& flair,
                             float fill, const SupportSample& support, const PatchSpec& patch,
                             const AdaptConfig& cfg, const LesionMask* mask_override) {
  if (!flair) throw InputError("joint inference needs a FLAIR image");
  require_same_shape(flair->shape, t1.shape, "FLAIR");
  if (mask_override) require_same_shape(mask_override->shape, t1.shape, "lesion mask override");

  SingleInference out;
  out.lesion = infer_lesion_mask(model.lesion, *flair, patch);
  const LesionMask& mask = mask_override ? *mask_override : out.lesion;

  const PatchGrid grid = plan_patches(t1.shape, patch);
  std::vector<ProbabilityMap> anatomy_parts;
  std::vector<ProbabilityMap> joint_parts;
  for (const auto& off : grid.offsets) {
    const auto x = to_tensor(crop(t1, off, patch.size));
    const auto xf = to_tensor(crop(*flair, off, patch.size));
    const LesionMask m = crop(mask, off, patch.size);
    const ParamSet* theta = &model.anatomy.theta.params;
    AdaptResult adapted;
    if (m.count() > 0) {
      adapted = adapt(model.anatomy, x, to_tensor(m), support, fill, cfg);
      out.traces.push_back(adapted.trace);
      if (adapted.failed) ++out.failed_patches;
      theta = &adapted.theta;
    }
    torch::NoGradGuard no_grad;
    const auto w_t1 = forward_t1(model.anatomy.theta, x, *theta, NormMode::kRunning);
    const auto w_f = forward_flair(model.lesion.phi, xf, model.lesion.phi.params, NormMode::kRunning);
    anatomy_parts.push_back(to_probability_map(predict_anatomy(w_t1, model.anatomy.g_a.params)));
    joint_parts.push_back(to_probability_map(fuse(model.psi, w_t1, w_f, model.psi.params, NormMode::kRunning).probs));
  }
  out.anatomy = anatomy_labels(reassemble(anatomy_parts, grid.offsets, patch, t1.shape));
  out.joint_probs = reassemble(joint_parts, grid.offsets, patch, t1.shape);
  out.joint = argmax(out.joint_probs);
  return out;
}

std::vector<float> ensemble_fills(const RandomFillSpec& spec, int count) {
  spec.validate();
  if (count < 1 || count > static_cast<int>(spec.fill_values.size())) {
    throw ConfigError("ensemble fill count out of range");
  }
  return {spec.fill_values.begin(), spec.fill_values.begin() + count};
}

EnsembleResult infer_ensemble(const std::vector<JointModel>& folds, const std::vector<float>& fills,
                              const Volume& t1, const std::optional<Volume>& flair, const SupportSample& support,
                              const PatchSpec& patch, const AdaptConfig& cfg,
                              const std::optional<std::filesystem::path>& persist_dir) {
  if (folds.empty() || fills.empty()) throw ConfigError("ensemble needs at least one fold and one fill");
  if (persist_dir) std::filesystem::create_directories(*persist_dir);

  EnsembleResult out;
  std::vector<LabelMap> joint, anatomy, lesion;
  for (size_t f = 0; f < folds.size(); ++f) {
    for (float fill : fills) {
      EnsembleMember m;
      m.fold = static_cast<int>(f);
      m.fill = fill;
      try {
        m.result = infer_single(folds[f], t1, flair, fill, support, patch, cfg);
        m.ok = m.result.failed_patches == 0;
        if (!m.ok) m.error = "adaptation diverged";
      } catch (const Error& e) {
        m.error = e.what();
      }
      if (m.ok) {
        joint.push_back(m.result.joint);
        anatomy.push_back(m.result.anatomy);
        lesion.push_back(mask_as_labels(m.result.lesion));
        if (persist_dir) {
          const std::string stem = "fold" + std::to_string(f) + "_fill" + fill_tag(fill);
          save_labels(*persist_dir / (stem + "_joint.nii.gz"), m.result.joint, t1.spacing);
          save_labels(*persist_dir / (stem + "_anatomy.nii.gz"), m.result.anatomy, t1.spacing);
          save_mask(*persist_dir / (stem + "_lesion.nii.gz"), m.result.lesion, t1.spacing);
        }
      }
      out.members.push_back(std::move(m));
    }
  }
  out.survivors = static_cast<int>(joint.size());
  if (2 * out.survivors < static_cast<int>(out.members.size())) {
    throw Error("ensemble: only " + std::to_string(out.survivors) + " of " + std::to_string(out.members.size()) +
                " members succeeded");
  }
  out.joint = majority_vote(joint);
  out.anatomy = majority_vote(anatomy);
  const LabelMap lv = majority_vote(lesion);
  out.lesion = LesionMask::zeros(lv.shape);
  for (size_t i = 0; i < lv.data.size(); ++i) out.lesion.data[i] = lv.data[i] == 1 ? 1 : 0;
  return out;
}

}  // namespace jointseg

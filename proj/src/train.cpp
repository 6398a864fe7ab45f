#include "jointseg/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>

#include "jointseg/error.hpp"
#include "jointseg/tensor_bridge.hpp"

namespace jointseg {
namespace {

Offset3 random_offset(const Shape3& s, int p, Rng& rng) {
  auto pick = [&](int64_t extent) { return extent <= p ? int64_t{0} : uniform_int(rng, 0, extent - p); };
  const int64_t x = pick(s.nx);
  const int64_t y = pick(s.ny);
  const int64_t z = pick(s.nz);
  return {x, y, z};
}

std::vector<size_t> shuffled(size_t n, Rng& rng) {
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

float draw_fill(const RandomFillSpec& spec, Rng& rng) {
  return spec.fill_values[static_cast<size_t>(uniform_int(rng, 0, static_cast<int64_t>(spec.fill_values.size()) - 1))];
}

bool finite(const torch::Tensor& t) { return torch::isfinite(t).all().item<bool>(); }

std::vector<torch::Tensor> concat(const ParamSet& a, const ParamSet& b) {
  auto v = a.tensors();
  v.insert(v.end(), b.tensors().begin(), b.tensors().end());
  return v;
}

ProbabilityMap crop(const ProbabilityMap& pm, const Offset3& off, int size) {
  ProbabilityMap out = ProbabilityMap::zeros(pm.channels, cube(size));
  const Shape3 s = out.shape;
  for (int c = 0; c < pm.channels; ++c) {
    for (int64_t z = 0; z < size; ++z) {
      for (int64_t y = 0; y < size; ++y) {
        for (int64_t x = 0; x < size; ++x) {
          const int64_t sx = x + off[0], sy = y + off[1], sz = z + off[2];
          if (sx >= pm.shape.nx || sy >= pm.shape.ny || sz >= pm.shape.nz) continue;
          out.at(c, s.index(x, y, z)) = pm.at(c, pm.shape.index(sx, sy, sz));
        }
      }
    }
  }
  return out;
}

void log_loss(TrainContext& ctx, const std::string& stage, int fold, int epoch, int step, const std::string& term,
              double value) {
  if (ctx.log) ctx.log->add({stage, fold, epoch, step, term, value});
}

void report_epoch(const TrainContext& ctx, const std::string& stage, int fold, int epoch, const std::string& term) {
  if (!ctx.verbose || !ctx.log) return;
  std::cerr << stage << " fold " << fold << " epoch " << epoch << " " << term << " "
            << ctx.log->epoch_mean(stage, fold, epoch, term) << "\n";
}

// Plain supervised Dice training of one extractor + head pair.
using SampleFn = std::function<std::pair<torch::Tensor, torch::Tensor>(size_t index, Rng& rng)>;

void train_branch(Extractor& e, Head& h, size_t items, const SampleFn& sample, const PretrainConfig& p,
                  const std::string& stage, int fold, TrainContext& ctx,
                  const std::function<Checkpoint(const Extractor&, const Head&)>& snapshot) {
  ParamSet w = e.params.leaves();
  ParamSet head = h.params.leaves();
  torch::optim::Adam opt(concat(w, head), torch::optim::AdamOptions(p.lr));
  Extractor last_e = e;
  Head last_h = h;
  last_e.stats = e.stats.clone();

  for (int epoch = 0; epoch < p.epochs; ++epoch) {
    Rng rng = ctx.seeds.stream("data." + stage, static_cast<uint64_t>(fold) * 100000 + static_cast<uint64_t>(epoch));
    const auto order = shuffled(items, rng);
    int step = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(p.batch_size), ++step) {
      std::vector<torch::Tensor> xs, ys;
      for (size_t k = start; k < std::min(order.size(), start + static_cast<size_t>(p.batch_size)); ++k) {
        auto [x, y] = sample(order[k], rng);
        xs.push_back(x);
        ys.push_back(y);
      }
      opt.zero_grad();
      const auto features = extract_features(e.cfg, batch(xs), w, e.stats, NormMode::kBatchTrack);
      const auto probs = torch::softmax(head_logits(features, head), 1);
      const LossValue loss = soft_dice_loss(probs, batch(ys));
      if (!finite(loss.value)) {
        if (ctx.on_divergence) ctx.on_divergence(snapshot(last_e, last_h));
        throw TrainingError(stage + ": non-finite loss at epoch " + std::to_string(epoch));
      }
      loss.value.backward();
      opt.step();
      log_loss(ctx, stage, fold, epoch, step, "dice", loss.item());
    }
    report_epoch(ctx, stage, fold, epoch, "dice");
    last_e.params = w.clone();
    last_e.stats = e.stats.clone();
    last_h.params = head.clone();
  }
  e.params = w.clone();
  h.params = head.clone();
}

// Running statistics follow the updated parameters on unmodified images
// only; lesion-randomised inputs never enter them.
void track_statistics(const Extractor& e, const ParamSet& theta, const torch::Tensor& x) {
  torch::NoGradGuard no_grad;
  extract_features(e.cfg, x, theta, e.stats, NormMode::kBatchTrack);
}

}  // namespace

double LossLog::epoch_mean(const std::string& stage, int fold, int epoch, const std::string& term) const {
  double sum = 0.0;
  int n = 0;
  for (const auto& r : records_) {
    if (r.stage == stage && r.fold == fold && r.epoch == epoch && r.term == term) {
      sum += r.value;
      ++n;
    }
  }
  return n ? sum / n : std::nan("");
}

void LossLog::write_csv(const std::filesystem::path& path) const {
  const bool fresh = !std::filesystem::exists(path);
  std::ofstream out(path, std::ios::app);
  if (!out) throw Error("cannot write " + path.string());
  if (fresh) out << "stage,fold,epoch,step,term,value\n";
  out.precision(10);
  for (const auto& r : records_) {
    out << r.stage << ',' << r.fold << ',' << r.epoch << ',' << r.step << ',' << r.term << ',' << r.value << '\n';
  }
}

Volume augment(const Volume& v, const AugmentConfig& cfg, Rng& rng) {
  if (!cfg.enabled) return v;
  const double gain = uniform(rng, cfg.gain_min, cfg.gain_max);
  const double shift = uniform(rng, cfg.shift_min, cfg.shift_max);
  Volume out = v;
  for (auto& x : out.data) x = static_cast<float>(x * gain + shift);
  return out;
}

AnatomyModel pretrain_anatomy(const std::vector<Subject>& train, const PipelineConfig& cfg, TrainContext& ctx) {
  if (train.empty()) throw InputError("pretrain_anatomy: no training subjects");
  for (const auto& s : train) {
    if (!s.anatomy) throw InputError("pretrain_anatomy: subject '" + s.id + "' lacks anatomy labels");
  }
  Rng init = ctx.seeds.stream("init.anatomy");
  AnatomyModel m = init_anatomy_model(cfg.extractor, init);
  const int p = cfg.patch.size;
  const SampleFn sample = [&](size_t i, Rng& rng) {
    const Subject& s = train[i];
    const Offset3 off = random_offset(s.t1.shape, p, rng);
    const Volume x = augment(crop(s.t1, off, p), cfg.augment, rng);
    return std::pair{to_tensor(x), anatomy_one_hot(crop(*s.anatomy, off, p))};
  };
  train_branch(m.theta, m.g_a, train.size(), sample, cfg.pretrain, "pretrain_anatomy", 0, ctx,
               [](const Extractor& e, const Head& h) {
                 return Checkpoint::of(AnatomyModel{e, h}, Stage::kPretrained);
               });
  return m;
}

std::vector<int> assign_folds(size_t count, int folds, uint64_t seed) {
  if (folds < 1) throw ConfigError("fold count must be positive");
  Rng rng(splitmix64(seed));
  const auto order = shuffled(count, rng);
  std::vector<int> fold_of(count, 0);
  for (size_t k = 0; k < order.size(); ++k) fold_of[order[k]] = static_cast<int>(k % static_cast<size_t>(folds));
  return fold_of;
}

LesionModel pretrain_lesion_fold(const std::vector<Subject>& train, const std::vector<int>& fold_of, int fold,
                                 const PipelineConfig& cfg, TrainContext& ctx) {
  std::vector<const Subject*> pool;
  for (size_t i = 0; i < train.size(); ++i) {
    if (!train[i].flair || !train[i].lesion) {
      throw InputError("pretrain_lesion: subject '" + train[i].id + "' lacks FLAIR or lesion labels");
    }
    if (fold_of[i] != fold) pool.push_back(&train[i]);
  }
  if (pool.empty()) throw InputError("pretrain_lesion: fold leaves no training subjects");
  Rng init = ctx.seeds.stream("init.lesion", static_cast<uint64_t>(fold));
  LesionModel m = init_lesion_model(cfg.extractor, init);
  const int p = cfg.patch.size;
  const SampleFn sample = [&](size_t i, Rng& rng) {
    const Subject& s = *pool[i];
    const Offset3 off = random_offset(s.t1.shape, p, rng);
    const Volume x = augment(crop(*s.flair, off, p), cfg.augment, rng);
    return std::pair{to_tensor(x), to_tensor(crop(*s.lesion, off, p)) > 0.5};
  };
  const SampleFn two_channel = [&](size_t i, Rng& rng) {
    auto [x, fg] = sample(i, rng);
    const auto f = fg.to(torch::kFloat);
    return std::pair{x, torch::cat({1.0 - f, f}, 1)};
  };
  train_branch(m.phi, m.g_l, pool.size(), two_channel, cfg.lesion_pretrain, "pretrain_lesion", fold, ctx,
               [](const Extractor& e, const Head& h) {
                 return Checkpoint::of(LesionModel{e, h}, Stage::kPretrained);
               });
  return m;
}

LesionFolds pretrain_lesion(const std::vector<Subject>& train, const PipelineConfig& cfg, TrainContext& ctx) {
  LesionFolds out;
  out.fold_of = assign_folds(train.size(), cfg.lesion_folds, ctx.seeds.derive("folds"));
  for (const auto& s : train) out.ids.push_back(s.id);
  for (int k = 0; k < cfg.lesion_folds; ++k) out.models.push_back(pretrain_lesion_fold(train, out.fold_of, k, cfg, ctx));
  return out;
}

InnerStep inner_step(const ParamSet& theta, const std::function<torch::Tensor(const ParamSet&)>& loss_fn,
                     double alpha, bool create_graph) {
  const torch::Tensor loss = loss_fn(theta);
  if (!finite(loss)) throw TrainingError("inner step: non-finite loss");
  auto grads = torch::autograd::grad({loss}, theta.tensors(), {}, create_graph, create_graph, true);
  for (size_t i = 0; i < grads.size(); ++i) {
    if (!grads[i].defined()) grads[i] = torch::zeros_like(theta.tensors()[i]);
    if (!finite(grads[i])) throw TrainingError("inner step: non-finite gradient for " + theta.names()[i]);
  }
  InnerStep out;
  out.adapted = theta.minus_scaled(grads, alpha);
  out.grads = std::move(grads);
  return out;
}

MetaStepTerms meta_step(AnatomyModel& model, ParamSet& theta, torch::optim::Optimizer& opt, const MetaBatch& b,
                        const MetaTrainConfig& cfg) {
  MetaStepTerms out;
  std::vector<int64_t> keep;
  const auto lesion_voxels = b.mask.flatten(1).sum(1);
  for (int64_t i = 0; i < b.x_a.size(0); ++i) {
    if (!cfg.lesion_gate || lesion_voxels[i].item<double>() > 0.0) keep.push_back(i);
  }
  if (keep.empty()) {
    out.skipped = true;
    return out;
  }
  const auto idx = torch::tensor(keep, torch::kLong);
  auto pick = [&](const torch::Tensor& t) { return t.index_select(0, idx); };
  std::vector<float> fills;
  for (int64_t i : keep) fills.push_back(b.fills[static_cast<size_t>(i)]);
  const auto x_a = pick(b.x_a), y_a = pick(b.y_a), x_p = pick(b.x_p), mask = pick(b.mask);

  const AnatomyPath path(model.theta, model.g_a.params, NormMode::kBatch);
  opt.zero_grad();
  ParamSet adapted = theta;
  if (cfg.inner_loop) {
    const InnerLossInputs in{pick(b.x_sup), pick(b.y_sup), x_p, mask, fills};
    const auto step = inner_step(
        theta,
        [&](const ParamSet& p) {
          const auto t = inner_loss(path, p, in);
          out.inner = t.item();
          return t.total;
        },
        cfg.alpha, true);
    adapted = step.adapted;
  }
  const auto x_tilde = randomize_tensor(x_p, mask, fills);
  const OuterLossTerms lo = outer_loss(path, adapted, x_p, x_tilde, x_a, y_a);
  out.outer = lo.item();
  if (!std::isfinite(out.outer)) throw TrainingError("meta step: non-finite outer loss");
  lo.total.backward();
  for (const auto& t : theta.tensors()) {
    if (t.grad().defined() && !finite(t.grad())) throw TrainingError("meta step: non-finite outer gradient");
  }
  opt.step();
  track_statistics(model.theta, theta, x_a);
  return out;
}

AnatomyModel meta_cotrain(const AnatomyModel& pretrained, const std::vector<Subject>& anatomy,
                          const std::vector<Subject>& lesion, const PipelineConfig& cfg, TrainContext& ctx) {
  if (anatomy.size() < 2) throw InputError("meta_cotrain: need at least two anatomy subjects");
  const auto fold_of = assign_folds(lesion.size(), cfg.lesion_folds, ctx.seeds.derive("folds"));
  std::vector<const Subject*> pool;
  for (size_t i = 0; i < lesion.size(); ++i) {
    if (!lesion[i].lesion) throw InputError("meta_cotrain: lesion subject '" + lesion[i].id + "' lacks a mask");
    if (fold_of[i] != cfg.meta.fold) pool.push_back(&lesion[i]);
  }
  if (pool.empty()) throw InputError("meta_cotrain: no lesion subjects to compose pseudo-lesions from");

  AnatomyModel model = clone(pretrained);
  ParamSet theta = model.theta.params.leaves();
  torch::optim::Adam opt(theta.tensors(), torch::optim::AdamOptions(cfg.meta.beta));
  ParamSet last_good = theta.clone();
  const int p = cfg.patch.size;
  const std::string stage = cfg.meta.inner_loop ? "meta" : "meta_control";

  for (int epoch = 0; epoch < cfg.meta.epochs; ++epoch) {
    // Fresh (anatomy, lesion) pairing every epoch.
    Rng rng = ctx.seeds.stream("data.meta", static_cast<uint64_t>(epoch));
    const auto order = shuffled(anatomy.size(), rng);
    int step = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.meta.batch_size), ++step) {
      MetaBatch b;
      std::vector<torch::Tensor> xa, ya, xp, mk, xs, ys;
      for (size_t k = start; k < std::min(order.size(), start + static_cast<size_t>(cfg.meta.batch_size)); ++k) {
        const Subject& a = anatomy[order[k]];
        const Subject& l = *pool[static_cast<size_t>(uniform_int(rng, 0, static_cast<int64_t>(pool.size()) - 1))];
        size_t sup = order[k];
        while (sup == order[k]) sup = static_cast<size_t>(uniform_int(rng, 0, static_cast<int64_t>(anatomy.size()) - 1));
        const float fill = draw_fill(cfg.fills, rng);
        const PseudoLesionSample ps = compose_pseudo_lesion(a.t1, *a.anatomy, l.t1, *l.lesion);
        const Offset3 off = random_offset(a.t1.shape, p, rng);
        const Offset3 sup_off = random_offset(anatomy[sup].t1.shape, p, rng);
        xa.push_back(to_tensor(crop(a.t1, off, p)));
        ya.push_back(anatomy_one_hot(crop(*a.anatomy, off, p)));
        xp.push_back(to_tensor(crop(ps.x_p, off, p)));
        mk.push_back(to_tensor(crop(ps.y_l, off, p)));
        xs.push_back(to_tensor(crop(anatomy[sup].t1, sup_off, p)));
        ys.push_back(anatomy_one_hot(crop(*anatomy[sup].anatomy, sup_off, p)));
        b.fills.push_back(fill);
      }
      b.x_a = batch(xa);
      b.y_a = batch(ya);
      b.x_p = batch(xp);
      b.mask = batch(mk);
      b.x_sup = batch(xs);
      b.y_sup = batch(ys);
      MetaStepTerms terms;
      try {
        terms = meta_step(model, theta, opt, b, cfg.meta);
      } catch (const TrainingError&) {
        if (ctx.on_divergence) {
          AnatomyModel snap = model;
          snap.theta.params = last_good;
          ctx.on_divergence(Checkpoint::of(snap, Stage::kPretrained));
        }
        throw;
      }
      if (terms.skipped) continue;
      if (cfg.meta.inner_loop) log_loss(ctx, stage, cfg.meta.fold, epoch, step, "inner", terms.inner);
      log_loss(ctx, stage, cfg.meta.fold, epoch, step, "outer", terms.outer);
    }
    report_epoch(ctx, stage, cfg.meta.fold, epoch, "outer");
    last_good = theta.clone();
  }
  model.theta.params = theta.clone();
  return model;
}

ProbabilityMap compose_soft_target(const ProbabilityMap& anatomy_probs, const LesionMask& y_l) {
  if (anatomy_probs.channels != kAnatomyClassCount) throw ShapeError("soft target needs anatomy probabilities");
  require_same_shape(anatomy_probs.shape, y_l.shape, "soft target lesion mask");
  ProbabilityMap out = ProbabilityMap::zeros(kJointClassCount, y_l.shape);
  const int64_t n = y_l.shape.voxels();
  for (int64_t i = 0; i < n; ++i) {
    double total = 0.0;
    for (int c = 0; c < kAnatomyClassCount; ++c) total += anatomy_probs.at(c, i);
    const double lesion = y_l.data[static_cast<size_t>(i)] ? 1.0 : 0.0;
    const double scale = total > 0.0 ? (1.0 - lesion) / total : 0.0;
    for (int c = 0; c < kAnatomyClassCount; ++c) {
      out.at(kAnatomyClassIds[static_cast<size_t>(c)], i) = static_cast<float>(anatomy_probs.at(c, i) * scale);
    }
    out.at(kLesion, i) = static_cast<float>(lesion);
  }
  return out;
}

bool adaptation_diverged(const std::vector<double>& trace) {
  if (trace.size() < 2) return false;
  for (size_t k = 1; k < trace.size(); ++k) {
    if (!(trace[k] > trace[k - 1])) return false;
  }
  return true;
}

std::vector<PseudoLabel> generate_pseudolabels(const AnatomyModel& cotrained, const std::vector<Subject>& lesion,
                                               const SupportSample& support, const PipelineConfig& cfg,
                                               const SeedStreams& seeds) {
  std::vector<PseudoLabel> out;
  for (size_t i = 0; i < lesion.size(); ++i) {
    const Subject& s = lesion[i];
    if (!s.lesion) throw InputError("pseudolabel: subject '" + s.id + "' lacks a lesion mask");
    Rng rng = seeds.stream("fills.pseudolabel", i);
    const float fill = draw_fill(cfg.fills, rng);
    const AnatomyInference inf = infer_anatomy(cotrained, s.t1, &*s.lesion, &support, fill, cfg.patch, cfg.adapt);
    PseudoLabel pl;
    pl.id = s.id;
    pl.target = compose_soft_target(inf.probs, *s.lesion);
    for (const auto& t : inf.traces) {
      pl.trace.insert(pl.trace.end(), t.begin(), t.end());
      if (adaptation_diverged(t)) pl.flagged = true;
    }
    if (inf.failed_patches > 0) pl.flagged = true;
    out.push_back(std::move(pl));
  }
  return out;
}

namespace {

// The fused classifier starts as the two pretrained heads: anatomy rows from
// g_A and the lesion row from g_L's lesion-versus-background logit, so joint
// training begins from the branch predictions instead of from chance.
void seed_fusion_classifier(Fusion& f, const Head& g_a, const Head& g_l) {
  torch::NoGradGuard no_grad;
  auto& w = f.params.at("cls.weight");
  auto& b = f.params.at("cls.bias");
  const auto& aw = g_a.params.at("cls.weight");
  const auto& ab = g_a.params.at("cls.bias");
  const auto& lw = g_l.params.at("cls.weight");
  const auto& lb = g_l.params.at("cls.bias");
  if (w.size(1) != aw.size(1) || w.size(1) != lw.size(1)) {
    throw ConfigError("fusion and head feature widths differ");
  }
  for (int k = 0; k < kAnatomyClassCount; ++k) {
    w[kAnatomyClassIds[k]].copy_(aw[k]);
    b[kAnatomyClassIds[k]].copy_(ab[k]);
  }
  w[kLesion].copy_(lw[1] - lw[0]);
  b[kLesion].copy_(lb[1] - lb[0]);
}

}  // namespace

JointModel joint_train(const AnatomyModel& cotrained, const LesionModel& frozen, const std::vector<JointSample>& data,
                       const std::vector<Subject>& anatomy, const PipelineConfig& cfg, TrainContext& ctx, int fold) {
  if (data.empty()) throw InputError("joint_train: no training samples");
  if (anatomy.empty()) throw InputError("joint_train: no anatomy subjects for the supervision term");
  for (const auto& d : data) {
    if (!d.subject || !d.target || !d.subject->flair) throw InputError("joint_train: incomplete sample");
  }
  JointModel model;
  model.anatomy = clone(cotrained);
  model.lesion = frozen;
  Rng init = ctx.seeds.stream("init.fusion", static_cast<uint64_t>(fold));
  model.psi = init_fusion(cfg.fusion(), init);
  seed_fusion_classifier(model.psi, model.anatomy.g_a, model.lesion.g_l);

  ParamSet theta = model.anatomy.theta.params.leaves();
  ParamSet psi = model.psi.params.leaves();
  // psi alone first: the seeded lesion row also reads T1 features, and its
  // early gradients would otherwise pull theta away from the frozen g_A.
  torch::optim::Adam warmup(psi.tensors(), torch::optim::AdamOptions(cfg.joint.lr));
  torch::optim::Adam opt(concat(theta, psi), torch::optim::AdamOptions(cfg.joint.lr));
  const AnatomyPath path(model.anatomy.theta, model.anatomy.g_a.params, NormMode::kBatch);
  const int p = cfg.patch.size;
  JointModel last_good = clone(model);

  for (int epoch = 0; epoch < cfg.joint.epochs; ++epoch) {
    Rng rng = ctx.seeds.stream("data.joint", static_cast<uint64_t>(fold) * 100000 + static_cast<uint64_t>(epoch));
    const auto order = shuffled(data.size(), rng);
    int step = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.joint.batch_size), ++step) {
      std::vector<torch::Tensor> xt, xf, tg, mk, xs, ys;
      std::vector<float> fills;
      for (size_t k = start; k < std::min(order.size(), start + static_cast<size_t>(cfg.joint.batch_size)); ++k) {
        const JointSample& d = data[order[k]];
        const Subject& sup = anatomy[static_cast<size_t>(uniform_int(rng, 0, static_cast<int64_t>(anatomy.size()) - 1))];
        const Offset3 off = random_offset(d.subject->t1.shape, p, rng);
        const Offset3 sup_off = random_offset(sup.t1.shape, p, rng);
        xt.push_back(to_tensor(crop(d.subject->t1, off, p)));
        xf.push_back(to_tensor(crop(*d.subject->flair, off, p)));
        tg.push_back(to_tensor(crop(*d.target, off, p)));
        mk.push_back(to_tensor(crop(d.mask, off, p)));
        xs.push_back(to_tensor(crop(sup.t1, sup_off, p)));
        ys.push_back(anatomy_one_hot(crop(*sup.anatomy, sup_off, p)));
        fills.push_back(draw_fill(cfg.fills, rng));
      }
      const auto x_t1 = batch(xt);
      const InnerLossInputs in{batch(xs), batch(ys), x_t1, batch(mk), fills};
      const bool psi_only = epoch < cfg.joint.warmup_epochs;
      torch::optim::Adam& active = psi_only ? warmup : opt;
      opt.zero_grad();
      warmup.zero_grad();
      double inner = 0.0;
      torch::Tensor loss;
      try {
        const auto st = inner_step(
            theta,
            [&](const ParamSet& q) {
              const auto t = inner_loss(path, q, in);
              inner = t.item();
              return t.total;
            },
            cfg.meta.alpha, true);
        const auto w_t1 = forward_t1(model.anatomy.theta, x_t1, st.adapted, NormMode::kBatch);
        torch::Tensor w_f;
        {
          torch::NoGradGuard no_grad;
          w_f = forward_flair(model.lesion.phi, batch(xf), model.lesion.phi.params, NormMode::kRunning);
        }
        const auto fused = fuse(model.psi, w_t1, w_f, psi, NormMode::kBatchTrack);
        loss = soft_dice_loss(fused.probs, batch(tg)).value;
        if (!finite(loss)) throw TrainingError("joint training: non-finite loss at epoch " + std::to_string(epoch));
      } catch (const TrainingError&) {
        if (ctx.on_divergence) ctx.on_divergence(Checkpoint::of(last_good, Stage::kJoint));
        throw;
      }
      loss.backward();
      active.step();
      if (!psi_only) track_statistics(model.anatomy.theta, theta, x_t1);
      log_loss(ctx, "joint", fold, epoch, step, "inner", inner);
      log_loss(ctx, "joint", fold, epoch, step, "dice", loss.item<double>());
    }
    report_epoch(ctx, "joint", fold, epoch, "dice");
    last_good.anatomy.theta.params = theta.clone();
    last_good.psi.params = psi.clone();
    last_good.psi.stats = model.psi.stats.clone();
    last_good.anatomy.theta.stats = model.anatomy.theta.stats.clone();
  }
  model.anatomy.theta.params = theta.clone();
  model.psi.params = psi.clone();
  return model;
}

}  // namespace jointseg

#include "jointseg/losses.hpp"

#include "jointseg/error.hpp"

namespace jointseg {

LossValue soft_dice_loss(const torch::Tensor& probs, const torch::Tensor& target, bool reduce_batch, double eps) {
  if (probs.sizes() != target.sizes()) throw ShapeError("soft_dice_loss: probs and target differ in shape");
  if (probs.dim() < 3) throw ShapeError("soft_dice_loss expects [B, C, ...]");
  std::vector<int64_t> spatial;
  for (int64_t d = 2; d < probs.dim(); ++d) spatial.push_back(d);

  LossValue out;
  if (reduce_batch) {
    std::vector<int64_t> axes = spatial;
    axes.insert(axes.begin(), 0);
    const auto inter = (probs * target).sum(axes);
    const auto denom = probs.sum(axes) + target.sum(axes);
    out.per_class = 1.0 - (2.0 * inter + eps) / (denom + eps);
  } else {
    const auto inter = (probs * target).sum(spatial);
    const auto denom = probs.sum(spatial) + target.sum(spatial);
    out.per_class = (1.0 - (2.0 * inter + eps) / (denom + eps)).mean(0);
  }
  out.value = out.per_class.mean();
  return out;
}

torch::Tensor randomize_tensor(const torch::Tensor& x, const torch::Tensor& mask, const std::vector<float>& fills) {
  if (x.sizes() != mask.sizes()) throw ShapeError("randomize_tensor: mask does not match image");
  if (static_cast<int64_t>(fills.size()) != x.size(0)) throw InputError("randomize_tensor: one fill per sample");
  std::vector<int64_t> shape(static_cast<size_t>(x.dim()), 1);
  shape[0] = x.size(0);
  const auto fill = torch::tensor(std::vector<double>(fills.begin(), fills.end()), x.options()).view(shape);
  return x * (1.0 - mask) + fill * mask;
}

InnerLossTerms inner_loss(const AnatomyPath& path, const ParamSet& theta, const InnerLossInputs& in) {
  if (in.mask.sizes() != in.x_test.sizes()) throw ShapeError("inner_loss: mask not aligned with test image");
  const auto anatomy_voxels = (1.0 - in.mask).flatten(1).sum(1);
  if ((anatomy_voxels <= 0.0).any().item<bool>()) {
    throw DegenerateInputError("inner_loss: lesion mask covers the whole image");
  }

  InnerLossTerms t;
  const auto x_tilde = randomize_tensor(in.x_test, in.mask, in.fills);
  // x (1 - L) + x L == x; the clean branch is evaluated on the image itself.
  torch::Tensor clean;
  {
    torch::NoGradGuard no_grad;
    clean = path.probs(in.x_test, theta);
  }
  const auto randomized = path.probs(x_tilde, theta);
  t.consistency = soft_dice_loss(randomized, clean);
  t.supervision = soft_dice_loss(path.probs(in.x_sup, theta), in.y_sup);
  t.total = t.consistency.value + t.supervision.value;
  return t;
}

OuterLossTerms outer_loss(const AnatomyPath& path, const ParamSet& theta_adapted, const torch::Tensor& x_p,
                          const torch::Tensor& x_tilde, const torch::Tensor& x_a, const torch::Tensor& y_a) {
  if (x_p.sizes() != x_a.sizes() || x_tilde.sizes() != x_a.sizes()) throw ShapeError("outer_loss: image shapes differ");
  OuterLossTerms t;
  t.pseudo = soft_dice_loss(path.probs(x_p, theta_adapted), y_a);
  t.randomized = soft_dice_loss(path.probs(x_tilde, theta_adapted), y_a);
  t.clean = soft_dice_loss(path.probs(x_a, theta_adapted), y_a);
  t.total = t.pseudo.value + t.randomized.value + t.clean.value;
  return t;
}

}  // namespace jointseg

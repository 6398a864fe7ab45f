#include <doctest.h>
#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <functional>

#include "jointseg/checkpoint.hpp"
#include "jointseg/losses.hpp"
#include "jointseg/train.hpp"

using namespace jointseg;

namespace {

const auto kF64 = torch::TensorOptions().dtype(torch::kDouble);

// Central differences on entry `i` of the flattened tensor `t`.
double central_difference(torch::Tensor t, int64_t i, double h, const std::function<double()>& f) {
  torch::NoGradGuard no_grad;
  auto flat = t.view(-1);
  const double orig = flat[i].item<double>();
  flat[i] = orig + h;
  const double up = f();
  flat[i] = orig - h;
  const double down = f();
  flat[i] = orig;
  return (up - down) / (2.0 * h);
}

double rel_err(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

torch::Tensor one_hot_target(int64_t classes, std::vector<int64_t> spatial, uint64_t seed) {
  torch::manual_seed(seed);
  std::vector<int64_t> shape{1};
  shape.insert(shape.end(), spatial.begin(), spatial.end());
  const auto idx = torch::randint(0, classes, shape, torch::kLong);
  return torch::one_hot(idx, classes).permute({0, 4, 1, 2, 3}).to(torch::kDouble).contiguous();
}

}  // namespace

TEST_SUITE("gradient") {
  TEST_CASE("soft dice gradient matches central differences") {
    torch::manual_seed(3);
    auto logits = torch::randn({2, 3, 3, 3, 3}, kF64).requires_grad_(true);
    const auto target = one_hot_target(3, {3, 3, 3}, 4).repeat({2, 1, 1, 1, 1});
    for (bool reduce : {true, false}) {
      auto f = [&] { return soft_dice_loss(torch::softmax(logits, 1), target, reduce).value; };
      logits.mutable_grad() = torch::Tensor();
      f().backward();
      const auto g = logits.grad().view(-1).clone();
      double worst = 0.0;
      for (int64_t i = 0; i < logits.numel(); ++i) {
        const double fd = central_difference(logits, i, 1e-6, [&] { return f().item<double>(); });
        worst = std::max(worst, rel_err(g[i].item<double>(), fd, 1e-7));
      }
      CHECK(worst < 1e-4);
    }
  }

  TEST_CASE("extractor parameter gradients match central differences") {
    Rng rng(5);
    const ExtractorConfig cfg{2, 2, 3, 2, 1};
    auto e = init_extractor(cfg, rng, torch::kDouble);
    auto theta = e.params.leaves();
    torch::manual_seed(6);
    const auto x = torch::randn({2, 1, 8, 8, 8}, kF64);
    const auto w = torch::randn({2, 3, 8, 8, 8}, kF64);
    auto f = [&] { return (forward_t1(e, x, theta, NormMode::kBatch) * w).sum(); };
    f().backward();
    const std::vector<std::pair<std::string, int64_t>> picks{{"enc0.conv0.weight", 7}, {"dec0.bn1.weight", 1},
                                                             {"out.bias", 2}};
    for (const auto& [name, i] : picks) {
      auto& t = theta.at(name);
      const double g = t.grad().view(-1)[i].item<double>();
      const double fd = central_difference(t, i, 1e-6, [&] { return f().item<double>(); });
      CAPTURE(name);
      CHECK(rel_err(g, fd) < 1e-3);
    }
  }

  TEST_CASE("fusion gradients match central differences") {
    Rng rng(8);
    const auto fusion = init_fusion({3, 4, 8}, rng, torch::kDouble);
    auto psi = fusion.params.leaves();
    torch::manual_seed(9);
    const auto w_t1 = torch::randn({2, 3, 4, 4, 4}, kF64);
    const auto w_f = torch::randn({2, 3, 4, 4, 4}, kF64);
    const auto target = one_hot_target(8, {4, 4, 4}, 10).repeat({2, 1, 1, 1, 1});
    auto f = [&] { return soft_dice_loss(fuse(fusion, w_t1, w_f, psi, NormMode::kBatch).probs, target).value; };
    f().backward();
    double worst = 0.0;
    int checked = 0;
    for (const auto& name : psi.names()) {
      auto& t = psi.at(name);
      for (int64_t i = 0; i < std::min<int64_t>(t.numel(), 4); ++i) {
        const double g = t.grad().view(-1)[i].item<double>();
        const double fd = central_difference(t, i, 1e-6, [&] { return f().item<double>(); });
        worst = std::max(worst, rel_err(g, fd, 1e-7));
        ++checked;
      }
    }
    CHECK(checked >= 20);
    CHECK(worst < 1e-3);
  }

  TEST_CASE("second-order meta-gradient matches central differences") {
    Rng rng(11);
    const ExtractorConfig cfg{2, 1, 2, 1, 1};
    const auto model = init_anatomy_model(cfg, rng, torch::kDouble);
    REQUIRE(model.theta.params.numel() <= 500);
    const AnatomyPath path(model.theta, model.g_a.params, NormMode::kRunning);
    const double alpha = 0.5;  // large enough for the curvature term to matter

    torch::manual_seed(12);
    const auto x_a = torch::randn({1, 1, 8, 8, 8}, kF64);
    const auto y_a = one_hot_target(kAnatomyClassCount, {8, 8, 8}, 13);
    auto mask = torch::zeros({1, 1, 8, 8, 8}, kF64);
    mask.index_put_({0, 0, torch::indexing::Slice(2, 5), torch::indexing::Slice(2, 6), torch::indexing::Slice(3, 6)},
                    1.0);
    const auto x_p = x_a * (1 - mask) + torch::randn({1, 1, 8, 8, 8}, kF64) * mask;
    const auto x_sup = torch::randn({1, 1, 8, 8, 8}, kF64);
    const auto y_sup = one_hot_target(kAnatomyClassCount, {8, 8, 8}, 14);
    const std::vector<float> fills{-2.0f};
    const auto x_tilde = randomize_tensor(x_p, mask, fills);
    const InnerLossInputs in{x_sup, y_sup, x_p, mask, fills};

    auto theta = model.theta.params.leaves();
    auto step = inner_step(theta, [&](const ParamSet& p) { return inner_loss(path, p, in).total; }, alpha, true);
    outer_loss(path, step.adapted, x_p, x_tilde, x_a, y_a).total.backward();

    // Oracle: the inner objective written out directly, with the consistency
    // target frozen at its value under the unperturbed parameters.
    torch::Tensor frozen;
    {
      torch::NoGradGuard ng;
      frozen = path.probs(x_p, theta);
    }
    auto objective = [&]() -> double {
      torch::AutoGradMode enable(true);
      auto p = theta.clone().leaves();
      const auto li = soft_dice_loss(path.probs(x_tilde, p), frozen).value +
                      soft_dice_loss(path.probs(x_sup, p), y_sup).value;
      const auto g = torch::autograd::grad({li}, p.tensors(), {}, false, false, true);
      torch::NoGradGuard ng;
      std::vector<torch::Tensor> adapted;
      for (size_t k = 0; k < g.size(); ++k) {
        adapted.push_back(g[k].defined() ? p.tensors()[k] - alpha * g[k] : p.tensors()[k]);
      }
      const auto q = p.with_values(adapted);
      return (soft_dice_loss(path.probs(x_p, q), y_a).value + soft_dice_loss(path.probs(x_tilde, q), y_a).value +
              soft_dice_loss(path.probs(x_a, q), y_a).value)
          .item<double>();
    };

    std::vector<double> analytic, numeric;
    for (auto& t : theta.tensors()) {
      const auto g = t.grad().defined() ? t.grad().view(-1) : torch::zeros({t.numel()}, kF64);
      for (int64_t i = 0; i < t.numel(); ++i) {
        analytic.push_back(g[i].item<double>());
        numeric.push_back(central_difference(t, i, 1e-5, objective));
      }
    }
    double num = 0.0, den = 0.0;
    for (size_t i = 0; i < analytic.size(); ++i) {
      num += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
      den += numeric[i] * numeric[i];
    }
    const double rel = std::sqrt(num / den);
    MESSAGE("meta-gradient relative error " << rel << " over " << analytic.size() << " parameters");
    CHECK(den > 0.0);
    CHECK(rel < 1e-2);

    // The first-order approximation must be distinguishable, otherwise the
    // check above would not exercise the second-order term.
    auto fo_theta = model.theta.params.leaves();
    auto fo = inner_step(fo_theta, [&](const ParamSet& p) { return inner_loss(path, p, in).total; }, alpha, false);
    auto detached = fo.adapted.clone().leaves();
    outer_loss(path, detached, x_p, x_tilde, x_a, y_a).total.backward();
    double fo_num = 0.0;
    size_t k = 0;
    for (auto& t : detached.tensors()) {
      const auto g = t.grad().view(-1);
      for (int64_t i = 0; i < t.numel(); ++i, ++k) fo_num += std::pow(g[i].item<double>() - numeric[k], 2);
    }
    CHECK(std::sqrt(fo_num / den) > rel);
  }
}

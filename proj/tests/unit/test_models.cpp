#include <doctest.h>
#include <torch/torch.h>

#include <fstream>

#include "helpers.hpp"
#include "jointseg/checkpoint.hpp"
#include "jointseg/config.hpp"
#include "jointseg/error.hpp"
#include "jointseg/losses.hpp"
#include "jointseg/train.hpp"

using namespace jointseg;
using torch::indexing::Slice;

namespace {

const ExtractorConfig kTiny{2, 4, 4, 1, 1};

torch::Tensor sym_kernel(const torch::Tensor& w) {
  return (w + w.flip({2}) + w.flip({3}) + w.flip({4}) + w.flip({2, 3}) + w.flip({2, 4}) + w.flip({3, 4}) +
          w.flip({2, 3, 4})) /
         8.0;
}

torch::Tensor onehot_labels(int64_t classes, int64_t n, uint64_t seed) {
  torch::manual_seed(seed);
  const auto idx = torch::randint(0, classes, {1, n, n, n}, torch::kLong);
  return torch::one_hot(idx, classes).permute({0, 4, 1, 2, 3}).to(torch::kFloat).contiguous();
}

MetaBatch toy_batch(uint64_t seed, int64_t n = 8) {
  torch::manual_seed(seed);
  MetaBatch b;
  b.x_a = torch::randn({2, 1, n, n, n});
  b.y_a = torch::cat({onehot_labels(7, n, seed + 1), onehot_labels(7, n, seed + 2)});
  b.mask = torch::zeros({2, 1, n, n, n});
  b.mask.index_put_({0, 0, Slice(1, 4), Slice(2, 5), Slice(2, 6)}, 1.0);
  b.mask.index_put_({1, 0, Slice(4, 7), Slice(1, 3), Slice(3, 6)}, 1.0);
  b.x_p = b.x_a * (1 - b.mask) + 2.5 * b.mask;
  b.x_sup = torch::randn({2, 1, n, n, n});
  b.y_sup = torch::cat({onehot_labels(7, n, seed + 3), onehot_labels(7, n, seed + 4)});
  b.fills = {-5.0f, 2.0f};
  return b;
}

}  // namespace

TEST_SUITE("contract") {
  TEST_CASE("eval-mode forward is deterministic and does not touch parameters") {
    Rng rng(1);
    auto m = init_anatomy_model(kTiny, rng);
    const auto before = m.theta.params.content_hash();
    const auto x = torch::randn({1, 1, 8, 8, 8});
    const auto a = predict_anatomy(forward_t1(m.theta, x, m.theta.params, NormMode::kRunning), m.g_a.params);
    const auto b = predict_anatomy(forward_t1(m.theta, x, m.theta.params, NormMode::kRunning), m.g_a.params);
    CHECK(torch::equal(a, b));
    CHECK(m.theta.params.content_hash() == before);
    CHECK(a.sizes() == torch::IntArrayRef({1, 7, 8, 8, 8}));
    CHECK((a.sum(1) - 1).abs().max().item<float>() < 1e-5);
  }

  TEST_CASE("zeroed output layer gives a zero feature map") {
    Rng rng(2);
    auto e = init_extractor(kTiny, rng);
    auto p = e.params.clone();
    p.at("out.weight").zero_();
    p.at("out.bias").zero_();
    const auto w = forward_t1(e, torch::randn({1, 1, 8, 8, 8}), p, NormMode::kRunning);
    CHECK(w.abs().max().item<float>() == 0.0f);
  }

  TEST_CASE("heads normalise and permute with their rows") {
    Rng rng(3);
    const auto w = torch::randn({2, 5, 4, 4, 4});
    const auto g_a = init_head(5, 7, rng);
    const auto g_l = init_head(5, 2, rng);
    const auto pa = predict_anatomy(w, g_a.params);
    const auto pl = predict_lesion(w, g_l.params);
    CHECK((pa.sum(1) - 1).abs().max().item<float>() < 1e-5);
    CHECK((pl.sum(1) - 1).abs().max().item<float>() < 1e-5);
    CHECK(torch::equal(pl.argmax(1), (pl.select(1, 1) > 0.5).to(torch::kLong)));

    const auto perm = torch::tensor({3, 0, 6, 1, 5, 2, 4}, torch::kLong);
    ParamSet permuted;
    permuted.add("cls.weight", g_a.params.at("cls.weight").index_select(0, perm));
    permuted.add("cls.bias", g_a.params.at("cls.bias").index_select(0, perm));
    CHECK(torch::allclose(predict_anatomy(w, permuted), pa.index_select(1, perm), 1e-6, 1e-6));
  }

  TEST_CASE("flip equivariance with symmetric kernels") {
    Rng rng(4);
    auto e = init_extractor(kTiny, rng);
    auto p = e.params.clone();
    for (const auto& name : p.names()) {
      auto& t = p.at(name);
      if (t.dim() == 5) t = sym_kernel(t);
    }
    torch::manual_seed(5);
    const auto x = torch::randn({1, 1, 8, 8, 8});
    const auto y = forward_t1(e, x, p, NormMode::kRunning);
    for (int64_t axis : {2, 3, 4}) {
      const auto yf = forward_t1(e, x.flip({axis}), p, NormMode::kRunning);
      CHECK(torch::allclose(yf, y.flip({axis}), 1e-5, 1e-5));
    }
  }

  TEST_CASE("closed attention gate ignores the FLAIR features") {
    Rng rng(6);
    const auto f = init_fusion({4, 4, 8}, rng);
    auto psi = f.params.clone();
    psi.at("att.conv2.weight").zero_();
    psi.at("att.conv2.bias").fill_(-1e4);
    const auto w_t1 = torch::randn({1, 4, 4, 4, 4});
    const auto out = fuse(f, w_t1, torch::randn({1, 4, 4, 4, 4}), psi, NormMode::kRunning);
    const auto out2 = fuse(f, w_t1, torch::randn({1, 4, 4, 4, 4}) * 10, psi, NormMode::kRunning);
    CHECK(torch::equal(out.probs, out2.probs));
    CHECK(out.attention.max().item<float>() == 0.0f);
    CHECK((out.probs.sum(1) - 1).abs().max().item<float>() < 1e-5);
    CHECK(out.probs.size(1) == kJointClassCount);
  }

  TEST_CASE("shape and input errors") {
    Rng rng(7);
    const auto e = init_extractor(kTiny, rng);
    CHECK_THROWS_AS(forward_t1(e, torch::randn({1, 1, 7, 8, 8}), e.params, NormMode::kRunning), ShapeError);
    CHECK_THROWS_AS(forward_t1(e, torch::randn({1, 8, 8, 8}), e.params, NormMode::kRunning), ShapeError);
    const auto f = init_fusion({4, 4, 8}, rng);
    CHECK_THROWS_AS(fuse(f, torch::randn({1, 4, 4, 4, 4}), torch::randn({1, 4, 2, 4, 4}), f.params,
                         NormMode::kRunning),
                    InputError);
    CHECK_THROWS_AS(init_extractor({1, 4, 4, 1, 1}, rng), ConfigError);
  }

  TEST_CASE("inner loss decomposes into its terms") {
    Rng rng(8);
    auto m = init_anatomy_model(kTiny, rng);
    const AnatomyPath path(m.theta, m.g_a.params, NormMode::kRunning);
    const auto b = toy_batch(20);
    const InnerLossInputs in{b.x_sup, b.y_sup, b.x_p, b.mask, b.fills};
    const auto t = inner_loss(path, m.theta.params, in);
    const auto sup = soft_dice_loss(path.probs(b.x_sup, m.theta.params), b.y_sup).item();
    const auto x_tilde = b.x_p * (1 - b.mask) +
                         torch::tensor({-5.0f, 2.0f}).view({2, 1, 1, 1, 1}) * b.mask;
    const auto cons =
        soft_dice_loss(path.probs(x_tilde, m.theta.params), path.probs(b.x_p, m.theta.params)).item();
    CHECK(t.supervision.item() == doctest::Approx(sup).epsilon(1e-6));
    CHECK(t.consistency.item() == doctest::Approx(cons).epsilon(1e-6));
    CHECK(t.item() == doctest::Approx(sup + cons).epsilon(1e-6));

    auto full = b;
    full.mask = torch::ones_like(b.mask);
    CHECK_THROWS_AS(inner_loss(path, m.theta.params, {b.x_sup, b.y_sup, b.x_p, full.mask, b.fills}),
                    DegenerateInputError);
  }

  TEST_CASE("inner loss with an empty mask is the supervision term") {
    // A confident head: the consistency residual of a soft prediction
    // against itself vanishes as the softmax saturates. The random bias
    // breaks ties where the rectified features are all zero.
    Rng rng(9);
    auto m = init_anatomy_model(kTiny, rng);
    torch::manual_seed(9);
    m.g_a.params.at("cls.weight").mul_(1e4);
    m.g_a.params.at("cls.bias").copy_(torch::randn({kAnatomyClassCount}) * 1e4);
    const AnatomyPath path(m.theta, m.g_a.params, NormMode::kRunning);
    const auto b = toy_batch(21);
    const auto empty = torch::zeros_like(b.mask);
    const auto t = inner_loss(path, m.theta.params, {b.x_sup, b.y_sup, b.x_p, empty, b.fills});
    CHECK(t.consistency.item() <= 1e-4);
    CHECK(std::abs(t.item() - t.supervision.item()) <= 1e-4);
  }

  TEST_CASE("outer loss with an empty lesion is three clean terms") {
    Rng rng(10);
    auto m = init_anatomy_model(kTiny, rng);
    const AnatomyPath path(m.theta, m.g_a.params, NormMode::kRunning);
    const auto b = toy_batch(22);
    const auto o = outer_loss(path, m.theta.params, b.x_a, b.x_a, b.x_a, b.y_a);
    const auto clean = soft_dice_loss(path.probs(b.x_a, m.theta.params), b.y_a).item();
    CHECK(o.item() == doctest::Approx(3.0 * clean).epsilon(1e-6));
  }

  TEST_CASE("inner step is functional") {
    Rng rng(11);
    auto m = init_anatomy_model(kTiny, rng);
    const AnatomyPath path(m.theta, m.g_a.params, NormMode::kRunning);
    const auto b = toy_batch(23);
    auto theta = m.theta.params.leaves();
    const auto h = theta.content_hash();
    const auto step = inner_step(theta, [&](const ParamSet& p) {
      return inner_loss(path, p, {b.x_sup, b.y_sup, b.x_p, b.mask, b.fills}).total;
    }, 0.0);
    CHECK(step.adapted.bit_equal(theta));
    CHECK(theta.content_hash() == h);

    ParamSet q;
    q.add("a", torch::randn({3, 4}, torch::kDouble));
    q.add("b", torch::randn({5}, torch::kDouble));
    q = q.leaves();
    const double alpha = 0.25;
    const auto quad = inner_step(q, [](const ParamSet& p) {
      torch::Tensor s = torch::zeros({}, torch::kDouble);
      for (const auto& t : p.tensors()) s = s + 0.5 * (t * t).sum();
      return s;
    }, alpha, false);
    for (size_t k = 0; k < q.size(); ++k) {
      CHECK(torch::allclose(quad.adapted.tensors()[k], (1 - alpha) * q.tensors()[k], 0, 1e-15));
    }

    CHECK_THROWS_AS(inner_step(q, [](const ParamSet& p) { return (p.tensors()[0] * NAN).sum(); }, 0.1),
                    TrainingError);
  }

  TEST_CASE("meta step reproducibility, alpha zero and the lesion gate") {
    Rng rng(12);
    const auto base = init_anatomy_model(kTiny, rng);
    const auto b = toy_batch(24);
    auto run = [&](MetaTrainConfig cfg, const MetaBatch& batch) {
      auto m = clone(base);
      auto theta = m.theta.params.leaves();
      torch::optim::Adam opt(theta.tensors(), torch::optim::AdamOptions(cfg.beta));
      const auto terms = meta_step(m, theta, opt, batch, cfg);
      return std::make_pair(terms, theta.clone());
    };
    MetaTrainConfig cfg;
    const auto [t1, p1] = run(cfg, b);
    const auto [t2, p2] = run(cfg, b);
    CHECK(p1.bit_equal(p2));
    CHECK(t1.outer == t2.outer);
    CHECK_FALSE(p1.bit_equal(base.theta.params));

    auto zero = cfg;
    zero.alpha = 0.0;
    auto control = cfg;
    control.inner_loop = false;
    const auto [tz, pz] = run(zero, b);
    const auto [tc, pc] = run(control, b);
    CHECK(pz.bit_equal(pc));

    auto lesion_free = b;
    lesion_free.mask = torch::zeros_like(b.mask);
    lesion_free.x_p = b.x_a;
    const auto [ts, ps] = run(cfg, lesion_free);
    CHECK(ts.skipped);
    CHECK(ps.bit_equal(base.theta.params));
  }

  TEST_CASE("soft target composition") {
    auto probs = ProbabilityMap::zeros(kAnatomyClassCount, cube(3));
    std::mt19937_64 rng(13);
    std::uniform_real_distribution<float> u(0.01f, 1.0f);
    for (int64_t i = 0; i < 27; ++i) {
      float s = 0;
      for (int c = 0; c < kAnatomyClassCount; ++c) s += probs.at(c, i) = u(rng);
      for (int c = 0; c < kAnatomyClassCount; ++c) probs.at(c, i) /= s;
    }
    const auto y_l = testutil::random_mask(cube(3), rng, 0.4);
    const auto t = compose_soft_target(probs, y_l);
    REQUIRE(t.channels == kJointClassCount);
    for (int64_t i = 0; i < 27; ++i) {
      float s = 0;
      for (int c = 0; c < kJointClassCount; ++c) s += t.at(c, i);
      CHECK(std::abs(s - 1.0f) < 1e-5);
      CHECK(t.at(kLesion, i) == static_cast<float>(y_l.data[static_cast<size_t>(i)]));
    }
    CHECK(adaptation_diverged({1.0, 1.1, 1.2}));
    CHECK_FALSE(adaptation_diverged({1.0, 1.1, 1.05}));
  }

  TEST_CASE("checkpoint round trip and stage refusal") {
    Rng rng(14);
    auto m = init_anatomy_model(kTiny, rng);
    m.theta.stats.at("enc0.bn0.running_mean").uniform_();
    const auto dir = testutil::temp_dir("ckpt");
    auto ck = Checkpoint::of(m, Stage::kCotrained);
    ck.rng_state = "12345";
    save_checkpoint(dir / "a.ckpt", ck);
    const auto back = load_checkpoint(dir / "a.ckpt");
    const auto m2 = back.anatomy(Stage::kCotrained);
    CHECK(m2.theta.params.bit_equal(m.theta.params));
    CHECK(m2.theta.stats.bit_equal(m.theta.stats));
    CHECK(m2.g_a.params.bit_equal(m.g_a.params));
    CHECK(m2.theta.cfg == m.theta.cfg);
    CHECK(back.rng_state == "12345");
    CHECK_THROWS_AS(back.anatomy(Stage::kPretrained), ConfigError);
    CHECK_THROWS_AS(back.lesion(Stage::kCotrained), ConfigError);

    {
      std::ofstream bad(dir / "bad.ckpt", std::ios::binary);
      bad << "not a checkpoint";
    }
    CHECK_THROWS_AS(load_checkpoint(dir / "bad.ckpt"), FormatError);
  }

  TEST_CASE("config validation") {
    const auto cfg = parse_config("seed: 3\nmeta:\n  alpha: 0.01\n");
    CHECK(cfg.seed == 3);
    CHECK(cfg.meta.alpha == doctest::Approx(0.01));
    CHECK(parse_config(cfg.to_yaml()).hash() == cfg.hash());
    CHECK_THROWS_AS(parse_config("meta:\n  alfa: 0.01\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("meta:\n  alpha: fast\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("fills: []\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("adapt:\n  steps: 0\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("patch:\n  size: 30\n"), ConfigError);
  }
}

#include "jointseg/networks.hpp"

#include <cmath>
#include <string>

#include "jointseg/error.hpp"

namespace jointseg {
namespace {

constexpr double kBnMomentum = 0.1;
constexpr double kBnEps = 1e-5;

torch::Tensor normal_tensor(std::vector<int64_t> shape, double std, Rng& rng, torch::Dtype dtype) {
  auto t = torch::empty(shape, torch::kDouble);
  std::normal_distribution<double> dist(0.0, std);
  auto* p = t.data_ptr<double>();
  for (int64_t i = 0; i < t.numel(); ++i) p[i] = dist(rng);
  return t.to(dtype);
}

void add_conv(ParamSet& params, const std::string& name, int in, int out, int k, bool bias, Rng& rng,
              torch::Dtype dtype) {
  const double fan_in = static_cast<double>(in) * k * k * k;
  params.add(name + ".weight", normal_tensor({out, in, k, k, k}, std::sqrt(2.0 / fan_in), rng, dtype));
  if (bias) params.add(name + ".bias", torch::zeros({out}, dtype));
}

void add_bn(ParamSet& params, ParamSet& stats, const std::string& name, int channels, torch::Dtype dtype) {
  params.add(name + ".weight", torch::ones({channels}, dtype));
  params.add(name + ".bias", torch::zeros({channels}, dtype));
  stats.add(name + ".running_mean", torch::zeros({channels}, dtype));
  stats.add(name + ".running_var", torch::ones({channels}, dtype));
}

torch::Tensor conv(const torch::Tensor& x, const ParamSet& params, const std::string& name) {
  const auto& w = params.at(name + ".weight");
  const int64_t pad = w.size(2) / 2;
  const torch::Tensor bias = params.contains(name + ".bias") ? params.at(name + ".bias") : torch::Tensor();
  return torch::conv3d(x, w, bias, 1, pad);
}

torch::Tensor batch_norm(const torch::Tensor& x, const ParamSet& params, const ParamSet& stats,
                         const std::string& name, NormMode mode) {
  const auto& gamma = params.at(name + ".weight");
  const auto& beta = params.at(name + ".bias");
  switch (mode) {
    case NormMode::kRunning:
      return torch::batch_norm(x, gamma, beta, stats.at(name + ".running_mean"), stats.at(name + ".running_var"),
                               false, kBnMomentum, kBnEps, false);
    case NormMode::kBatch:
      return torch::batch_norm(x, gamma, beta, {}, {}, true, kBnMomentum, kBnEps, false);
    case NormMode::kBatchTrack: {
      // Running buffers are updated in place; they never carry gradients.
      auto mean = stats.at(name + ".running_mean");
      auto var = stats.at(name + ".running_var");
      return torch::batch_norm(x, gamma, beta, mean, var, true, kBnMomentum, kBnEps, false);
    }
  }
  return x;
}

torch::Tensor conv_block(const torch::Tensor& x, const ParamSet& params, const ParamSet& stats,
                         const std::string& prefix, int convs, NormMode mode) {
  torch::Tensor h = x;
  for (int k = 0; k < convs; ++k) {
    const std::string n = prefix + ".conv" + std::to_string(k);
    const std::string b = prefix + ".bn" + std::to_string(k);
    h = torch::relu(batch_norm(conv(h, params, n), params, stats, b, mode));
  }
  return h;
}

void add_block(ParamSet& params, ParamSet& stats, const std::string& prefix, int in, int out, int convs, Rng& rng,
               torch::Dtype dtype) {
  for (int k = 0; k < convs; ++k) {
    add_conv(params, prefix + ".conv" + std::to_string(k), k == 0 ? in : out, out, 3, false, rng, dtype);
    add_bn(params, stats, prefix + ".bn" + std::to_string(k), out, dtype);
  }
}

}  // namespace

void ExtractorConfig::validate() const {
  if (levels < 2) throw ConfigError("extractor levels must be >= 2");
  if (base_filters < 1 || feature_channels < 1 || convs_per_block < 1 || in_channels < 1) {
    throw ConfigError("extractor widths must be positive");
  }
}

Extractor init_extractor(const ExtractorConfig& cfg, Rng& rng, torch::Dtype dtype) {
  cfg.validate();
  Extractor e;
  e.cfg = cfg;
  int in = cfg.in_channels;
  for (int l = 0; l < cfg.levels; ++l) {
    const int out = cfg.base_filters << l;
    add_block(e.params, e.stats, "enc" + std::to_string(l), in, out, cfg.convs_per_block, rng, dtype);
    in = out;
  }
  for (int l = cfg.levels - 2; l >= 0; --l) {
    const int skip = cfg.base_filters << l;
    const int below = cfg.base_filters << (l + 1);
    add_block(e.params, e.stats, "dec" + std::to_string(l), below + skip, skip, cfg.convs_per_block, rng, dtype);
  }
  add_conv(e.params, "out", cfg.base_filters, cfg.feature_channels, 1, true, rng, dtype);
  return e;
}

torch::Tensor extract_features(const ExtractorConfig& cfg, const torch::Tensor& x, const ParamSet& params,
                               const ParamSet& stats, NormMode mode) {
  if (x.dim() != 5 || x.size(1) != cfg.in_channels) throw ShapeError("extractor input must be [B, C, D, H, W]");
  for (int d = 2; d < 5; ++d) {
    if (x.size(d) % cfg.divisor() != 0) {
      throw ShapeError("patch extent " + std::to_string(x.size(d)) + " not divisible by " +
                       std::to_string(cfg.divisor()));
    }
  }
  std::vector<torch::Tensor> skips;
  torch::Tensor h = x;
  for (int l = 0; l < cfg.levels; ++l) {
    h = conv_block(h, params, stats, "enc" + std::to_string(l), cfg.convs_per_block, mode);
    if (l < cfg.levels - 1) {
      skips.push_back(h);
      h = torch::max_pool3d(h, 2);
    }
  }
  for (int l = cfg.levels - 2; l >= 0; --l) {
    const auto& skip = skips[static_cast<size_t>(l)];
    h = torch::upsample_trilinear3d(h, std::vector<int64_t>{skip.size(2), skip.size(3), skip.size(4)}, false);
    h = torch::cat({h, skip}, 1);
    h = conv_block(h, params, stats, "dec" + std::to_string(l), cfg.convs_per_block, mode);
  }
  return conv(h, params, "out");
}

Head init_head(int in_channels, int classes, Rng& rng, torch::Dtype dtype) {
  Head h;
  h.in_channels = in_channels;
  h.classes = classes;
  add_conv(h.params, "cls", in_channels, classes, 1, true, rng, dtype);
  return h;
}

torch::Tensor head_logits(const torch::Tensor& features, const ParamSet& head) { return conv(features, head, "cls"); }

torch::Tensor predict_anatomy(const torch::Tensor& features, const ParamSet& g_a) {
  return torch::softmax(head_logits(features, g_a), 1);
}

torch::Tensor predict_lesion(const torch::Tensor& features, const ParamSet& g_l) {
  return torch::softmax(head_logits(features, g_l), 1);
}

Fusion init_fusion(const FusionConfig& cfg, Rng& rng, torch::Dtype dtype) {
  if (cfg.feature_channels < 1 || cfg.hidden_channels < 1 || cfg.classes < 2) {
    throw ConfigError("invalid fusion widths");
  }
  Fusion f;
  f.cfg = cfg;
  add_conv(f.params, "att.conv0", 2 * cfg.feature_channels, cfg.hidden_channels, 3, false, rng, dtype);
  add_bn(f.params, f.stats, "att.bn0", cfg.hidden_channels, dtype);
  add_conv(f.params, "att.conv1", cfg.hidden_channels, cfg.hidden_channels, 3, false, rng, dtype);
  add_bn(f.params, f.stats, "att.bn1", cfg.hidden_channels, dtype);
  add_conv(f.params, "att.conv2", cfg.hidden_channels, 1, 1, true, rng, dtype);
  add_conv(f.params, "cls", cfg.feature_channels, cfg.classes, 1, true, rng, dtype);
  return f;
}

FusionOutput fuse(const Fusion& f, const torch::Tensor& w_t1, const torch::Tensor& w_f, const ParamSet& psi,
                  NormMode mode) {
  if (w_t1.sizes() != w_f.sizes()) throw InputError("fuse: feature maps differ in shape");
  torch::Tensor h = torch::cat({w_t1, w_f}, 1);
  h = torch::relu(batch_norm(conv(h, psi, "att.conv0"), psi, f.stats, "att.bn0", mode));
  h = torch::relu(batch_norm(conv(h, psi, "att.conv1"), psi, f.stats, "att.bn1", mode));
  FusionOutput out;
  out.attention = torch::sigmoid(conv(h, psi, "att.conv2"));
  const torch::Tensor joint = w_t1 + out.attention * w_f;
  out.probs = torch::softmax(conv(joint, psi, "cls"), 1);
  return out;
}

}  // namespace jointseg

#include "jointseg/phantom.hpp"

#include <algorithm>
#include <cmath>

#include "jointseg/error.hpp"
#include "jointseg/random.hpp"

namespace jointseg {
namespace {

struct Ellipsoid {
  Vec3 centre;
  Vec3 axes;

  bool contains(const Vec3& u) const {
    double s = 0.0;
    for (size_t i = 0; i < 3; ++i) {
      const double d = (u[i] - centre[i]) / axes[i];
      s += d * d;
    }
    return s <= 1.0;
  }
};

// Vertical cylinder in normalised coordinates.
struct Cylinder {
  double cx, cy, radius, z_lo, z_hi;

  bool contains(const Vec3& u) const {
    const double dx = u[0] - cx;
    const double dy = u[1] - cy;
    return dx * dx + dy * dy <= radius * radius && u[2] >= z_lo && u[2] <= z_hi;
  }
};

struct Geometry {
  Ellipsoid brain, white_matter, cerebellum;
  Ellipsoid ventricles[2];
  Ellipsoid basal_ganglia[2];
  Cylinder brain_stem;

  int32_t classify(const Vec3& u) const {
    if (brain_stem.contains(u)) return kBrainStem;
    if (cerebellum.contains(u)) return kCerebellum;
    if (ventricles[0].contains(u) || ventricles[1].contains(u)) return kVentricles;
    if (basal_ganglia[0].contains(u) || basal_ganglia[1].contains(u)) return kBasalGanglia;
    if (white_matter.contains(u)) return kWhiteMatter;
    if (brain.contains(u)) return kGrayMatter;
    return kBackground;
  }
};

Geometry jittered_geometry(const PhantomConfig& cfg, Rng& rng) {
  const double j = cfg.jitter;
  const double scale = 1.0 + j * uniform(rng, -1.0, 1.0);
  const Vec3 shift{j * uniform(rng, -1.0, 1.0), j * uniform(rng, -1.0, 1.0), j * uniform(rng, -1.0, 1.0)};
  auto place = [&](Vec3 c, Vec3 a) {
    Ellipsoid e;
    for (size_t i = 0; i < 3; ++i) {
      e.centre[i] = c[i] * scale + shift[i] + 0.5 * j * uniform(rng, -1.0, 1.0);
      e.axes[i] = a[i] * scale * (1.0 + 0.5 * j * uniform(rng, -1.0, 1.0));
    }
    return e;
  };

  Geometry g;
  g.brain = place({0.0, 0.04, 0.15}, {0.78, 0.80, 0.62});
  g.white_matter = g.brain;
  for (size_t i = 0; i < 3; ++i) g.white_matter.axes[i] = g.brain.axes[i] - 0.20 * scale;
  g.ventricles[0] = place({-0.17, 0.02, 0.20}, {0.12, 0.30, 0.14});
  g.ventricles[1] = place({0.17, 0.02, 0.20}, {0.12, 0.30, 0.14});
  g.basal_ganglia[0] = place({-0.34, 0.08, 0.02}, {0.14, 0.18, 0.15});
  g.basal_ganglia[1] = place({0.34, 0.08, 0.02}, {0.14, 0.18, 0.15});
  g.cerebellum = place({0.0, -0.55, -0.56}, {0.45, 0.28, 0.26});
  const double r = 0.15 * scale * (1.0 + 0.5 * j * uniform(rng, -1.0, 1.0));
  g.brain_stem = {shift[0], -0.15 * scale + shift[1], r, -0.95, -0.35 * scale + shift[2]};
  return g;
}

Vec3 normalised(const PhantomConfig& cfg, int64_t x, int64_t y, int64_t z) {
  const double n = cfg.grid_size;
  return {(x + 0.5) / n * 2.0 - 1.0, (y + 0.5) / n * 2.0 - 1.0, (z + 0.5) / n * 2.0 - 1.0};
}

LabelMap rasterise(const PhantomConfig& cfg, const Geometry& g) {
  const Shape3 shape = cube(cfg.grid_size);
  LabelMap labels = LabelMap::filled(shape, kJointClassCount, kBackground);
  for (int64_t z = 0; z < shape.nz; ++z) {
    for (int64_t y = 0; y < shape.ny; ++y) {
      for (int64_t x = 0; x < shape.nx; ++x) labels.at(x, y, z) = g.classify(normalised(cfg, x, y, z));
    }
  }
  return labels;
}

Volume render(const PhantomConfig& cfg, const LabelMap& labels, const std::array<double, kJointClassCount>& means,
              Rng& rng) {
  Volume v = Volume::zeros(labels.shape);
  std::normal_distribution<double> noise(0.0, cfg.noise_std);
  for (size_t i = 0; i < v.data.size(); ++i) {
    v.data[i] = static_cast<float>(means[static_cast<size_t>(labels.data[i])] + noise(rng));
  }
  return v;
}

void require_all_classes(const LabelMap& labels) {
  const auto hist = labels.histogram();
  for (int32_t id : kAnatomyClassIds) {
    if (hist[static_cast<size_t>(id)] == 0) {
      throw ConfigError("phantom geometry leaves class '" + std::string(class_name(id)) + "' empty at this grid size");
    }
  }
}

}  // namespace

void PhantomConfig::validate() const {
  if (grid_size < 24) throw ConfigError("phantom grid_size must be >= 24");
  if (!(noise_std > 0.0)) throw ConfigError("phantom noise_std must be positive");
  for (size_t a = 0; a < kAnatomyClassIds.size(); ++a) {
    for (size_t b = a + 1; b < kAnatomyClassIds.size(); ++b) {
      const double gap = std::abs(t1_means[static_cast<size_t>(kAnatomyClassIds[a])] -
                                  t1_means[static_cast<size_t>(kAnatomyClassIds[b])]);
      if (gap < 2.0 * noise_std) {
        throw ConfigError("T1 means of '" + std::string(class_name(kAnatomyClassIds[a])) + "' and '" +
                          std::string(class_name(kAnatomyClassIds[b])) + "' closer than 2 noise std");
      }
    }
  }
  if (lesion_blobs_min < 1 || lesion_blobs_max < lesion_blobs_min) throw ConfigError("invalid lesion blob count range");
  if (!(lesion_radius_min > 0.0) || lesion_radius_max < lesion_radius_min) throw ConfigError("invalid lesion radius range");
  if (lesion_voxels_min < 1 || lesion_voxels_max < lesion_voxels_min) throw ConfigError("invalid lesion volume bounds");
  double flair_max = -1e9;
  for (int32_t id : kAnatomyClassIds) flair_max = std::max(flair_max, flair_means[static_cast<size_t>(id)]);
  if (lesion_flair - flair_max < lesion_flair_margin) throw ConfigError("lesion FLAIR not hyperintense enough");
  if (jitter < 0.0 || jitter > 0.2) throw ConfigError("jitter must lie in [0, 0.2]");
}

AnatomyPhantom generate_anatomy_phantom(const PhantomConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(splitmix64(seed ^ 0xA11A70ULL));
  const Geometry g = jittered_geometry(cfg, rng);
  AnatomyPhantom out;
  out.labels = rasterise(cfg, g);
  require_all_classes(out.labels);
  out.t1 = render(cfg, out.labels, cfg.t1_means, rng);
  return out;
}

LesionPhantom generate_lesion_phantom(const PhantomConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(splitmix64(seed ^ 0x1E5100ULL));
  const Geometry g = jittered_geometry(cfg, rng);
  LesionPhantom out;
  out.full_gt = rasterise(cfg, g);
  require_all_classes(out.full_gt);
  const Shape3 shape = out.full_gt.shape;
  const double n = cfg.grid_size;

  struct Sphere {
    Vec3 c;  // voxel units
    double r;
  };
  std::vector<Sphere> spheres;
  std::vector<float> rel_dist(static_cast<size_t>(shape.voxels()));
  for (int attempt = 0;; ++attempt) {
    if (attempt == 200) throw ConfigError("could not place a lesion within the configured volume bounds");
    spheres.clear();
    Vec3 c0;
    // Seed blob inside the inner part of the cerebrum.
    for (;;) {
      Vec3 u{uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1)};
      Ellipsoid inner = g.brain;
      for (auto& a : inner.axes) a *= 0.6;
      if (inner.contains(u)) {
        for (size_t i = 0; i < 3; ++i) c0[i] = (u[i] + 1.0) * 0.5 * n - 0.5;
        break;
      }
    }
    const double r0 = uniform(rng, cfg.lesion_radius_min, cfg.lesion_radius_max);
    spheres.push_back({c0, r0});
    const int blobs = static_cast<int>(uniform_int(rng, cfg.lesion_blobs_min, cfg.lesion_blobs_max));
    for (int b = 1; b < blobs; ++b) {
      Vec3 dir{uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1)};
      const double len = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]) + 1e-9;
      const double step = uniform(rng, 0.3, 0.9) * r0;
      Vec3 c;
      for (size_t i = 0; i < 3; ++i) c[i] = c0[i] + dir[i] / len * step;
      spheres.push_back({c, 0.8 * uniform(rng, cfg.lesion_radius_min, cfg.lesion_radius_max)});
    }

    out.lesion = LesionMask::zeros(shape);
    for (int64_t z = 0; z < shape.nz; ++z) {
      for (int64_t y = 0; y < shape.ny; ++y) {
        for (int64_t x = 0; x < shape.nx; ++x) {
          const int64_t i = shape.index(x, y, z);
          double best = 1e9;
          for (const auto& s : spheres) {
            const double dx = x - s.c[0], dy = y - s.c[1], dz = z - s.c[2];
            best = std::min(best, std::sqrt(dx * dx + dy * dy + dz * dz) / s.r);
          }
          rel_dist[static_cast<size_t>(i)] = static_cast<float>(best);
          if (best <= 1.0 && out.full_gt.data[static_cast<size_t>(i)] != kBackground) {
            out.lesion.data[static_cast<size_t>(i)] = 1;
          }
        }
      }
    }
    const int64_t count = out.lesion.count();
    if (count >= cfg.lesion_voxels_min && count <= cfg.lesion_voxels_max) break;
  }

  out.t1 = render(cfg, out.full_gt, cfg.t1_means, rng);
  out.flair = render(cfg, out.full_gt, cfg.flair_means, rng);
  std::normal_distribution<double> noise(0.0, cfg.noise_std);
  for (size_t i = 0; i < out.lesion.data.size(); ++i) {
    if (!out.lesion.data[i]) continue;
    const bool core = rel_dist[i] < cfg.lesion_core_fraction;
    out.t1.data[i] = static_cast<float>((core ? cfg.lesion_core_t1 : cfg.lesion_rim_t1) + noise(rng));
    out.flair.data[i] = static_cast<float>(cfg.lesion_flair + noise(rng));
  }
  return out;
}

void RandomFillSpec::validate() const {
  if (fill_values.empty()) throw ConfigError("fill value set is empty");
}

float RandomFillSpec::draw(uint64_t seed) const {
  validate();
  Rng rng(splitmix64(seed));
  return fill_values[static_cast<size_t>(uniform_int(rng, 0, static_cast<int64_t>(fill_values.size()) - 1))];
}

PseudoLesionSample compose_pseudo_lesion(const Volume& x_a, const LabelMap& y_a, const Volume& x_l_t1,
                                         const LesionMask& y_l) {
  require_same_shape(x_a.shape, y_a.shape, "compose_pseudo_lesion");
  require_same_shape(x_a.shape, x_l_t1.shape, "compose_pseudo_lesion");
  require_same_shape(x_a.shape, y_l.shape, "compose_pseudo_lesion");
  PseudoLesionSample s;
  s.x_p = x_a;
  s.y_p = y_a;
  s.y_p.class_count = std::max(y_a.class_count, kJointClassCount);
  for (size_t i = 0; i < y_l.data.size(); ++i) {
    if (y_l.data[i]) {
      s.x_p.data[i] = x_l_t1.data[i];
      s.y_p.data[i] = kLesion;
    }
  }
  s.y_l = y_l;
  s.hidden_y_a = y_a;
  return s;
}

Volume fill_lesion(const Volume& x, const LesionMask& mask, float fill_value) {
  require_same_shape(x.shape, mask.shape, "fill_lesion");
  Volume out = x;
  for (size_t i = 0; i < mask.data.size(); ++i) {
    if (mask.data[i]) out.data[i] = fill_value;
  }
  return out;
}

std::pair<Volume, float> randomize_lesion_content(const Volume& x, const LesionMask& mask, const RandomFillSpec& spec,
                                                  uint64_t seed) {
  const float fill = spec.draw(seed);
  return {fill_lesion(x, mask, fill), fill};
}

}  // namespace jointseg

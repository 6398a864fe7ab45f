#include "jointseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "jointseg/error.hpp"

namespace jointseg {

double dice_score(const LabelMap& pred, const LabelMap& gt, int32_t class_id) {
  require_same_shape(pred.shape, gt.shape, "dice_score");
  int64_t p = 0, g = 0, both = 0;
  for (size_t i = 0; i < pred.data.size(); ++i) {
    const bool in_p = pred.data[i] == class_id;
    const bool in_g = gt.data[i] == class_id;
    p += in_p;
    g += in_g;
    both += in_p && in_g;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

double dice_score(const LesionMask& pred, const LesionMask& gt) {
  require_same_shape(pred.shape, gt.shape, "dice_score");
  int64_t p = 0, g = 0, both = 0;
  for (size_t i = 0; i < pred.data.size(); ++i) {
    p += pred.data[i] != 0;
    g += gt.data[i] != 0;
    both += pred.data[i] && gt.data[i];
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

LesionMask surface(const LesionMask& mask) {
  const Shape3 s = mask.shape;
  LesionMask out = LesionMask::zeros(s);
  auto inside = [&](int64_t x, int64_t y, int64_t z) {
    if (x < 0 || y < 0 || z < 0 || x >= s.nx || y >= s.ny || z >= s.nz) return false;
    return mask.at(x, y, z) != 0;
  };
  for (int64_t z = 0; z < s.nz; ++z) {
    for (int64_t y = 0; y < s.ny; ++y) {
      for (int64_t x = 0; x < s.nx; ++x) {
        if (!mask.at(x, y, z)) continue;
        const bool interior = inside(x - 1, y, z) && inside(x + 1, y, z) && inside(x, y - 1, z) &&
                              inside(x, y + 1, z) && inside(x, y, z - 1) && inside(x, y, z + 1);
        out.at(x, y, z) = interior ? 0 : 1;
      }
    }
  }
  return out;
}

namespace {

// Lower envelope of parabolas (Felzenszwalb & Huttenlocher), in place along
// one strided line with sample spacing h.
void edt_line(std::vector<double>& f, int64_t n, int64_t start, int64_t stride, double h, std::vector<double>& buf,
              std::vector<int64_t>& v, std::vector<double>& zb) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  buf.resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) buf[static_cast<size_t>(i)] = f[static_cast<size_t>(start + i * stride)];
  v.assign(static_cast<size_t>(n), 0);
  zb.assign(static_cast<size_t>(n + 1), 0.0);
  int64_t k = -1;
  for (int64_t q = 0; q < n; ++q) {
    if (std::isinf(buf[static_cast<size_t>(q)])) continue;
    const double pq = q * h;
    for (;;) {
      if (k < 0) {
        k = 0;
        v[0] = q;
        zb[0] = -kInf;
        zb[1] = kInf;
        break;
      }
      const int64_t r = v[static_cast<size_t>(k)];
      const double pr = r * h;
      const double sv = ((buf[static_cast<size_t>(q)] + pq * pq) - (buf[static_cast<size_t>(r)] + pr * pr)) / (2.0 * (pq - pr));
      if (sv <= zb[static_cast<size_t>(k)]) {
        --k;
        continue;
      }
      ++k;
      v[static_cast<size_t>(k)] = q;
      zb[static_cast<size_t>(k)] = sv;
      zb[static_cast<size_t>(k + 1)] = kInf;
      break;
    }
  }
  if (k < 0) return;  // all infinite: leave as is
  int64_t j = 0;
  for (int64_t q = 0; q < n; ++q) {
    const double pq = q * h;
    while (zb[static_cast<size_t>(j + 1)] < pq) ++j;
    const int64_t r = v[static_cast<size_t>(j)];
    const double d = pq - r * h;
    f[static_cast<size_t>(start + q * stride)] = d * d + buf[static_cast<size_t>(r)];
  }
}

}  // namespace

std::vector<double> squared_distance_transform(const LesionMask& mask, const Vec3& spacing) {
  const Shape3 s = mask.shape;
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> f(static_cast<size_t>(s.voxels()));
  for (size_t i = 0; i < f.size(); ++i) f[i] = mask.data[i] ? 0.0 : kInf;
  std::vector<double> buf, zb;
  std::vector<int64_t> v;
  for (int64_t z = 0; z < s.nz; ++z) {
    for (int64_t y = 0; y < s.ny; ++y) edt_line(f, s.nx, s.index(0, y, z), 1, spacing[0], buf, v, zb);
  }
  for (int64_t z = 0; z < s.nz; ++z) {
    for (int64_t x = 0; x < s.nx; ++x) edt_line(f, s.ny, s.index(x, 0, z), s.nx, spacing[1], buf, v, zb);
  }
  for (int64_t y = 0; y < s.ny; ++y) {
    for (int64_t x = 0; x < s.nx; ++x) edt_line(f, s.nz, s.index(x, y, 0), s.nx * s.ny, spacing[2], buf, v, zb);
  }
  return f;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw InputError("percentile of an empty sample");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<size_t>(std::floor(pos));
  const size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + (values[hi] - values[lo]) * frac;
}

std::optional<double> hd95(const LesionMask& pred, const LesionMask& gt, const Vec3& spacing) {
  require_same_shape(pred.shape, gt.shape, "hd95");
  if (pred.empty() || gt.empty()) return std::nullopt;
  const LesionMask sp = surface(pred);
  const LesionMask sg = surface(gt);
  const auto to_gt = squared_distance_transform(sg, spacing);
  const auto to_pred = squared_distance_transform(sp, spacing);
  std::vector<double> pooled;
  for (size_t i = 0; i < sp.data.size(); ++i) {
    if (sp.data[i]) pooled.push_back(std::sqrt(to_gt[i]));
    if (sg.data[i]) pooled.push_back(std::sqrt(to_pred[i]));
  }
  return percentile(std::move(pooled), 0.95);
}

LabelMap majority_vote(std::span<const LabelMap> predictions) {
  if (predictions.empty()) throw InputError("majority_vote: no predictions");
  const LabelMap& first = predictions.front();
  for (const auto& p : predictions) {
    require_same_shape(first.shape, p.shape, "majority_vote");
    if (p.class_count != first.class_count) throw InputError("majority_vote: class_count mismatch");
  }
  LabelMap out = LabelMap::filled(first.shape, first.class_count, 0);
  std::vector<int32_t> votes(static_cast<size_t>(first.class_count));
  for (size_t i = 0; i < first.data.size(); ++i) {
    std::fill(votes.begin(), votes.end(), 0);
    for (const auto& p : predictions) {
      const int32_t v = p.data[i];
      if (v < 0 || v >= first.class_count) throw InputError("majority_vote: label out of range");
      ++votes[static_cast<size_t>(v)];
    }
    // max_element returns the first maximum, i.e. the lowest id on ties.
    out.data[i] = static_cast<int32_t>(std::max_element(votes.begin(), votes.end()) - votes.begin());
  }
  return out;
}

std::optional<double> region_mean_dice(const LabelMap& pred, const LabelMap& gt, const LesionMask& region) {
  require_same_shape(pred.shape, gt.shape, "region_mean_dice");
  require_same_shape(pred.shape, region.shape, "region_mean_dice");
  const int classes = std::max(pred.class_count, gt.class_count);
  std::vector<int64_t> p(static_cast<size_t>(classes), 0), g(p), both(p);
  for (size_t i = 0; i < gt.data.size(); ++i) {
    if (!region.data[i]) continue;
    ++p[static_cast<size_t>(pred.data[i])];
    ++g[static_cast<size_t>(gt.data[i])];
    if (pred.data[i] == gt.data[i]) ++both[static_cast<size_t>(gt.data[i])];
  }
  double sum = 0.0;
  int n = 0;
  for (int c = 0; c < classes; ++c) {
    if (g[static_cast<size_t>(c)] == 0) continue;
    sum += 2.0 * static_cast<double>(both[static_cast<size_t>(c)]) /
           static_cast<double>(p[static_cast<size_t>(c)] + g[static_cast<size_t>(c)]);
    ++n;
  }
  if (n == 0) return std::nullopt;
  return sum / n;
}

}  // namespace jointseg

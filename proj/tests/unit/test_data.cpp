#include <doctest.h>
#include <zlib.h>

#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include "helpers.hpp"
#include "jointseg/dataset.hpp"
#include "jointseg/error.hpp"
#include "jointseg/labels.hpp"
#include "jointseg/nifti.hpp"
#include "jointseg/phantom.hpp"
#include "jointseg/preprocess.hpp"

using namespace jointseg;

TEST_SUITE("oracle") {
  TEST_CASE("freesurfer reduction follows the published listing") {
    // Transcribed from the label-assignment listing; order matters only for
    // the catch-all.
    const std::map<int, std::vector<int>> listing = {
        {0, {0, 1, 24, 6, 40, 45, 15}},
        {3, {2, 41, 251, 252, 253, 254, 255, 30, 62, 77}},
        {2, {9, 10, 11, 12, 13, 17, 18, 26, 48, 49, 50, 51, 52, 53, 54, 58}},
        {4, {25, 57}},
        {5, {4, 5, 14, 43, 44, 72, 31, 63}},
        {6, {7, 8, 46, 47}},
        {7, {16, 28, 60}},
    };
    const auto table = MappingTable::freesurfer();
    std::set<int> listed;
    for (const auto& [target, ids] : listing) {
      for (int id : ids) {
        CHECK_MESSAGE(table.map(id) == target, "id " << id);
        listed.insert(id);
      }
    }
    for (int id : {3, 42, 1034, 2035, 1000, 99}) {
      if (!listed.count(id)) CHECK(table.map(id) == 1);
    }
    CHECK(table.map(2) == 3);
    CHECK(table.map(16) == 7);
    CHECK(table.map(1034) == 1);
    CHECK(table.map(0) == 0);
  }

  TEST_CASE("remap_labels is total, rejects negatives, identity is a no-op") {
    auto raw = LabelMap::filled({3, 2, 1}, 2100, 0);
    raw.data = {0, 2, 16, 1034, 57, 44};
    const auto out = remap_labels(raw, MappingTable::freesurfer());
    CHECK(out.data == std::vector<int32_t>{0, 3, 7, 1, 4, 5});
    CHECK(out.class_count == 8);
    const auto again = remap_labels(out, MappingTable::identity(8));
    CHECK(again.data == out.data);
    raw.data[0] = -1;
    CHECK_THROWS_AS(remap_labels(raw, MappingTable::freesurfer()), InputError);
  }

  TEST_CASE("one_hot matches a per-voxel construction and argmax inverts it") {
    std::mt19937_64 rng(3);
    const auto y = testutil::random_labels(cube(4), 5, rng);
    const auto oh = one_hot(y, 5);
    for (int64_t i = 0; i < y.shape.voxels(); ++i) {
      for (int c = 0; c < 5; ++c) CHECK(oh.at(c, i) == (y.data[static_cast<size_t>(i)] == c ? 1.0f : 0.0f));
    }
    CHECK(argmax(oh).data == y.data);
    auto single = LabelMap::filled({1, 1, 1}, 2, 1);
    const auto two = one_hot(single, 2);
    CHECK(two.data == std::vector<float>{0.0f, 1.0f});
    CHECK_THROWS_AS(one_hot(y, 3), InputError);
  }

  TEST_CASE("patch grid matches a stride enumeration oracle") {
    auto oracle = [](int64_t extent, int p, int overlap) {
      std::vector<int64_t> o;
      if (extent <= p) return std::vector<int64_t>{0};
      for (int64_t s = 0;; s += p - overlap) {
        if (s + p >= extent) {
          o.push_back(extent - p);
          break;
        }
        o.push_back(s);
      }
      return o;
    };
    const PatchSpec spec{32, 20};
    CHECK(axis_offsets(40, spec) == std::vector<int64_t>{0, 8});
    CHECK(axis_offsets(33, spec) == std::vector<int64_t>{0, 1});
    CHECK(axis_offsets(32, spec) == std::vector<int64_t>{0});
    for (int64_t e = 1; e < 120; ++e) CHECK(axis_offsets(e, spec) == oracle(e, 32, 20));
    const auto grid = plan_patches(cube(40), spec);
    CHECK(grid.offsets.size() == 8);
    // Full coverage including borders.
    std::vector<int> cover(static_cast<size_t>(cube(40).voxels()), 0);
    for (const auto& o : grid.offsets) {
      for (int z = 0; z < 32; ++z)
        for (int y = 0; y < 32; ++y)
          for (int x = 0; x < 32; ++x) ++cover[static_cast<size_t>(cube(40).index(o[0] + x, o[1] + y, o[2] + z))];
    }
    for (int c : cover) CHECK(c >= 1);
  }

  TEST_CASE("reassemble averages overlapping patches") {
    const PatchSpec spec{4, 2};
    const Shape3 shape{6, 4, 4};
    const auto grid = plan_patches(shape, spec);
    REQUIRE(grid.offsets.size() == 2);
    auto p = ProbabilityMap::zeros(2, cube(4));
    auto q = ProbabilityMap::zeros(2, cube(4));
    for (int64_t i = 0; i < 64; ++i) {
      p.at(0, i) = 0.2f;
      p.at(1, i) = 0.8f;
      q.at(0, i) = 0.6f;
      q.at(1, i) = 0.4f;
    }
    const auto out = reassemble({p, q}, grid.offsets, spec, shape);
    // x = 2,3 are covered by both patches.
    CHECK(out.at(0, shape.index(2, 1, 1)) == doctest::Approx((0.2 + 0.6) / 2).epsilon(1e-7));
    CHECK(out.at(1, shape.index(0, 1, 1)) == doctest::Approx(0.8).epsilon(1e-7));
    CHECK(out.at(1, shape.index(5, 1, 1)) == doctest::Approx(0.4).epsilon(1e-7));
    CHECK(out.max_normalization_error() < 1e-5);
    CHECK_THROWS_AS(reassemble({p}, {grid.offsets[0]}, spec, shape), CoverageError);
  }

  TEST_CASE("extract + reassemble of a constant predictor is constant") {
    std::mt19937_64 rng(5);
    auto v = testutil::random_volume({37, 33, 40}, rng);
    const PatchSpec spec{32, 20};
    const auto patches = extract_patches(v, spec);
    std::vector<ProbabilityMap> probs;
    std::vector<Offset3> offs;
    for (const auto& p : patches) {
      auto pm = ProbabilityMap::zeros(3, cube(32));
      for (int64_t i = 0; i < pm.shape.voxels(); ++i) {
        pm.at(0, i) = 0.25f;
        pm.at(1, i) = 0.5f;
        pm.at(2, i) = 0.25f;
      }
      probs.push_back(pm);
      offs.push_back(p.offset);
    }
    const auto out = reassemble(probs, offs, spec, v.shape);
    for (int64_t i = 0; i < v.shape.voxels(); ++i) CHECK(out.at(1, i) == doctest::Approx(0.5).epsilon(1e-6));
  }

  TEST_CASE("zscore statistics match a direct recomputation") {
    std::mt19937_64 rng(11);
    auto v = testutil::random_volume(cube(8), rng);
    for (auto& x : v.data) x = x * 3.0f + 7.0f;
    const auto z = zscore_normalize(v);
    double mean = 0.0, var = 0.0;
    for (float x : z.data) mean += x;
    mean /= static_cast<double>(z.data.size());
    for (float x : z.data) var += (x - mean) * (x - mean);
    var /= static_cast<double>(z.data.size());
    CHECK(std::abs(mean) < 1e-5);
    CHECK(std::abs(std::sqrt(var) - 1.0) < 1e-5);
    const auto again = zscore_normalize(z);
    for (size_t i = 0; i < z.data.size(); ++i) CHECK(std::abs(again.data[i] - z.data[i]) < 1e-5);
    auto constant = Volume::zeros(cube(4));
    CHECK_THROWS_AS(zscore_normalize(constant), DegenerateInputError);
    auto mask = LesionMask::zeros(cube(8));
    mask.data[0] = 1;
    CHECK_THROWS_AS(zscore_normalize(v, &mask), DegenerateInputError);
  }

  TEST_CASE("pseudo-lesion composition is an exact voxel select") {
    std::mt19937_64 rng(17);
    const Shape3 s = cube(4);
    const auto x_a = testutil::random_volume(s, rng);
    const auto x_l = testutil::random_volume(s, rng);
    auto y_a = testutil::random_labels(s, 8, rng);
    for (auto& v : y_a.data) v = v == kLesion ? kGrayMatter : v;
    const auto y_l = testutil::random_mask(s, rng);
    const auto ps = compose_pseudo_lesion(x_a, y_a, x_l, y_l);
    for (size_t i = 0; i < x_a.data.size(); ++i) {
      const bool in = y_l.data[i] != 0;
      CHECK(ps.x_p.data[i] == (in ? x_l.data[i] : x_a.data[i]));
      CHECK(ps.y_p.data[i] == (in ? static_cast<int32_t>(kLesion) : y_a.data[i]));
      CHECK(ps.hidden_y_a.data[i] == y_a.data[i]);
    }
    const auto none = compose_pseudo_lesion(x_a, y_a, x_l, LesionMask::zeros(s));
    CHECK(none.x_p.data == x_a.data);
    CHECK(none.y_p.data == y_a.data);
    const auto all = compose_pseudo_lesion(x_a, y_a, x_l, LesionMask::ones(s));
    CHECK(all.x_p.data == x_l.data);
    for (int32_t v : all.y_p.data) CHECK(v == kLesion);
    CHECK_THROWS_AS(compose_pseudo_lesion(x_a, y_a, testutil::random_volume(cube(3), rng), y_l), ShapeError);
  }

  TEST_CASE("lesion randomisation: fill from the set, untouched outside") {
    std::mt19937_64 rng(19);
    const Shape3 s = cube(5);
    const auto x = testutil::random_volume(s, rng);
    const RandomFillSpec spec;
    CHECK(spec.fill_values == std::vector<float>{-5, -2, -1, 1, 2, 5});
    const auto mask = testutil::random_mask(s, rng);
    std::set<float> seen;
    for (uint64_t seed = 0; seed < 200; ++seed) {
      const auto [xt, fill] = randomize_lesion_content(x, mask, spec, seed);
      CHECK(std::count(spec.fill_values.begin(), spec.fill_values.end(), fill) == 1);
      seen.insert(fill);
      for (size_t i = 0; i < x.data.size(); ++i) CHECK(xt.data[i] == (mask.data[i] ? fill : x.data[i]));
    }
    CHECK(seen.size() == 6);
    const auto [same, f0] = randomize_lesion_content(x, LesionMask::zeros(s), spec, 1);
    CHECK(same.data == x.data);
    auto one = LesionMask::zeros(s);
    one.data[7] = 1;
    const auto single = fill_lesion(x, one, 5.0f);
    int changed = 0;
    for (size_t i = 0; i < x.data.size(); ++i) changed += single.data[i] != x.data[i];
    CHECK(changed == 1);
    CHECK(single.data[7] == 5.0f);
    RandomFillSpec empty;
    empty.fill_values.clear();
    CHECK_THROWS_AS(randomize_lesion_content(x, mask, empty, 0), ConfigError);
  }
}

TEST_SUITE("contract") {
  TEST_CASE("NIfTI round trip, spacing, gzip and truncation") {
    const auto dir = testutil::temp_dir("nifti");
    std::mt19937_64 rng(23);
    auto v = testutil::random_volume(cube(4), rng);
    v.spacing = {1, 1, 1};
    for (const char* name : {"v.nii", "v.nii.gz"}) {
      save_volume(dir / name, v);
      const auto [back, meta] = load_volume(dir / name);
      CHECK(back.data == v.data);
      CHECK(back.spacing == Vec3{1, 1, 1});
      CHECK(back.shape == v.shape);
    }
    auto l = testutil::random_labels({3, 4, 5}, 8, rng);
    save_labels(dir / "l.nii.gz", l);
    CHECK(load_labels(dir / "l.nii.gz").data == l.data);
    auto m = testutil::random_mask({5, 4, 3}, rng);
    save_mask(dir / "m.nii.gz", m);
    CHECK(load_mask(dir / "m.nii.gz").data == m.data);

    auto pm = ProbabilityMap::zeros(3, {2, 3, 4});
    for (size_t i = 0; i < pm.data.size(); ++i) pm.data[i] = static_cast<float>(i) * 0.5f;
    save_probability_map(dir / "p.nii.gz", pm);
    const auto pb = load_probability_map(dir / "p.nii.gz");
    CHECK(pb.channels == 3);
    CHECK(pb.data == pm.data);
    CHECK_THROWS_AS(load_volume(dir / "p.nii.gz"), ShapeError);

    std::ifstream in(dir / "v.nii", std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    for (size_t cut : {size_t{100}, bytes.size() - 10}) {
      std::ofstream out(dir / "t.nii", std::ios::binary);
      out.write(bytes.data(), static_cast<std::streamsize>(cut));
      out.close();
      CHECK_THROWS_AS(load_volume(dir / "t.nii"), FormatError);
    }
  }

  TEST_CASE("anatomy phantoms: deterministic, all classes, calibrated means") {
    PhantomConfig cfg;
    const auto a = generate_anatomy_phantom(cfg, 42);
    const auto b = generate_anatomy_phantom(cfg, 42);
    CHECK(a.t1.data == b.t1.data);
    CHECK(a.labels.data == b.labels.data);
    const auto hist = a.labels.histogram();
    for (int32_t id : kAnatomyClassIds) CHECK(hist[static_cast<size_t>(id)] > 0);
    CHECK(hist[kLesion] == 0);
    std::vector<double> sum(8, 0.0);
    for (size_t i = 0; i < a.t1.data.size(); ++i) sum[static_cast<size_t>(a.labels.data[i])] += a.t1.data[i];
    for (int32_t id : kAnatomyClassIds) {
      const double mean = sum[static_cast<size_t>(id)] / static_cast<double>(hist[static_cast<size_t>(id)]);
      CHECK_MESSAGE(std::abs(mean - cfg.t1_means[static_cast<size_t>(id)]) < cfg.noise_std, class_name(id));
    }
    PhantomConfig bad = cfg;
    bad.grid_size = 16;
    CHECK_THROWS_AS(generate_anatomy_phantom(bad, 1), ConfigError);
  }

  TEST_CASE("lesion phantoms: bounded volume, hyperintense FLAIR") {
    PhantomConfig cfg;
    for (uint64_t seed = 0; seed < 8; ++seed) {
      const auto p = generate_lesion_phantom(cfg, seed);
      const int64_t n = p.lesion.count();
      CHECK(n >= cfg.lesion_voxels_min);
      CHECK(n <= cfg.lesion_voxels_max);
      double in = 0.0, out = 0.0;
      for (size_t i = 0; i < p.flair.data.size(); ++i) (p.lesion.data[i] ? in : out) += p.flair.data[i];
      in /= static_cast<double>(n);
      out /= static_cast<double>(p.flair.data.size() - static_cast<size_t>(n));
      CHECK(in - out >= cfg.lesion_flair_margin);
      for (size_t i = 0; i < p.full_gt.data.size(); ++i) CHECK(p.full_gt.data[i] != kLesion);
    }
    CHECK(generate_lesion_phantom(cfg, 3).t1.data == generate_lesion_phantom(cfg, 3).t1.data);
  }

  TEST_CASE("corpus keeps the two label sets disjoint") {
    PhantomConfig cfg;
    const auto corpus = synthesize_corpus(cfg, {2, 1, 1}, {2, 1, 1}, 9);
    for (const auto& s : corpus.anatomy) {
      CHECK(s.anatomy.has_value());
      CHECK_FALSE(s.lesion.has_value());
      CHECK_FALSE(s.flair.has_value());
    }
    for (const auto& s : corpus.lesion) {
      CHECK_FALSE(s.anatomy.has_value());
      CHECK(s.lesion.has_value());
      CHECK(s.flair.has_value());
      CHECK(corpus.sidecar.count(s.id) == 1);
    }
    const auto dir = testutil::temp_dir("corpus");
    write_corpus(corpus, dir);
    const auto anat = load_dataset(dir / "anatomy.jsonl");
    const auto les = load_dataset(dir / "lesion.jsonl");
    REQUIRE(anat.size() == 4);
    REQUIRE(les.size() == 4);
    CHECK(anat[0].t1.data == corpus.anatomy[0].t1.data);
    CHECK(les[1].lesion->data == corpus.lesion[1].lesion->data);
    CHECK(les[1].split == corpus.lesion[1].split);
    const auto sidecar = load_sidecar(dir / "eval_sidecar.json");
    CHECK(sidecar.at(les[0].id).data == corpus.sidecar.at(les[0].id).data);
    for (const auto& r : read_manifest(dir / "lesion.jsonl")) CHECK_FALSE(r.anatomy_labels.has_value());
  }
}

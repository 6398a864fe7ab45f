#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "jointseg/volume.hpp"

namespace testutil {

inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("jointseg_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline jointseg::LesionMask random_mask(const jointseg::Shape3& s, std::mt19937_64& rng, double p = 0.3) {
  std::bernoulli_distribution b(p);
  auto m = jointseg::LesionMask::zeros(s);
  for (auto& v : m.data) v = b(rng) ? 1 : 0;
  return m;
}

inline jointseg::LabelMap random_labels(const jointseg::Shape3& s, int classes, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(0, classes - 1);
  auto m = jointseg::LabelMap::filled(s, classes, 0);
  for (auto& v : m.data) v = d(rng);
  return m;
}

inline jointseg::Volume random_volume(const jointseg::Shape3& s, std::mt19937_64& rng) {
  std::normal_distribution<float> n(0.0f, 1.0f);
  auto v = jointseg::Volume::zeros(s);
  for (auto& x : v.data) x = n(rng);
  return v;
}

}  // namespace testutil

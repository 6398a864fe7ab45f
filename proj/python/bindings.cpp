#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "jointseg/config.hpp"
#include "jointseg/dataset.hpp"
#include "jointseg/error.hpp"
#include "jointseg/experiments.hpp"
#include "jointseg/labels.hpp"
#include "jointseg/metrics.hpp"
#include "jointseg/nifti.hpp"

namespace py = pybind11;
using namespace jointseg;

namespace {

// Arrays are (z, y, x), which is the library's storage order.
template <typename T>
using Array = py::array_t<T, py::array::c_style | py::array::forcecast>;

template <typename T>
Shape3 shape_of(const Array<T>& a) {
  if (a.ndim() != 3) throw ShapeError("expected a 3-D array, got " + std::to_string(a.ndim()) + " dimensions");
  return {a.shape(2), a.shape(1), a.shape(0)};
}

template <typename T>
py::array_t<T> to_array(const std::vector<T>& data, const Shape3& s) {
  py::array_t<T> out({s.nz, s.ny, s.nx});
  std::copy(data.begin(), data.end(), out.mutable_data());
  return out;
}

LabelMap labels_from(const Array<int32_t>& a) {
  LabelMap m;
  m.shape = shape_of(a);
  m.data.assign(a.data(), a.data() + a.size());
  const auto top = m.data.empty() ? 0 : *std::max_element(m.data.begin(), m.data.end());
  m.class_count = std::max(top + 1, kJointClassCount);
  m.validate();
  return m;
}

LesionMask mask_from(const Array<uint8_t>& a) {
  LesionMask m;
  m.shape = shape_of(a);
  m.data.assign(a.data(), a.data() + a.size());
  for (auto& v : m.data) v = v != 0;
  return m;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Joint anatomy and lesion segmentation: metrics, I/O and lesion-mask tools";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<InputError>(m, "InputError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);

  m.attr("LESION") = static_cast<int>(kLesion);
  m.attr("JOINT_CLASSES") = kJointClassCount;

  m.def("class_name", [](int id) { return std::string(class_name(id)); });

  m.def(
      "dice", [](const Array<int32_t>& pred, const Array<int32_t>& gt, int class_id) {
        return dice_score(labels_from(pred), labels_from(gt), class_id);
      },
      py::arg("pred"), py::arg("gt"), py::arg("class_id"), "Hard Dice for one class; 1.0 when absent from both.");

  m.def(
      "hd95",
      [](const Array<uint8_t>& pred, const Array<uint8_t>& gt, std::array<double, 3> spacing) {
        return hd95(mask_from(pred), mask_from(gt), spacing);
      },
      py::arg("pred"), py::arg("gt"), py::arg("spacing") = std::array<double, 3>{1, 1, 1},
      "95th percentile surface distance in mm, or None when either mask is empty. Spacing is (x, y, z).");

  m.def(
      "majority_vote",
      [](const std::vector<Array<int32_t>>& maps) {
        if (maps.empty()) throw InputError("majority_vote needs at least one map");
        std::vector<LabelMap> ls;
        for (const auto& a : maps) ls.push_back(labels_from(a));
        const auto v = majority_vote(ls);
        return to_array(v.data, v.shape);
      },
      py::arg("maps"));

  m.def(
      "degrade_lesion_mask",
      [](const Array<uint8_t>& mask, double retain, int block, uint64_t seed) {
        const auto r = degrade_lesion_mask(mask_from(mask), {retain, block, seed});
        return py::make_tuple(to_array(r.mask.data, r.mask.shape), r.achieved);
      },
      py::arg("mask"), py::arg("retain"), py::arg("block") = 10, py::arg("seed") = 0,
      "Removes grid-aligned blocks until `retain` of the lesion is left. Returns (mask, achieved fraction).");

  m.def(
      "load_volume",
      [](const std::filesystem::path& path) {
        const auto v = load_volume(path).first;
        return py::make_tuple(to_array(v.data, v.shape), v.spacing);
      },
      py::arg("path"), "Reads NIfTI intensities as float32 (z, y, x) plus the (x, y, z) spacing.");

  m.def(
      "load_labels",
      [](const std::filesystem::path& path) {
        const auto l = load_labels(path);
        return to_array(l.data, l.shape);
      },
      py::arg("path"));

  m.def(
      "save_labels",
      [](const std::filesystem::path& path, const Array<int32_t>& labels, std::array<double, 3> spacing) {
        save_labels(path, labels_from(labels), spacing);
      },
      py::arg("path"), py::arg("labels"), py::arg("spacing") = std::array<double, 3>{1, 1, 1});

  m.def(
      "config_hash",
      [](const std::string& yaml_text) { return hex64(parse_config(yaml_text).hash()); }, py::arg("yaml_text"),
      "Validates a YAML configuration and returns its canonical hash.");

  m.def(
      "default_config", [] { return PipelineConfig{}.to_yaml(); }, "Canonical YAML of the built-in configuration.");

  m.def(
      "synth_data",
      [](const std::filesystem::path& dir, const std::string& yaml_text) {
        const auto cfg = yaml_text.empty() ? PipelineConfig{} : parse_config(yaml_text);
        write_corpus(synthesize_corpus(cfg.phantom, cfg.anatomy_counts, cfg.lesion_counts, cfg.seed), dir);
      },
      py::arg("dir"), py::arg("yaml_text") = "", "Writes the phantom corpus and its manifests under `dir`.");
}

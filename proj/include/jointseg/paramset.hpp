#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace jointseg {

// Named, ordered parameter tensors. Copies share storage (tensor handles);
// use clone() for an independent copy. Arithmetic returns a new set and
// keeps the autograd graph, so an adapted set can be differentiated back to
// the one it was derived from.
class ParamSet {
 public:
  void add(std::string name, torch::Tensor value);

  size_t size() const { return tensors_.size(); }
  bool empty() const { return tensors_.empty(); }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<torch::Tensor>& tensors() const { return tensors_; }
  std::vector<torch::Tensor>& tensors() { return tensors_; }

  bool contains(std::string_view name) const;
  const torch::Tensor& at(std::string_view name) const;
  torch::Tensor& at(std::string_view name);

  int64_t numel() const;
  bool same_structure(const ParamSet& other) const;

  // Detached deep copy.
  ParamSet clone() const;
  // Detached deep copies marked as autograd leaves.
  ParamSet leaves() const;
  // Same names, new values.
  ParamSet with_values(std::vector<torch::Tensor> values) const;
  // this - step * direction, elementwise per tensor.
  ParamSet minus_scaled(const std::vector<torch::Tensor>& direction, double step) const;
  ParamSet to(torch::Dtype dtype) const;

  // FNV-1a over names, shapes and raw bytes: equal hashes for bit-identical sets.
  uint64_t content_hash() const;
  bool bit_equal(const ParamSet& other) const;

 private:
  std::vector<std::string> names_;
  std::vector<torch::Tensor> tensors_;
  std::unordered_map<std::string, size_t> index_;
};

}  // namespace jointseg

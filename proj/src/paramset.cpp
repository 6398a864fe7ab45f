#include "jointseg/paramset.hpp"

#include "jointseg/error.hpp"
#include "jointseg/random.hpp"

namespace jointseg {

void ParamSet::add(std::string name, torch::Tensor value) {
  if (index_.contains(name)) throw InputError("duplicate parameter name '" + name + "'");
  index_.emplace(name, tensors_.size());
  names_.push_back(std::move(name));
  tensors_.push_back(std::move(value));
}

bool ParamSet::contains(std::string_view name) const { return index_.contains(std::string(name)); }

const torch::Tensor& ParamSet::at(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw InputError("unknown parameter '" + std::string(name) + "'");
  return tensors_[it->second];
}

torch::Tensor& ParamSet::at(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw InputError("unknown parameter '" + std::string(name) + "'");
  return tensors_[it->second];
}

int64_t ParamSet::numel() const {
  int64_t n = 0;
  for (const auto& t : tensors_) n += t.numel();
  return n;
}

bool ParamSet::same_structure(const ParamSet& other) const {
  if (names_ != other.names_) return false;
  for (size_t i = 0; i < tensors_.size(); ++i) {
    if (tensors_[i].sizes() != other.tensors_[i].sizes()) return false;
  }
  return true;
}

ParamSet ParamSet::clone() const {
  ParamSet out;
  for (size_t i = 0; i < tensors_.size(); ++i) out.add(names_[i], tensors_[i].detach().clone());
  return out;
}

ParamSet ParamSet::leaves() const {
  ParamSet out;
  for (size_t i = 0; i < tensors_.size(); ++i) out.add(names_[i], tensors_[i].detach().clone().requires_grad_(true));
  return out;
}

ParamSet ParamSet::with_values(std::vector<torch::Tensor> values) const {
  if (values.size() != tensors_.size()) throw InputError("with_values: tensor count mismatch");
  ParamSet out;
  for (size_t i = 0; i < values.size(); ++i) {
    if (values[i].sizes() != tensors_[i].sizes()) throw ShapeError("with_values: shape mismatch for " + names_[i]);
    out.add(names_[i], std::move(values[i]));
  }
  return out;
}

ParamSet ParamSet::minus_scaled(const std::vector<torch::Tensor>& direction, double step) const {
  if (direction.size() != tensors_.size()) throw InputError("minus_scaled: tensor count mismatch");
  ParamSet out;
  for (size_t i = 0; i < tensors_.size(); ++i) {
    if (!direction[i].defined()) {
      out.add(names_[i], tensors_[i]);
      continue;
    }
    out.add(names_[i], tensors_[i] - step * direction[i]);
  }
  return out;
}

ParamSet ParamSet::to(torch::Dtype dtype) const {
  ParamSet out;
  for (size_t i = 0; i < tensors_.size(); ++i) out.add(names_[i], tensors_[i].detach().to(dtype).clone());
  return out;
}

uint64_t ParamSet::content_hash() const {
  uint64_t h = fnv1a("paramset");
  for (size_t i = 0; i < tensors_.size(); ++i) {
    h = fnv1a(names_[i], h);
    const auto t = tensors_[i].detach().contiguous().cpu();
    for (int64_t s : t.sizes()) h = fnv1a(std::to_string(s), h);
    const auto* bytes = static_cast<const char*>(t.data_ptr());
    h = fnv1a(std::string_view(bytes, static_cast<size_t>(t.numel() * t.element_size())), h);
  }
  return h;
}

bool ParamSet::bit_equal(const ParamSet& other) const {
  if (!same_structure(other)) return false;
  for (size_t i = 0; i < tensors_.size(); ++i) {
    if (!torch::equal(tensors_[i].detach(), other.tensors_[i].detach())) return false;
  }
  return true;
}

}  // namespace jointseg

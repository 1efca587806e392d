// SPDX-License-Identifier: Apache-2.0
#include "cchp/parameters.hpp"

#include <stdexcept>

namespace cchp {

std::size_t ParameterStore::add(std::string name, Matrix value) {
  if (index_.contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  index_.emplace(name, params_.size());
  params_.push_back(Parameter{std::move(name), std::move(value), Matrix()});
  return params_.size() - 1;
}

const Parameter* ParameterStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &params_[it->second];
}

Parameter* ParameterStore::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &params_[it->second];
}

std::size_t ParameterStore::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

void ParameterStore::zero_grad() const {
  for (const auto& p : params_) p.grad = Matrix::Zero(p.value.rows(), p.value.cols());
}

bool ParameterStore::all_finite() const {
  for (const auto& p : params_) {
    if (!p.value.allFinite()) return false;
  }
  return true;
}

}  // namespace cchp

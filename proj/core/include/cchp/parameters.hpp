// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "cchp/autodiff.hpp"

#include <cstddef>
#include <map>
#include <string>
#include <vector>

namespace cchp {

/// Ordered collection of named parameters. Insertion order is the canonical
/// order used by checkpoints and by the optimizer state.
class ParameterStore {
 public:
  std::size_t add(std::string name, Matrix value);

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }

  const Parameter* find(const std::string& name) const;
  Parameter* find(const std::string& name);
  std::size_t index_of(const std::string& name) const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t scalar_count() const;
  void zero_grad() const;
  bool all_finite() const;

 private:
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace cchp

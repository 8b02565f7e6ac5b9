#pragma once

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "dtmt/autograd.hpp"

namespace dtmt {

/// Owns the named parameters of a model in creation order. Addresses are
/// stable for the lifetime of the store, so components keep raw pointers.
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) = default;
  ParamStore& operator=(ParamStore&&) = default;

  Parameter& add(const std::string& name, Shape shape, double fill = 0.0) {
    if (index_.count(name)) throw ContractError("duplicate parameter name '" + name + "'");
    params_.push_back(std::make_unique<Parameter>(name, Tensor(std::move(shape), fill)));
    index_.emplace(name, params_.size() - 1);
    return *params_.back();
  }

  std::size_t size() const noexcept { return params_.size(); }
  Parameter& operator[](std::size_t i) { return *params_[i]; }
  const Parameter& operator[](std::size_t i) const { return *params_[i]; }

  Parameter* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }
  const Parameter* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }
  std::size_t index_of(const Parameter& p) const { return index_.at(p.name); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace dtmt

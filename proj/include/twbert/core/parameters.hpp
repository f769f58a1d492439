#pragma once

#include <map>
#include <string>
#include <vector>

#include "twbert/core/rng.hpp"
#include "twbert/core/tensor.hpp"

namespace twbert {

/// Ordered registry of named trainable tensors. Names are unique.
template <Scalar Real>
class ParameterStore {
 public:
  Tensor<Real> add(const std::string& name, Shape shape, std::vector<Real> values) {
    if (index_.count(name)) throw ContractError("ParameterStore: duplicate parameter name '" + name + "'");
    auto t = Tensor<Real>::from(std::move(shape), std::move(values), /*requires_grad=*/true);
    index_[name] = params_.size();
    params_.push_back({name, t});
    return t;
  }

  /// Registers an existing tensor handle; the store then shares it.
  Tensor<Real> adopt(const std::string& name, Tensor<Real> t) {
    if (index_.count(name)) throw ContractError("ParameterStore: duplicate parameter name '" + name + "'");
    index_[name] = params_.size();
    params_.push_back({name, t});
    return t;
  }

  /// Gaussian init with the given standard deviation.
  Tensor<Real> normal(const std::string& name, Shape shape, Rng& rng, double stddev) {
    std::vector<Real> v(shape_numel(shape));
    for (Real& x : v) x = static_cast<Real>(rng.normal(0.0, stddev));
    return add(name, std::move(shape), std::move(v));
  }

  /// Weight matrix [fan_in x fan_out] with stddev 1/sqrt(fan_in).
  Tensor<Real> weight(const std::string& name, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    return normal(name, {fan_in, fan_out}, rng, 1.0 / std::sqrt(static_cast<double>(fan_in)));
  }

  Tensor<Real> constant(const std::string& name, Shape shape, Real v) {
    return add(name, shape, std::vector<Real>(shape_numel(shape), v));
  }

  const std::vector<Parameter<Real>>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Parameter<Real>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("ParameterStore: no parameter '" + name + "'");
    return params_[it->second];
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& p : params_) out.push_back(p.name);
    return out;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.value.zero_grad();
  }

 private:
  std::vector<Parameter<Real>> params_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace twbert

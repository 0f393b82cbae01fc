#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cosod/checkpoint.hpp"
#include "cosod/rng.hpp"
#include "cosod/tensor.hpp"

namespace cosod {

// Ordered, named collection of trainable leaves. Names follow dotted
// "module.layer.role" paths and double as checkpoint keys.
template <typename Scalar>
class ParameterSet {
 public:
  explicit ParameterSet(std::uint64_t seed = 0) : seed_(seed) {}

  // Seeded uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)]; the stream depends
  // only on (seed, name), so adding a module does not perturb the others.
  Tensor<Scalar> uniform(const std::string& name, const Shape& shape, int fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return add(name, Tensor<Scalar>::uniform(shape, static_cast<Scalar>(-bound),
                                             static_cast<Scalar>(bound),
                                             Rng::combine(seed_, Rng::hash(name))));
  }

  Tensor<Scalar> constant(const std::string& name, const Shape& shape, Scalar value) {
    return add(name, Tensor<Scalar>::constant(shape, value));
  }

  Tensor<Scalar> add(const std::string& name, Tensor<Scalar> t) {
    if (index_.count(name)) throw UsageError("duplicate parameter name: " + name);
    t.set_requires_grad(true);
    index_[name] = entries_.size();
    entries_.emplace_back(name, t);
    return t;
  }

  const std::vector<std::pair<std::string, Tensor<Scalar>>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Tensor<Scalar> get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw UsageError("unknown parameter: " + name);
    return entries_[it->second].second;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.numel();
    return n;
  }

  void clear_grads() {
    for (auto& [_, t] : entries_) t.clear_grad();
  }

  std::vector<NamedTensor> export_tensors() const {
    std::vector<NamedTensor> out;
    for (const auto& [name, t] : entries_) out.push_back({name, t.template cast<float>()});
    return out;
  }

  // Copies values from a checkpoint; every parameter must be present with a
  // matching shape. Extra checkpoint entries are an error too.
  void import_tensors(const std::vector<NamedTensor>& tensors) {
    if (tensors.size() != entries_.size())
      throw ParseError("checkpoint holds " + std::to_string(tensors.size()) +
                       " tensors, model expects " + std::to_string(entries_.size()));
    for (const auto& nt : tensors) {
      auto it = index_.find(nt.name);
      if (it == index_.end()) throw ParseError("checkpoint tensor not in model: " + nt.name);
      auto& dst = entries_[it->second].second;
      if (dst.shape() != nt.tensor.shape())
        throw ParseError("checkpoint shape mismatch for " + nt.name + ": " +
                         shape_str(nt.tensor.shape()) + " vs " + shape_str(dst.shape()));
      auto out = dst.mutable_data();
      const auto in = nt.tensor.data();
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<Scalar>(in[i]);
    }
  }

 private:
  std::uint64_t seed_;
  std::vector<std::pair<std::string, Tensor<Scalar>>> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace cosod

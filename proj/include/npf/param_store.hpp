#ifndef NPF_PARAM_STORE_HPP
#define NPF_PARAM_STORE_HPP

#include <cstdint>
#include <map>
#include <string>

#include "npf/tensor.hpp"

namespace npf {

// Gradients keyed by parameter name. A missing key means zero gradient.
using GradStore = std::map<std::string, Tensor>;

// Named trainable tensors for one model. Names are unique; shapes are fixed
// once a parameter is added. Ordered map so iteration order (and therefore
// everything serialized from it) is deterministic.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t rng_seed = 0) : rng_seed_(rng_seed) {}

  std::uint64_t rng_seed() const { return rng_seed_; }
  void set_rng_seed(std::uint64_t s) { rng_seed_ = s; }

  void add(const std::string& name, Tensor value);
  bool has(const std::string& name) const { return params_.count(name) != 0; }
  const Tensor& get(const std::string& name) const;
  // In-place update; the new value must keep the registered shape and dtype.
  void set(const std::string& name, Tensor value);

  std::size_t size() const { return params_.size(); }
  i64 total_elements() const;
  const std::map<std::string, Tensor>& entries() const { return params_; }
  std::map<std::string, Tensor>& entries() { return params_; }

  ParamStore astype(Dtype dt) const;

 private:
  std::map<std::string, Tensor> params_;
  std::uint64_t rng_seed_;
};

}  // namespace npf

#endif

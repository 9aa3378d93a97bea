#include "npf/param_store.hpp"

#include <stdexcept>

namespace npf {

void ParamStore::add(const std::string& name, Tensor value) {
  auto [it, inserted] = params_.emplace(name, std::move(value));
  if (!inserted) throw std::invalid_argument("param store: duplicate parameter '" + name + "'");
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("param store: unknown parameter '" + name + "'");
  return it->second;
}

void ParamStore::set(const std::string& name, Tensor value) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("param store: unknown parameter '" + name + "'");
  if (value.shape() != it->second.shape())
    throw std::invalid_argument("param store: shape of '" + name + "' is fixed at " +
                                shape_str(it->second.shape()) + ", got " + shape_str(value.shape()));
  if (value.dtype() != it->second.dtype())
    throw std::invalid_argument("param store: dtype of '" + name + "' is fixed");
  it->second = std::move(value);
}

i64 ParamStore::total_elements() const {
  i64 n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

ParamStore ParamStore::astype(Dtype dt) const {
  ParamStore out(rng_seed_);
  for (const auto& [name, t] : params_) out.add(name, t.astype(dt));
  return out;
}

}  // namespace npf

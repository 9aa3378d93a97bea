#ifndef NPF_OPTIM_HPP
#define NPF_OPTIM_HPP

#include <cstdint>
#include <map>
#include <string>

#include "npf/param_store.hpp"
#include "npf/tensor.hpp"

namespace npf {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam moments plus the cosine schedule state. The learning rate at step t is
// base_lr * 0.5 * (1 + cos(pi * t / total_steps)), decaying to zero.
struct OptState {
  std::map<std::string, Tensor> m;  // first moment, per parameter
  std::map<std::string, Tensor> v;  // second moment, per parameter
  i64 step = 0;
  double base_lr = 5e-4;
  i64 total_steps = 1;
  AdamConfig adam;

  static OptState init(const ParamStore& params, double base_lr, i64 total_steps);

  double lr_at(i64 t) const;
};

// Bias-corrected Adam update with the cosine learning rate at the current
// step counter; increments the counter. Parameters without a gradient entry
// are left untouched (zero gradient). Throws if any gradient value is not
// finite, naming the parameter.
void adam_step(ParamStore& params, const GradStore& grads, OptState& opt);

}  // namespace npf

#endif

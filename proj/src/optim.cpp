#include "npf/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace npf {

OptState OptState::init(const ParamStore& params, double base_lr, i64 total_steps) {
  OptState s;
  s.base_lr = base_lr;
  s.total_steps = total_steps;
  for (const auto& [name, t] : params.entries()) {
    s.m.emplace(name, Tensor::zeros(t.shape(), t.dtype()));
    s.v.emplace(name, Tensor::zeros(t.shape(), t.dtype()));
  }
  return s;
}

double OptState::lr_at(i64 t) const {
  const double frac = total_steps > 0 ? static_cast<double>(t) / static_cast<double>(total_steps) : 1.0;
  return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * frac));
}

namespace {

template <typename T>
void adam_update(Tensor& p, const Tensor& g, Tensor& m, Tensor& v, double lr, double bc1,
                 double bc2, const AdamConfig& a, const std::string& name) {
  auto P = p.data<T>();
  auto G = g.data<T>();
  auto M = m.data<T>();
  auto V = v.data<T>();
  const i64 n = p.numel();
  const T b1 = static_cast<T>(a.beta1), b2 = static_cast<T>(a.beta2);
  for (i64 i = 0; i < n; ++i) {
    const double gv = static_cast<double>(G[i]);
    if (!std::isfinite(gv))
      throw std::runtime_error("adam_step: non-finite gradient for parameter '" + name + "'");
    M[i] = b1 * M[i] + (T(1) - b1) * G[i];
    V[i] = b2 * V[i] + (T(1) - b2) * G[i] * G[i];
    const double mhat = static_cast<double>(M[i]) / bc1;
    const double vhat = static_cast<double>(V[i]) / bc2;
    P[i] = static_cast<T>(static_cast<double>(P[i]) - lr * mhat / (std::sqrt(vhat) + a.eps));
  }
}

}  // namespace

void adam_step(ParamStore& params, const GradStore& grads, OptState& opt) {
  const double lr = opt.lr_at(opt.step);
  const i64 t1 = opt.step + 1;
  const double bc1 = 1.0 - std::pow(opt.adam.beta1, static_cast<double>(t1));
  const double bc2 = 1.0 - std::pow(opt.adam.beta2, static_cast<double>(t1));
  for (auto& [name, p] : params.entries()) {
    auto git = grads.find(name);
    if (git == grads.end()) continue;  // zero gradient
    const Tensor& g = git->second;
    if (g.shape() != p.shape())
      throw std::runtime_error("adam_step: gradient shape " + shape_str(g.shape()) +
                               " does not match parameter '" + name + "' " + shape_str(p.shape()));
    Tensor& m = opt.m.at(name);
    Tensor& v = opt.v.at(name);
    if (p.dtype() == Dtype::F32)
      adam_update<float>(p, g, m, v, lr, bc1, bc2, opt.adam, name);
    else
      adam_update<double>(p, g, m, v, lr, bc1, bc2, opt.adam, name);
  }
  opt.step = t1;
}

}  // namespace npf

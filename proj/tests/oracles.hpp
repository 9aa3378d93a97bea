#ifndef NPF_TESTS_ORACLES_HPP
#define NPF_TESTS_ORACLES_HPP

// Test-only oracles, independent of the library's forward/backward paths:
// central finite differences, a scalar Adam recurrence, and small statistics
// helpers. These stay deliberately naive.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "npf/param_store.hpp"
#include "npf/rng.hpp"
#include "npf/tape.hpp"
#include "npf/tensor.hpp"

namespace npf::oracles {

// |a - b| / max(1, |a|, |b|)
inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst;  // "param[i]" of the worst coordinate
  int checked = 0;
};

// Central-difference check of d(program)/d(param coords) against the tape's
// reverse-mode gradients. `program` must rebuild the full graph from the
// store on every call. Checks `coords_per_param` random coordinates of every
// parameter (all coordinates if <= 0).
inline GradCheckResult grad_check(ParamStore& params,
                                  const std::function<Var(Tape&)>& program, double h = 1e-5,
                                  int coords_per_param = -1, std::uint64_t pick_seed = 7) {
  ForwardBackward fb = forward_backward(params, Dtype::F64, program);
  Rng pick(pick_seed);
  GradCheckResult res;
  auto eval = [&]() {
    Tape tape(Dtype::F64, &params);
    return program(tape).val().at(0);
  };
  for (auto& [name, p] : params.entries()) {
    const i64 n = p.numel();
    if (n == 0) continue;
    std::vector<i64> coords;
    if (coords_per_param <= 0 || coords_per_param >= n) {
      for (i64 i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (int c = 0; c < coords_per_param; ++c)
        coords.push_back(static_cast<i64>(pick.uniform_int(static_cast<std::uint64_t>(n))));
    }
    auto git = fb.grads.find(name);
    for (i64 i : coords) {
      const double orig = p.at(i);
      p.set(i, orig + h);
      const double fp = eval();
      p.set(i, orig - h);
      const double fm = eval();
      p.set(i, orig);
      const double fd = (fp - fm) / (2.0 * h);
      const double an = git == fb.grads.end() ? 0.0 : git->second.at(i);
      const double e = rel_err(an, fd);
      if (e > res.max_rel_err) {
        res.max_rel_err = e;
        res.worst = name + "[" + std::to_string(i) + "]";
      }
      ++res.checked;
    }
  }
  return res;
}

// Finite-difference gradient of a scalar function of a single input tensor.
inline Tensor fd_input_grad(Tensor x, const std::function<double(const Tensor&)>& f,
                            double h = 1e-5) {
  Tensor g(x.shape(), Dtype::F64);
  for (i64 i = 0; i < x.numel(); ++i) {
    const double orig = x.at(i);
    x.set(i, orig + h);
    const double fp = f(x);
    x.set(i, orig - h);
    const double fm = f(x);
    x.set(i, orig);
    g.set(i, (fp - fm) / (2.0 * h));
  }
  return g;
}

// Hand-rolled scalar Adam with cosine schedule, the oracle for adam_step.
struct ScalarAdamOracle {
  double m = 0.0, v = 0.0;
  i64 t = 0;
  double base_lr;
  i64 total_steps;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  double step(double p, double g) {
    const double lr =
        base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(t) /
                                        static_cast<double>(total_steps)));
    m = beta1 * m + (1.0 - beta1) * g;
    v = beta2 * v + (1.0 - beta2) * g * g;
    ++t;
    const double mhat = m / (1.0 - std::pow(beta1, static_cast<double>(t)));
    const double vhat = v / (1.0 - std::pow(beta2, static_cast<double>(t)));
    return p - lr * mhat / (std::sqrt(vhat) + eps);
  }
};

inline double mean_of(const std::vector<double>& xs) {
  double s = 0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

inline double stdev_of(const std::vector<double>& xs) {
  const double m = mean_of(xs);
  double s = 0;
  for (double x : xs) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(xs.size() - 1));
}

}  // namespace npf::oracles

#endif

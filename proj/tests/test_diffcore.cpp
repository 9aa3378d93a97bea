#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "npf/checkpoint.hpp"
#include "npf/kernels.hpp"
#include "npf/optim.hpp"
#include "npf/rng.hpp"
#include "npf/tape.hpp"
#include "oracles.hpp"

using namespace npf;

namespace {

Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.5, double hi = 1.5,
                     double keep_away_from_zero = 0.0) {
  Tensor t(shape, Dtype::F64);
  for (i64 i = 0; i < t.numel(); ++i) {
    double v = rng.uniform(lo, hi);
    if (keep_away_from_zero > 0.0 && std::abs(v) < keep_away_from_zero)
      v = v < 0 ? v - keep_away_from_zero : v + keep_away_from_zero;
    t.set(i, v);
  }
  return t;
}

// FD check of one primitive: loss = sum(builder(x) * C) with a fixed random
// cotangent C.
void check_primitive_grad(const char* name, const Shape& in_shape,
                          const std::function<Var(Tape&, Var)>& builder, Rng& rng,
                          double positive_lo = 0.0) {
  const Tensor x0 = positive_lo > 0.0 ? random_tensor(in_shape, rng, positive_lo, positive_lo + 2.0)
                                      : random_tensor(in_shape, rng, -1.5, 1.5, 0.05);
  Tensor cot;
  bool cot_ready = false;
  auto run = [&](const Tensor& x, Tape& tape, Var& loss) {
    Var xv = tape.input(x);
    Var out = builder(tape, xv);
    if (!cot_ready) {
      Rng crng(991);
      cot = random_tensor(out.shape(), crng);
      cot_ready = true;
    }
    loss = sum_all(out * tape.constant(cot));
    return xv;
  };
  Tape tape(Dtype::F64);
  Var loss;
  Var xv = run(x0, tape, loss);
  tape.backward(loss);
  const Tensor analytic = tape.grad(xv);
  const Tensor fd = oracles::fd_input_grad(x0, [&](const Tensor& x) {
    Tape t2(Dtype::F64);
    Var l2;
    run(x, t2, l2);
    return l2.val().at(0);
  });
  double max_err = 0.0;
  for (i64 i = 0; i < analytic.numel(); ++i)
    max_err = std::max(max_err, oracles::rel_err(analytic.at(i), fd.at(i)));
  INFO(std::string(name) << ": max rel err " << max_err);
  CHECK(max_err < 1e-6);
}

}  // namespace

TEST_CASE("sum of squares gradient is 2w") {
  Tape tape(Dtype::F64);
  Var w = tape.input(Tensor::from_f64({2}, {1.0, 2.0}));
  Var loss = sum_all(square(w));
  tape.backward(loss);
  CHECK(loss.val().at(0) == doctest::Approx(5.0));
  const Tensor g = tape.grad(w);
  CHECK(g.at(0) == doctest::Approx(2.0));
  CHECK(g.at(1) == doctest::Approx(4.0));
}

TEST_CASE("softplus at zero: value ln 2, gradient one half") {
  Tape tape(Dtype::F64);
  Var x = tape.input(Tensor::scalar(0.0, Dtype::F64));
  Var loss = softplus(x);
  tape.backward(loss);
  CHECK(loss.val().at(0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(tape.grad(x).at(0) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("three-layer MLP gradients match central finite differences") {
  Rng rng(42);
  ParamStore params;
  const int dims[4] = {3, 8, 8, 1};
  for (int l = 0; l < 3; ++l) {
    Tensor w({dims[l], dims[l + 1]}, Dtype::F64);
    for (i64 i = 0; i < w.numel(); ++i) w.set(i, rng.normal() * 0.5);
    params.add("l" + std::to_string(l) + ".weight", w);
    Tensor b({dims[l + 1]}, Dtype::F64);
    for (i64 i = 0; i < b.numel(); ++i) b.set(i, rng.normal() * 0.1);
    params.add("l" + std::to_string(l) + ".bias", b);
  }
  const Tensor x = random_tensor({5, 3}, rng);
  const Tensor y = random_tensor({5, 1}, rng);
  auto program = [&](Tape& t) {
    Var h = t.constant(x);
    for (int l = 0; l < 3; ++l) {
      h = matmul(h, t.param("l" + std::to_string(l) + ".weight")) +
          t.param("l" + std::to_string(l) + ".bias");
      if (l < 2) h = relu(h);
    }
    return sum_all(square(h - t.constant(y)));
  };
  auto res = oracles::grad_check(params, program, 1e-5);
  INFO("worst " << res.worst << " err " << res.max_rel_err << " over " << res.checked);
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("every primitive passes finite-difference checks at random points") {
  Rng rng(1234);
  for (int rep = 0; rep < 10; ++rep) {
    check_primitive_grad("relu", {3, 4}, [](Tape&, Var x) { return relu(x); }, rng);
    check_primitive_grad("softplus", {3, 4}, [](Tape&, Var x) { return softplus(x); }, rng);
    check_primitive_grad("exp", {3, 4}, [](Tape&, Var x) { return exp(x); }, rng);
    check_primitive_grad("log", {3, 4}, [](Tape&, Var x) { return log(x); }, rng, 0.3);
    check_primitive_grad("square", {3, 4}, [](Tape&, Var x) { return square(x); }, rng);
    check_primitive_grad("sqrt", {3, 4}, [](Tape&, Var x) { return sqrt(x); }, rng, 0.3);
    check_primitive_grad("softmax", {3, 5}, [](Tape&, Var x) { return softmax_lastdim(x); }, rng);
    check_primitive_grad("logsumexp", {3, 5},
                         [](Tape&, Var x) { return logsumexp_lastdim(x); }, rng);
    check_primitive_grad("layer_norm", {3, 6},
                         [](Tape&, Var x) { return layer_norm_lastdim(x); }, rng);
    check_primitive_grad("sum", {3, 4}, [](Tape&, Var x) { return sum(x, 1); }, rng);
    check_primitive_grad("mean", {3, 4}, [](Tape&, Var x) { return mean(x, 0); }, rng);
    check_primitive_grad("slice", {4, 6},
                         [](Tape&, Var x) { return slice(x, 1, 2, 3); }, rng);
    check_primitive_grad("concat", {2, 3}, [](Tape&, Var x) {
      return concat({x, square(x)}, 1);
    }, rng);
    check_primitive_grad("broadcast_to", {1, 4}, [](Tape&, Var x) {
      return broadcast_to(x, {3, 4});
    }, rng);
    check_primitive_grad("reshape", {2, 6}, [](Tape&, Var x) {
      return reshape(x, {3, 4});
    }, rng);
    check_primitive_grad("gather", {4, 3}, [](Tape&, Var x) {
      return gather_rows(x, {0, 2, 2, 3}, {4});
    }, rng);
    check_primitive_grad("matmul", {3, 4}, [](Tape& t, Var x) {
      Rng r2(55);
      Tensor w = random_tensor({4, 2}, r2);
      return matmul(x, t.constant(w));
    }, rng);
    check_primitive_grad("matmul_rhs", {4, 2}, [](Tape& t, Var x) {
      Rng r2(56);
      Tensor a = random_tensor({3, 4}, r2);
      return matmul(t.constant(a), x);
    }, rng);
    check_primitive_grad("matmul_batched_t", {2, 5, 3}, [](Tape& t, Var x) {
      Rng r2(57);
      Tensor q = random_tensor({2, 4, 3}, r2);
      return matmul(t.constant(q), x, /*transpose_rhs=*/true);
    }, rng);
    check_primitive_grad("add_broadcast", {3, 1, 4}, [](Tape& t, Var x) {
      Rng r2(58);
      Tensor other = random_tensor({3, 2, 4}, r2);
      return add(x, t.constant(other));
    }, rng);
    check_primitive_grad("mul_broadcast", {2, 4}, [](Tape& t, Var x) {
      Rng r2(59);
      Tensor other = random_tensor({3, 2, 4}, r2);
      return mul(x, t.constant(other));
    }, rng);
    check_primitive_grad("div", {2, 4}, [](Tape& t, Var x) {
      Rng r2(60);
      Tensor denom = random_tensor({2, 4}, r2, 0.5, 2.0);
      return div(x, t.constant(denom));
    }, rng);
    check_primitive_grad("div_rhs", {2, 4}, [](Tape& t, Var x) {
      Rng r2(61);
      Tensor num = random_tensor({2, 4}, r2);
      return div(t.constant(num), x);
    }, rng, 0.5);
    check_primitive_grad("gld_mu_sigma", {2, 3}, [](Tape& t, Var x) {
      // x plays (mu); sigma = softplus(x)+0.2 keeps positivity tied to x
      Rng r2(62);
      Tensor y = random_tensor({2, 3}, r2);
      return gaussian_log_density(t.constant(y), x, softplus(x) + 0.2);
    }, rng);
    check_primitive_grad("gld_y", {2, 3}, [](Tape& t, Var x) {
      Rng r2(63);
      Tensor mu = random_tensor({2, 3}, r2);
      Tensor sg = random_tensor({2, 3}, r2, 0.4, 1.5);
      return gaussian_log_density(x, t.constant(mu), t.constant(sg));
    }, rng);
  }
}

TEST_CASE("gaussian log density closed-form values") {
  Tape tape(Dtype::F64);
  // standard normal at its mode
  Var a = gaussian_log_density(tape.scalar(0.0), tape.scalar(0.0), tape.scalar(1.0));
  CHECK(a.val().at(0) == doctest::Approx(-0.9189385332046727).epsilon(1e-12));
  // y = mu with sigma 0.1
  Var b = gaussian_log_density(tape.scalar(0.7), tape.scalar(0.7), tape.scalar(0.1));
  CHECK(b.val().at(0) == doctest::Approx(1.3836465597893728).epsilon(1e-9));
  // isotropic 2-output density is the sum over output dims
  Tensor y = Tensor::from_f64({2}, {0.3, -0.4});
  Tensor mu = Tensor::from_f64({2}, {0.1, 0.2});
  Tensor sg = Tensor::from_f64({2}, {0.5, 0.5});
  Var joint = sum_all(gaussian_log_density(tape.constant(y), tape.constant(mu), tape.constant(sg)));
  double expect = 0.0;
  for (int d = 0; d < 2; ++d) {
    const double z = (y.at(d) - mu.at(d)) / sg.at(d);
    expect += -0.9189385332046727 - std::log(sg.at(d)) - 0.5 * z * z;
  }
  CHECK(joint.val().at(0) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("gaussian log density rejects non-positive sigma") {
  Tape tape(Dtype::F64);
  CHECK_THROWS_WITH_AS(
      gaussian_log_density(tape.scalar(0.0), tape.scalar(0.0), tape.scalar(-0.5)),
      doctest::Contains("sigma must be positive"), std::runtime_error);
}

TEST_CASE("shape errors name the primitive and shapes") {
  Tape tape(Dtype::F64);
  Var a = tape.constant(Tensor::zeros({2, 3}, Dtype::F64));
  Var b = tape.constant(Tensor::zeros({4, 5}, Dtype::F64));
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("matmul"), std::runtime_error);
  CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("[2,3]"), std::runtime_error);
}

TEST_CASE("backward requires a scalar loss") {
  Tape tape(Dtype::F64);
  Var a = tape.input(Tensor::zeros({2, 3}, Dtype::F64));
  Var out = square(a);
  CHECK_THROWS_WITH_AS(tape.backward(out), doctest::Contains("scalar"), std::runtime_error);
}

TEST_CASE("softmax rows sum to one; layer_norm is standardized before affine") {
  Rng rng(77);
  Tape tape(Dtype::F64);
  Var x = tape.constant(random_tensor({6, 32}, rng, -4.0, 4.0));
  Var sm = softmax_lastdim(x);
  for (i64 r = 0; r < 6; ++r) {
    double s = 0;
    for (i64 j = 0; j < 32; ++j) s += sm.val().at(r * 32 + j);
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
  Var ln = layer_norm_lastdim(x);
  for (i64 r = 0; r < 6; ++r) {
    double m = 0, v = 0;
    for (i64 j = 0; j < 32; ++j) m += ln.val().at(r * 32 + j);
    m /= 32;
    for (i64 j = 0; j < 32; ++j) {
      const double d = ln.val().at(r * 32 + j) - m;
      v += d * d;
    }
    v /= 32;
    CHECK(std::abs(m) < 1e-5);
    CHECK(std::abs(v - 1.0) < 1e-4);
  }
}

TEST_CASE("adam: zero gradients leave parameters unchanged") {
  ParamStore params;
  params.add("w", Tensor::from_f32({3}, {1.0f, -2.0f, 0.5f}));
  OptState opt = OptState::init(params, 1e-3, 100);
  GradStore grads;
  grads["w"] = Tensor::zeros({3}, Dtype::F32);
  adam_step(params, grads, opt);
  CHECK(params.get("w").at(0) == 1.0f);
  CHECK(params.get("w").at(1) == -2.0f);
  CHECK(params.get("w").at(2) == 0.5f);
  CHECK(opt.step == 1);
}

TEST_CASE("adam: cosine schedule reaches zero at total_steps") {
  ParamStore params;
  params.add("w", Tensor::from_f32({1}, {1.0f}));
  OptState opt = OptState::init(params, 1e-2, 50);
  opt.step = 50;
  CHECK(opt.lr_at(opt.step) == doctest::Approx(0.0).epsilon(1e-15));
  GradStore grads;
  grads["w"] = Tensor::from_f32({1}, {3.0f});
  adam_step(params, grads, opt);
  CHECK(params.get("w").at(0) == 1.0f);
}

TEST_CASE("adam: two steps with constant gradient match the scalar recurrence") {
  ParamStore params;
  params.add("w", Tensor::from_f64({1}, {0.3}));
  OptState opt = OptState::init(params, 1e-2, 10);
  oracles::ScalarAdamOracle oracle{.base_lr = 1e-2, .total_steps = 10};
  double expect = 0.3;
  GradStore grads;
  grads["w"] = Tensor::from_f64({1}, {1.0});
  for (int s = 0; s < 2; ++s) {
    adam_step(params, grads, opt);
    expect = oracle.step(expect, 1.0);
  }
  CHECK(params.get("w").at(0) == doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("adam: NaN gradient is rejected with the parameter name") {
  ParamStore params;
  params.add("enc.w", Tensor::from_f32({1}, {1.0f}));
  OptState opt = OptState::init(params, 1e-3, 10);
  GradStore grads;
  grads["enc.w"] = Tensor::from_f32({1}, {std::nanf("")});
  CHECK_THROWS_WITH_AS(adam_step(params, grads, opt), doctest::Contains("enc.w"),
                       std::runtime_error);
}

TEST_CASE("forward_backward is deterministic") {
  Rng rng(3);
  ParamStore params;
  params.add("w", random_tensor({4, 4}, rng));
  const Tensor x = random_tensor({2, 4}, rng);
  auto program = [&](Tape& t) { return sum_all(square(matmul(t.constant(x), t.param("w")))); };
  auto r1 = forward_backward(params, Dtype::F64, program);
  auto r2 = forward_backward(params, Dtype::F64, program);
  CHECK(r1.output.at(0) == r2.output.at(0));
  for (i64 i = 0; i < 16; ++i) CHECK(r1.grads["w"].at(i) == r2.grads["w"].at(i));
}

TEST_CASE("serial and parallel kernels agree") {
  Rng rng(9);
  const i64 M = 37, N = 19, K = 23;
  Tensor a = random_tensor({M, K}, rng);
  Tensor bt = random_tensor({K, N}, rng);
  for (Dtype dt : {Dtype::F32, Dtype::F64}) {
    Tensor af = a.astype(dt), bf = bt.astype(dt);
    auto run = [&](kernels::Mode m) {
      kernels::set_mode(m);
      Tape tape(dt);
      Var out = matmul(tape.constant(af), tape.constant(bf));
      Var sm = softmax_lastdim(out);
      Var ln = layer_norm_lastdim(out);
      Var lse = logsumexp_lastdim(out);
      Tensor o = out.val(), s = sm.val(), l = ln.val(), e = lse.val();
      kernels::set_mode(kernels::Mode::Parallel);
      return std::make_tuple(o, s, l, e);
    };
    auto [o1, s1, l1, e1] = run(kernels::Mode::Serial);
    auto [o2, s2, l2, e2] = run(kernels::Mode::Parallel);
    const double tol = dt == Dtype::F32 ? 1e-5 : 1e-12;
    for (i64 i = 0; i < o1.numel(); ++i) CHECK(std::abs(o1.at(i) - o2.at(i)) < tol);
    for (i64 i = 0; i < s1.numel(); ++i) CHECK(std::abs(s1.at(i) - s2.at(i)) < tol);
    for (i64 i = 0; i < l1.numel(); ++i) CHECK(std::abs(l1.at(i) - l2.at(i)) < tol);
    for (i64 i = 0; i < e1.numel(); ++i) CHECK(std::abs(e1.at(i) - e2.at(i)) < tol);
  }
}

TEST_CASE("checkpoint round-trips bit-exactly") {
  Rng rng(21);
  ParamStore params(12345);
  params.add("enc.l0.weight", random_tensor({7, 5}, rng).astype(Dtype::F32));
  params.add("enc.l0.bias", random_tensor({5}, rng).astype(Dtype::F32));
  params.add("dec.l0.weight", random_tensor({5, 2}, rng).astype(Dtype::F32));
  OptState opt = OptState::init(params, 7.5e-4, 1234);
  opt.step = 77;
  for (auto& [k, t] : opt.m)
    for (i64 i = 0; i < t.numel(); ++i) t.set(i, rng.normal());
  const char* path = "ckpt_roundtrip_test.bin";
  save_checkpoint(path, params, &opt);
  Checkpoint ck = load_checkpoint(path);
  CHECK(ck.params.rng_seed() == 12345);
  CHECK(ck.has_opt);
  CHECK(ck.opt.step == 77);
  CHECK(ck.opt.base_lr == 7.5e-4);
  CHECK(ck.opt.total_steps == 1234);
  for (const auto& [name, t] : params.entries()) {
    const Tensor& u = ck.params.get(name);
    REQUIRE(u.shape() == t.shape());
    for (i64 i = 0; i < t.numel(); ++i) CHECK(u.at(i) == t.at(i));
  }
  for (const auto& [name, t] : opt.m) {
    const Tensor& u = ck.opt.m.at(name);
    for (i64 i = 0; i < t.numel(); ++i) CHECK(u.at(i) == t.at(i));
  }
  // byte-identical re-save
  save_checkpoint("ckpt_roundtrip_test2.bin", ck.params, &ck.opt);
  std::ifstream f1(path, std::ios::binary), f2("ckpt_roundtrip_test2.bin", std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(b1 == b2);
  std::filesystem::remove(path);
  std::filesystem::remove("ckpt_roundtrip_test2.bin");
}

TEST_CASE("rng streams are reproducible and forks are independent") {
  Rng a(100), b(100);
  for (int i = 0; i < 10; ++i) CHECK(a.uniform() == b.uniform());
  Rng c = a.fork(1, 2), d = a.fork(1, 3);
  bool differ = false;
  for (int i = 0; i < 8; ++i) differ = differ || (c.uniform() != d.uniform());
  CHECK(differ);
  // normals have roughly unit variance (smoke)
  Rng e(5);
  double s = 0, s2 = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double z = e.normal();
    s += z;
    s2 += z * z;
  }
  CHECK(std::abs(s / n) < 0.05);
  CHECK(std::abs(s2 / n - 1.0) < 0.05);
}

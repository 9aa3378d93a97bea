#include "npf/tape.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "npf/kernels.hpp"

namespace npf {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5*ln(2*pi)

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const int ra = static_cast<int>(a.size()), rb = static_cast<int>(b.size());
  const int r = std::max(ra, rb);
  Shape out(static_cast<std::size_t>(r));
  for (int d = 0; d < r; ++d) {
    const i64 ea = d < r - ra ? 1 : a[static_cast<std::size_t>(d - (r - ra))];
    const i64 eb = d < r - rb ? 1 : b[static_cast<std::size_t>(d - (r - rb))];
    if (ea != eb && ea != 1 && eb != 1)
      fail(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
           " are not broadcast-compatible");
    out[static_cast<std::size_t>(d)] = std::max(ea, eb);
  }
  return out;
}

// Element strides of a tensor with shape `s` viewed in coordinates of the
// broadcast output shape `o` (aligned right); 0 marks broadcast axes.
std::vector<i64> strides_in(const Shape& s, const Shape& o) {
  const int rs = static_cast<int>(s.size()), ro = static_cast<int>(o.size());
  std::vector<i64> st(static_cast<std::size_t>(ro), 0);
  i64 acc = 1;
  for (int d = rs - 1; d >= 0; --d) {
    const int od = d + (ro - rs);
    st[static_cast<std::size_t>(od)] = (s[static_cast<std::size_t>(d)] == 1 &&
                                        o[static_cast<std::size_t>(od)] != 1)
                                           ? 0
                                           : acc;
    acc *= s[static_cast<std::size_t>(d)];
  }
  return st;
}

// Walks the output shape in row-major order, invoking fn(out_row_ptr_offset,
// offa, offb, inner_len, stride_a, stride_b) once per innermost row.
template <class F>
void rows_zip(const Shape& os, const std::vector<i64>& sa, const std::vector<i64>& sb, F fn) {
  const int r = static_cast<int>(os.size());
  const i64 total = shape_numel(os);
  if (total == 0) return;
  if (r == 0) {
    fn(i64(0), i64(0), i64(0), i64(1), i64(1), i64(1));
    return;
  }
  const i64 inner = os[static_cast<std::size_t>(r - 1)];
  const i64 outer = total / std::max<i64>(inner, 1);
  std::vector<i64> idx(static_cast<std::size_t>(r > 0 ? r - 1 : 0), 0);
  i64 offa = 0, offb = 0;
  for (i64 o = 0; o < outer; ++o) {
    fn(o * inner, offa, offb, inner, sa[static_cast<std::size_t>(r - 1)],
       sb[static_cast<std::size_t>(r - 1)]);
    for (int d = r - 2; d >= 0; --d) {
      auto du = static_cast<std::size_t>(d);
      ++idx[du];
      offa += sa[du];
      offb += sb[du];
      if (idx[du] < os[du]) break;
      offa -= sa[du] * os[du];
      offb -= sb[du] * os[du];
      idx[du] = 0;
    }
  }
}

template <typename T, class F>
void bcast_binary(const Tensor& a, const Tensor& b, Tensor& out, F f) {
  const Shape& os = out.shape();
  const auto sa = strides_in(a.shape(), os);
  const auto sb = strides_in(b.shape(), os);
  const T* A = a.data<T>().data();
  const T* B = b.data<T>().data();
  T* O = out.data<T>().data();
  rows_zip(os, sa, sb, [&](i64 oo, i64 oa, i64 ob, i64 inner, i64 la, i64 lb) {
    T* orow = O + oo;
    if (la == 1 && lb == 1) {
      const T* ar = A + oa;
      const T* br = B + ob;
#pragma omp simd
      for (i64 i = 0; i < inner; ++i) orow[i] = f(ar[i], br[i]);
    } else if (la == 1 && lb == 0) {
      const T* ar = A + oa;
      const T bv = B[ob];
#pragma omp simd
      for (i64 i = 0; i < inner; ++i) orow[i] = f(ar[i], bv);
    } else if (la == 0 && lb == 1) {
      const T av = A[oa];
      const T* br = B + ob;
#pragma omp simd
      for (i64 i = 0; i < inner; ++i) orow[i] = f(av, br[i]);
    } else {
      for (i64 i = 0; i < inner; ++i) orow[i] = f(A[oa + i * la], B[ob + i * lb]);
    }
  });
}

// dst[o, i] (+)= sum_r src[o, r, i]
template <typename T>
void sum_middle(i64 outer, i64 red, i64 inner, const T* src, T* dst, bool acc) {
#pragma omp parallel for schedule(static) if (kernels::parallel() && outer > 1)
  for (i64 o = 0; o < outer; ++o) {
    T* d = dst + o * inner;
    const T* s0 = src + o * red * inner;
    if (!acc)
      for (i64 i = 0; i < inner; ++i) d[i] = T(0);
    for (i64 r = 0; r < red; ++r) {
      const T* s = s0 + r * inner;
#pragma omp simd
      for (i64 i = 0; i < inner; ++i) d[i] += s[i];
    }
  }
}

template <typename T>
Tensor sum_over_axis(const Tensor& x, int axis, bool keepdim) {
  const Shape& s = x.shape();
  i64 outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s[static_cast<std::size_t>(d)];
  for (int d = axis + 1; d < x.rank(); ++d) inner *= s[static_cast<std::size_t>(d)];
  const i64 red = s[static_cast<std::size_t>(axis)];
  Shape os;
  for (int d = 0; d < x.rank(); ++d) {
    if (d == axis) {
      if (keepdim) os.push_back(1);
    } else {
      os.push_back(s[static_cast<std::size_t>(d)]);
    }
  }
  Tensor out(os, x.dtype());
  sum_middle<T>(outer, red, inner, x.data<T>().data(), out.data<T>().data(), false);
  return out;
}

// Reduces `src` to shape `dshape` (summing broadcast axes) and adds the
// result into `dst`, which already has shape `dshape`.
template <typename T>
void reduce_to_shape_add(const Tensor& src, const Shape& dshape, Tensor& dst) {
  const Shape& ss = src.shape();
  if (ss == dshape) {
    const T* s = src.data<T>().data();
    T* d = dst.data<T>().data();
    const i64 n = src.numel();
#pragma omp parallel for schedule(static) if (kernels::parallel() && n > (1 << 14))
    for (i64 i = 0; i < n; ++i) d[i] += s[i];
    return;
  }
  // reduce one axis at a time, right-aligned comparison
  Tensor cur = src;
  const int ro = cur.rank();
  const int rd = static_cast<int>(dshape.size());
  for (int d = 0; d < ro; ++d) {
    const int dd = d - (ro - rd);
    const i64 want = dd < 0 ? 1 : dshape[static_cast<std::size_t>(dd)];
    if (cur.shape()[static_cast<std::size_t>(d)] != want) {
      cur = sum_over_axis<T>(cur, d, /*keepdim=*/true);
    }
  }
  cur = cur.reshaped(dshape);
  const T* s = cur.data<T>().data();
  T* dd2 = dst.data<T>().data();
  const i64 n = cur.numel();
  for (i64 i = 0; i < n; ++i) dd2[i] += s[i];
}

template <typename T, class F>
void map_unary(const Tensor& x, Tensor& out, F f) {
  const T* X = x.data<T>().data();
  T* O = out.data<T>().data();
  const i64 n = x.numel();
#pragma omp parallel for schedule(static) if (kernels::parallel() && n > (1 << 14))
  for (i64 i = 0; i < n; ++i) O[i] = f(X[i]);
}

int normalize_axis(int axis, int rank, const char* op) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank)
    fail(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
         std::to_string(rank));
  return a;
}

}  // namespace

// --- Var ---------------------------------------------------------------

const Tensor& Var::val() const { return tape->value(*this); }
const Shape& Var::shape() const { return val().shape(); }
i64 Var::extent(int axis) const {
  const Shape& s = shape();
  const int r = static_cast<int>(s.size());
  return s[static_cast<std::size_t>(axis < 0 ? axis + r : axis)];
}
int Var::rank() const { return static_cast<int>(shape().size()); }

// --- Tape plumbing -------------------------------------------------------

int Tape::add_node(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

const Tensor& Tape::value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].out; }

Var Tape::constant(Tensor value) {
  if (value.dtype() != dtype_) value = value.astype(dtype_);
  Node n;
  n.op = Op::Leaf;
  n.out = std::move(value);
  n.needs_grad = false;
  return Var{this, add_node(std::move(n))};
}

Var Tape::scalar(double value) { return constant(Tensor::scalar(value, dtype_)); }

Var Tape::input(Tensor value) {
  if (value.dtype() != dtype_) value = value.astype(dtype_);
  Node n;
  n.op = Op::Leaf;
  n.out = std::move(value);
  n.needs_grad = true;
  return Var{this, add_node(std::move(n))};
}

Var Tape::param(const std::string& name) {
  auto it = param_nodes_.find(name);
  if (it != param_nodes_.end()) return Var{this, it->second};
  if (!params_) fail("tape: no parameter store attached (looking up '" + name + "')");
  Var v = input(params_->get(name));
  param_nodes_[name] = v.id;
  return v;
}

void Tape::accumulate(int id, const Tensor& g) {
  auto idx = static_cast<std::size_t>(id);
  if (grads_[idx].numel() == 0) {
    grads_[idx] = g;
    return;
  }
  Tensor& dst = grads_[idx];
  if (dtype_ == Dtype::F32) {
    auto d = dst.data<float>();
    auto s = g.data<float>();
    const i64 n = dst.numel();
#pragma omp parallel for schedule(static) if (kernels::parallel() && n > (1 << 14))
    for (i64 i = 0; i < n; ++i) d[i] += s[i];
  } else {
    auto d = dst.data<double>();
    auto s = g.data<double>();
    const i64 n = dst.numel();
#pragma omp parallel for schedule(static) if (kernels::parallel() && n > (1 << 14))
    for (i64 i = 0; i < n; ++i) d[i] += s[i];
  }
}

Tensor Tape::grad(Var v) const {
  const auto idx = static_cast<std::size_t>(v.id);
  if (idx < grads_.size() && grads_[idx].numel() > 0) return grads_[idx];
  return Tensor::zeros(nodes_[idx].out.shape(), dtype_);
}

GradStore Tape::param_grads() const {
  GradStore gs;
  for (const auto& [name, id] : param_nodes_) {
    const auto idx = static_cast<std::size_t>(id);
    if (idx < grads_.size() && grads_[idx].numel() > 0) {
      Tensor g = grads_[idx];
      if (params_ && params_->get(name).dtype() != g.dtype())
        g = g.astype(params_->get(name).dtype());
      gs[name] = std::move(g);
    }
  }
  return gs;
}

// --- op construction helpers ----------------------------------------------

class TapeOps {
 public:
  static Var emit(Tape& t, Tape::Node n) {
    bool ng = false;
    for (int i : n.in) ng = ng || t.nodes_[static_cast<std::size_t>(i)].needs_grad;
    n.needs_grad = ng;
    return Var{&t, t.add_node(std::move(n))};
  }
  static const Tape::Node& node(const Tape& t, int id) {
    return t.nodes_[static_cast<std::size_t>(id)];
  }
  static void backward_impl(Tape& t, Var loss);
};

namespace {

Tape& same_tape(Var a, Var b, const char* op) {
  if (a.tape != b.tape) fail(std::string(op) + ": operands live on different tapes");
  return *a.tape;
}

template <class F>
Var binary_op(Op op, const char* name, Var a, Var b, F f) {
  Tape& t = same_tape(a, b, name);
  Shape os = broadcast_shape(a.shape(), b.shape(), name);
  Tensor out(os, t.dtype());
  if (t.dtype() == Dtype::F32)
    bcast_binary<float>(a.val(), b.val(), out, f);
  else
    bcast_binary<double>(a.val(), b.val(), out, f);
  Tape::Node n;
  n.op = op;
  n.in = {a.id, b.id};
  n.out = std::move(out);
  return TapeOps::emit(t, std::move(n));
}

template <class F>
Var unary_op(Op op, const char* name, Var x, F f) {
  Tape& t = *x.tape;
  Tensor out(x.shape(), t.dtype());
  if (t.dtype() == Dtype::F32)
    map_unary<float>(x.val(), out, f);
  else
    map_unary<double>(x.val(), out, f);
  Tape::Node n;
  n.op = op;
  n.in = {x.id};
  n.out = std::move(out);
  (void)name;
  return TapeOps::emit(t, std::move(n));
}

}  // namespace

Var add(Var a, Var b) {
  return binary_op(Op::Add, "add", a, b, [](auto x, auto y) { return x + y; });
}
Var sub(Var a, Var b) {
  return binary_op(Op::Sub, "sub", a, b, [](auto x, auto y) { return x - y; });
}
Var mul(Var a, Var b) {
  return binary_op(Op::Mul, "mul", a, b, [](auto x, auto y) { return x * y; });
}
Var div(Var a, Var b) {
  return binary_op(Op::Div, "div", a, b, [](auto x, auto y) { return x / y; });
}

Var relu(Var x) {
  return unary_op(Op::Relu, "relu", x, [](auto v) { return v > decltype(v)(0) ? v : decltype(v)(0); });
}
Var softplus(Var x) {
  return unary_op(Op::Softplus, "softplus", x, [](auto v) {
    using T = decltype(v);
    return v > T(0) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
  });
}
Var exp(Var x) {
  return unary_op(Op::Exp, "exp", x, [](auto v) { return std::exp(v); });
}
Var log(Var x) {
  return unary_op(Op::Log, "log", x, [](auto v) { return std::log(v); });
}
Var square(Var x) {
  return unary_op(Op::Square, "square", x, [](auto v) { return v * v; });
}
Var sqrt(Var x) {
  return unary_op(Op::Sqrt, "sqrt", x, [](auto v) { return std::sqrt(v); });
}

Var operator+(Var a, double b) { return add(a, a.tape->scalar(b)); }
Var operator-(Var a, double b) { return sub(a, a.tape->scalar(b)); }
Var operator*(Var a, double b) { return mul(a, a.tape->scalar(b)); }
Var operator+(double a, Var b) { return add(b.tape->scalar(a), b); }
Var operator-(double a, Var b) { return sub(b.tape->scalar(a), b); }
Var operator*(double a, Var b) { return mul(b.tape->scalar(a), b); }
Var operator-(Var a) { return a * -1.0; }

// --- matmul ----------------------------------------------------------------

namespace {

struct MatmulDims {
  Shape batch;          // broadcast leading dims
  i64 m, k, n;
  std::vector<i64> bsa; // per-batch-dim element strides into a (0 if broadcast)
  std::vector<i64> bsb;
};

MatmulDims matmul_dims(const Shape& a, const Shape& b, bool trans_b) {
  if (a.size() < 2 || b.size() < 2)
    fail("matmul: operands must have rank >= 2, got " + shape_str(a) + " and " + shape_str(b));
  MatmulDims d;
  d.m = a[a.size() - 2];
  d.k = a[a.size() - 1];
  const i64 bk = trans_b ? b[b.size() - 1] : b[b.size() - 2];
  d.n = trans_b ? b[b.size() - 2] : b[b.size() - 1];
  if (bk != d.k)
    fail("matmul: inner dimensions differ for " + shape_str(a) + (trans_b ? " x T" : " x ") +
         shape_str(b));
  Shape la(a.begin(), a.end() - 2), lb(b.begin(), b.end() - 2);
  d.batch = broadcast_shape(la, lb, "matmul");
  d.bsa = strides_in(la, d.batch);
  d.bsb = strides_in(lb, d.batch);
  const i64 slice_a = d.m * d.k;
  const i64 slice_b = (trans_b ? d.n * d.k : d.k * d.n);
  for (auto& s : d.bsa) s *= slice_a;
  for (auto& s : d.bsb) s *= slice_b;
  return d;
}

// offsets of every batch slice, in row-major batch order
void batch_offsets(const Shape& batch, const std::vector<i64>& sa, const std::vector<i64>& sb,
                   std::vector<i64>& offa, std::vector<i64>& offb) {
  const i64 nb = shape_numel(batch);
  offa.assign(static_cast<std::size_t>(nb), 0);
  offb.assign(static_cast<std::size_t>(nb), 0);
  const int r = static_cast<int>(batch.size());
  std::vector<i64> idx(static_cast<std::size_t>(r), 0);
  i64 oa = 0, ob = 0;
  for (i64 i = 0; i < nb; ++i) {
    offa[static_cast<std::size_t>(i)] = oa;
    offb[static_cast<std::size_t>(i)] = ob;
    for (int d2 = r - 1; d2 >= 0; --d2) {
      auto du = static_cast<std::size_t>(d2);
      ++idx[du];
      oa += sa[du];
      ob += sb[du];
      if (idx[du] < batch[du]) break;
      oa -= sa[du] * batch[du];
      ob -= sb[du] * batch[du];
      idx[du] = 0;
    }
  }
}

template <typename T>
void matmul_forward(const MatmulDims& d, bool trans_b, const Tensor& a, const Tensor& b,
                    Tensor& out) {
  const T* A = a.data<T>().data();
  const T* B = b.data<T>().data();
  T* O = out.data<T>().data();
  const i64 nb = shape_numel(d.batch);
  if (nb == 1) {
    if (trans_b)
      kernels::gemm_nt(d.m, d.n, d.k, A, B, O, false);
    else
      kernels::gemm_nn(d.m, d.n, d.k, A, B, O, false);
    return;
  }
  std::vector<i64> offa, offb;
  batch_offsets(d.batch, d.bsa, d.bsb, offa, offb);
  const i64 oslice = d.m * d.n;
  constexpr auto serial = kernels::Mode::Serial;
#pragma omp parallel for schedule(static) if (kernels::parallel())
  for (i64 i = 0; i < nb; ++i) {
    if (trans_b)
      kernels::gemm_nt(d.m, d.n, d.k, A + offa[static_cast<std::size_t>(i)],
                       B + offb[static_cast<std::size_t>(i)], O + i * oslice, false, serial);
    else
      kernels::gemm_nn(d.m, d.n, d.k, A + offa[static_cast<std::size_t>(i)],
                       B + offb[static_cast<std::size_t>(i)], O + i * oslice, false, serial);
  }
}

}  // namespace

Var matmul(Var a, Var b, bool transpose_rhs) {
  Tape& t = same_tape(a, b, "matmul");
  // Fast path: 2-D rhs shared across all leading dims of lhs collapses into
  // one GEMM over the flattened rows.
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  MatmulDims d = matmul_dims(as, bs, transpose_rhs);
  Shape os = d.batch;
  os.push_back(d.m);
  os.push_back(d.n);
  Tensor out(os, t.dtype());
  if (bs.size() == 2) {
    const i64 rows = shape_numel(as) / d.k;
    if (t.dtype() == Dtype::F32) {
      if (transpose_rhs)
        kernels::gemm_nt<float>(rows, d.n, d.k, a.val().data<float>().data(),
                                b.val().data<float>().data(), out.data<float>().data(), false);
      else
        kernels::gemm_nn<float>(rows, d.n, d.k, a.val().data<float>().data(),
                                b.val().data<float>().data(), out.data<float>().data(), false);
    } else {
      if (transpose_rhs)
        kernels::gemm_nt<double>(rows, d.n, d.k, a.val().data<double>().data(),
                                 b.val().data<double>().data(), out.data<double>().data(), false);
      else
        kernels::gemm_nn<double>(rows, d.n, d.k, a.val().data<double>().data(),
                                 b.val().data<double>().data(), out.data<double>().data(), false);
    }
  } else if (t.dtype() == Dtype::F32) {
    matmul_forward<float>(d, transpose_rhs, a.val(), b.val(), out);
  } else {
    matmul_forward<double>(d, transpose_rhs, a.val(), b.val(), out);
  }
  Tape::Node n;
  n.op = Op::Matmul;
  n.in = {a.id, b.id};
  n.out = std::move(out);
  n.transpose_rhs = transpose_rhs;
  return TapeOps::emit(t, std::move(n));
}

// --- reductions, shape ops ---------------------------------------------------

Var sum(Var x, int axis, bool keepdim) {
  Tape& t = *x.tape;
  const int a = normalize_axis(axis, x.rank(), "sum");
  Tensor out = t.dtype() == Dtype::F32 ? sum_over_axis<float>(x.val(), a, keepdim)
                                       : sum_over_axis<double>(x.val(), a, keepdim);
  Tape::Node n;
  n.op = Op::SumAxis;
  n.in = {x.id};
  n.out = std::move(out);
  n.axis = a;
  return TapeOps::emit(t, std::move(n));
}

Var mean(Var x, int axis, bool keepdim) {
  const int a = normalize_axis(axis, x.rank(), "mean");
  const i64 red = x.shape()[static_cast<std::size_t>(a)];
  if (red == 0) fail("mean: cannot reduce an empty axis of " + shape_str(x.shape()));
  return sum(x, a, keepdim) * (1.0 / static_cast<double>(red));
}

Var sum_all(Var x) {
  Var v = x;
  while (v.rank() > 0) v = sum(v, 0, false);
  return v;
}

Var concat(const std::vector<Var>& xs, int axis) {
  if (xs.empty()) fail("concat: no inputs");
  Tape& t = *xs[0].tape;
  const int r = xs[0].rank();
  const int a = normalize_axis(axis, r, "concat");
  Shape os = xs[0].shape();
  i64 total = 0;
  for (const Var& v : xs) {
    if (v.rank() != r) fail("concat: rank mismatch between inputs");
    for (int d = 0; d < r; ++d) {
      if (d != a && v.shape()[static_cast<std::size_t>(d)] != os[static_cast<std::size_t>(d)])
        fail("concat: shape " + shape_str(v.shape()) + " incompatible with " + shape_str(os) +
             " along axis " + std::to_string(a));
    }
    total += v.shape()[static_cast<std::size_t>(a)];
  }
  os[static_cast<std::size_t>(a)] = total;
  Tensor out(os, t.dtype());
  i64 outer = 1, inner = 1;
  for (int d = 0; d < a; ++d) outer *= os[static_cast<std::size_t>(d)];
  for (int d = a + 1; d < r; ++d) inner *= os[static_cast<std::size_t>(d)];
  const i64 orow = total * inner;
  i64 pos = 0;
  for (const Var& v : xs) {
    const i64 width = v.shape()[static_cast<std::size_t>(a)] * inner;
    if (t.dtype() == Dtype::F32) {
      const float* src = v.val().data<float>().data();
      float* dst = out.data<float>().data();
      for (i64 o = 0; o < outer; ++o)
        std::copy(src + o * width, src + (o + 1) * width, dst + o * orow + pos);
    } else {
      const double* src = v.val().data<double>().data();
      double* dst = out.data<double>().data();
      for (i64 o = 0; o < outer; ++o)
        std::copy(src + o * width, src + (o + 1) * width, dst + o * orow + pos);
    }
    pos += width;
  }
  Tape::Node n;
  n.op = Op::Concat;
  n.in.reserve(xs.size());
  for (const Var& v : xs) n.in.push_back(v.id);
  n.out = std::move(out);
  n.axis = a;
  return TapeOps::emit(t, std::move(n));
}

Var slice(Var x, int axis, i64 start, i64 len) {
  Tape& t = *x.tape;
  const int a = normalize_axis(axis, x.rank(), "slice");
  const Shape& s = x.shape();
  if (start < 0 || len < 0 || start + len > s[static_cast<std::size_t>(a)])
    fail("slice: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
         ") out of bounds for axis " + std::to_string(a) + " of " + shape_str(s));
  Shape os = s;
  os[static_cast<std::size_t>(a)] = len;
  Tensor out(os, t.dtype());
  i64 outer = 1, inner = 1;
  for (int d = 0; d < a; ++d) outer *= s[static_cast<std::size_t>(d)];
  for (int d = a + 1; d < x.rank(); ++d) inner *= s[static_cast<std::size_t>(d)];
  const i64 src_row = s[static_cast<std::size_t>(a)] * inner;
  const i64 dst_row = len * inner;
  if (t.dtype() == Dtype::F32) {
    const float* src = x.val().data<float>().data();
    float* dst = out.data<float>().data();
    for (i64 o = 0; o < outer; ++o)
      std::copy(src + o * src_row + start * inner, src + o * src_row + (start + len) * inner,
                dst + o * dst_row);
  } else {
    const double* src = x.val().data<double>().data();
    double* dst = out.data<double>().data();
    for (i64 o = 0; o < outer; ++o)
      std::copy(src + o * src_row + start * inner, src + o * src_row + (start + len) * inner,
                dst + o * dst_row);
  }
  Tape::Node n;
  n.op = Op::Slice;
  n.in = {x.id};
  n.out = std::move(out);
  n.axis = a;
  n.slice_start = start;
  return TapeOps::emit(t, std::move(n));
}

Var gather_rows(Var x, const std::vector<i64>& indices, const Shape& idx_shape) {
  Tape& t = *x.tape;
  if (x.rank() < 2) fail("gather: input must have rank >= 2, got " + shape_str(x.shape()));
  if (static_cast<i64>(indices.size()) != shape_numel(idx_shape))
    fail("gather: index count does not match index shape " + shape_str(idx_shape));
  const Shape& xs = x.shape();
  const i64 nrow = xs[xs.size() - 2];
  const i64 dim = xs[xs.size() - 1];
  for (i64 ix : indices)
    if (ix < 0 || ix >= nrow)
      fail("gather: index " + std::to_string(ix) + " out of range [0, " + std::to_string(nrow) +
           ") for " + shape_str(xs));
  Shape xlead(xs.begin(), xs.end() - 2);
  Shape ilead(idx_shape.begin(), idx_shape.end() - 1);
  const i64 m = idx_shape.empty() ? 1 : idx_shape.back();
  Shape lead = broadcast_shape(xlead, ilead, "gather");
  if (lead != ilead && shape_numel(lead) != shape_numel(ilead))
    fail("gather: index leading dims " + shape_str(ilead) + " must cover input leading dims " +
         shape_str(xlead));
  Shape os = lead;
  os.push_back(m);
  os.push_back(dim);
  Tensor out(os, t.dtype());
  auto xstr = strides_in(xlead, lead);
  for (auto& s2 : xstr) s2 *= nrow * dim;
  const i64 nlead = shape_numel(lead);
  // per-lead source offsets
  std::vector<i64> src_off(static_cast<std::size_t>(nlead), 0);
  {
    const int r = static_cast<int>(lead.size());
    std::vector<i64> idx(static_cast<std::size_t>(r), 0);
    i64 off = 0;
    for (i64 i = 0; i < nlead; ++i) {
      src_off[static_cast<std::size_t>(i)] = off;
      for (int d = r - 1; d >= 0; --d) {
        auto du = static_cast<std::size_t>(d);
        ++idx[du];
        off += xstr[du];
        if (idx[du] < lead[du]) break;
        off -= xstr[du] * lead[du];
        idx[du] = 0;
      }
    }
  }
  if (t.dtype() == Dtype::F32) {
    const float* X = x.val().data<float>().data();
    float* O = out.data<float>().data();
#pragma omp parallel for schedule(static) if (kernels::parallel() && nlead > 1)
    for (i64 l = 0; l < nlead; ++l)
      for (i64 j = 0; j < m; ++j)
        std::copy(X + src_off[static_cast<std::size_t>(l)] + indices[static_cast<std::size_t>(l * m + j)] * dim,
                  X + src_off[static_cast<std::size_t>(l)] + (indices[static_cast<std::size_t>(l * m + j)] + 1) * dim,
                  O + (l * m + j) * dim);
  } else {
    const double* X = x.val().data<double>().data();
    double* O = out.data<double>().data();
#pragma omp parallel for schedule(static) if (kernels::parallel() && nlead > 1)
    for (i64 l = 0; l < nlead; ++l)
      for (i64 j = 0; j < m; ++j)
        std::copy(X + src_off[static_cast<std::size_t>(l)] + indices[static_cast<std::size_t>(l * m + j)] * dim,
                  X + src_off[static_cast<std::size_t>(l)] + (indices[static_cast<std::size_t>(l * m + j)] + 1) * dim,
                  O + (l * m + j) * dim);
  }
  Tape::Node n;
  n.op = Op::GatherRows;
  n.in = {x.id};
  n.out = std::move(out);
  n.indices = indices;
  n.attr_shape = idx_shape;
  return TapeOps::emit(t, std::move(n));
}

Var softmax_lastdim(Var x) {
  Tape& t = *x.tape;
  if (x.rank() == 0) fail("softmax: input must have rank >= 1");
  const i64 width = x.extent(-1);
  if (width == 0) fail("softmax: empty last axis in " + shape_str(x.shape()));
  const i64 rows = x.val().numel() / width;
  Tensor out(x.shape(), t.dtype());
  if (t.dtype() == Dtype::F32)
    kernels::softmax_rows<float>(rows, width, x.val().data<float>().data(),
                                 out.data<float>().data());
  else
    kernels::softmax_rows<double>(rows, width, x.val().data<double>().data(),
                                  out.data<double>().data());
  Tape::Node n;
  n.op = Op::Softmax;
  n.in = {x.id};
  n.out = std::move(out);
  return TapeOps::emit(t, std::move(n));
}

Var logsumexp_lastdim(Var x) {
  Tape& t = *x.tape;
  if (x.rank() == 0) fail("logsumexp: input must have rank >= 1");
  const i64 width = x.extent(-1);
  if (width == 0) fail("logsumexp: empty last axis in " + shape_str(x.shape()));
  const i64 rows = x.val().numel() / width;
  Shape os(x.shape().begin(), x.shape().end() - 1);
  Tensor out(os, t.dtype());
  if (t.dtype() == Dtype::F32)
    kernels::logsumexp_rows<float>(rows, width, x.val().data<float>().data(),
                                   out.data<float>().data());
  else
    kernels::logsumexp_rows<double>(rows, width, x.val().data<double>().data(),
                                    out.data<double>().data());
  Tape::Node n;
  n.op = Op::LogSumExp;
  n.in = {x.id};
  n.out = std::move(out);
  return TapeOps::emit(t, std::move(n));
}

Var layer_norm_lastdim(Var x, double eps) {
  Tape& t = *x.tape;
  if (x.rank() == 0) fail("layer_norm: input must have rank >= 1");
  const i64 width = x.extent(-1);
  if (width == 0) fail("layer_norm: empty last axis in " + shape_str(x.shape()));
  const i64 rows = x.val().numel() / width;
  Tensor out(x.shape(), t.dtype());
  Tensor mean_t({rows}, t.dtype());
  Tensor inv_std({rows}, t.dtype());
  if (t.dtype() == Dtype::F32)
    kernels::layer_norm_rows<float>(rows, width, static_cast<float>(eps),
                                    x.val().data<float>().data(), out.data<float>().data(),
                                    mean_t.data<float>().data(), inv_std.data<float>().data());
  else
    kernels::layer_norm_rows<double>(rows, width, eps, x.val().data<double>().data(),
                                     out.data<double>().data(), mean_t.data<double>().data(),
                                     inv_std.data<double>().data());
  Tape::Node n;
  n.op = Op::LayerNorm;
  n.in = {x.id};
  n.out = std::move(out);
  n.aux = std::move(mean_t);
  n.aux2 = std::move(inv_std);
  return TapeOps::emit(t, std::move(n));
}

namespace {

template <typename T>
void gld_forward(const Tensor& y, const Tensor& mu, const Tensor& sigma, Tensor& out) {
  const Shape& os = out.shape();
  const auto sy = strides_in(y.shape(), os);
  const auto sm = strides_in(mu.shape(), os);
  const T* Y = y.data<T>().data();
  const T* M = mu.data<T>().data();
  const T* S = sigma.data<T>().data();
  T* O = out.data<T>().data();
  rows_zip(os, sy, sm, [&](i64 oo, i64 oy, i64 om, i64 inner, i64 ly, i64 lm) {
    for (i64 i = 0; i < inner; ++i) {
      const T yv = Y[oy + i * ly];
      const T mv = M[om + i * lm];
      const T sv = S[om + i * lm];
      const T z = (yv - mv) / sv;
      O[oo + i] = -T(kHalfLog2Pi) - std::log(sv) - T(0.5) * z * z;
    }
  });
}

}  // namespace

Var gaussian_log_density(Var y, Var mu, Var sigma) {
  Tape& t = same_tape(y, mu, "gaussian_log_density");
  if (mu.shape() != sigma.shape())
    fail("gaussian_log_density: mu " + shape_str(mu.shape()) + " and sigma " +
         shape_str(sigma.shape()) + " must have the same shape");
  // sigma > 0 elementwise
  {
    const Tensor& s = sigma.val();
    const i64 n = s.numel();
    for (i64 i = 0; i < n; ++i)
      if (!(s.at(i) > 0.0))
        fail("gaussian_log_density: sigma must be positive everywhere, got " +
             std::to_string(s.at(i)));
  }
  Shape os = broadcast_shape(y.shape(), mu.shape(), "gaussian_log_density");
  Tensor out(os, t.dtype());
  if (t.dtype() == Dtype::F32)
    gld_forward<float>(y.val(), mu.val(), sigma.val(), out);
  else
    gld_forward<double>(y.val(), mu.val(), sigma.val(), out);
  Tape::Node n;
  n.op = Op::GaussianLogDensity;
  n.in = {y.id, mu.id, sigma.id};
  n.out = std::move(out);
  return TapeOps::emit(t, std::move(n));
}

Var broadcast_to(Var x, const Shape& shape) {
  Tape& t = *x.tape;
  const Shape os = broadcast_shape(x.shape(), shape, "broadcast_to");
  if (os != shape)
    fail("broadcast_to: cannot broadcast " + shape_str(x.shape()) + " to " + shape_str(shape));
  Tensor out(shape, t.dtype());
  if (t.dtype() == Dtype::F32)
    bcast_binary<float>(x.val(), x.val(), out, [](float a, float) { return a; });
  else
    bcast_binary<double>(x.val(), x.val(), out, [](double a, double) { return a; });
  Tape::Node n;
  n.op = Op::BroadcastTo;
  n.in = {x.id};
  n.out = std::move(out);
  n.attr_shape = x.shape();
  return TapeOps::emit(t, std::move(n));
}

Var reshape(Var x, const Shape& shape) {
  Tape& t = *x.tape;
  Shape target = shape;
  // allow a single -1 extent
  i64 known = 1;
  int wildcard = -1;
  for (std::size_t d = 0; d < target.size(); ++d) {
    if (target[d] == -1) {
      if (wildcard >= 0) fail("reshape: more than one -1 extent");
      wildcard = static_cast<int>(d);
    } else {
      known *= target[d];
    }
  }
  if (wildcard >= 0) {
    if (known == 0 || x.val().numel() % known != 0)
      fail("reshape: cannot infer extent for " + shape_str(x.shape()) + " -> " + shape_str(shape));
    target[static_cast<std::size_t>(wildcard)] = x.val().numel() / known;
  }
  Tape::Node n;
  n.op = Op::Reshape;
  n.in = {x.id};
  n.out = x.val().reshaped(target);
  n.attr_shape = x.shape();
  return TapeOps::emit(t, std::move(n));
}

// --- backward ---------------------------------------------------------------

namespace {

template <typename T>
Tensor bcast_grad_mul(const Tensor& g, const Tensor& other, const Shape& target) {
  // g has the broadcast output shape; multiply elementwise by `other`
  // (broadcast) then reduce to `target`.
  Tensor prod(g.shape(), g.dtype());
  bcast_binary<T>(g, other, prod, [](T a, T b) { return a * b; });
  Tensor out = Tensor::zeros(target, g.dtype());
  reduce_to_shape_add<T>(prod, target, out);
  return out;
}

}  // namespace

void TapeOps::backward_impl(Tape& t, Var loss) {
  if (loss.tape != &t) fail("backward: loss lives on a different tape");
  const Tape::Node& ln = t.nodes_[static_cast<std::size_t>(loss.id)];
  if (ln.out.rank() != 0)
    fail("backward: loss must be a scalar, got shape " + shape_str(ln.out.shape()));
  t.grads_.assign(t.nodes_.size(), Tensor());
  t.grads_[static_cast<std::size_t>(loss.id)] = Tensor::full({}, 1.0, t.dtype_);

  const Dtype dt = t.dtype_;
  for (int id = loss.id; id >= 0; --id) {
    Tape::Node& n = t.nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad) continue;
    if (n.op == Op::Leaf) continue;  // leaf grads stay for param_grads()/grad()
    if (t.grads_[static_cast<std::size_t>(id)].numel() == 0) continue;  // not reached
    const Tensor g = std::move(t.grads_[static_cast<std::size_t>(id)]);
    t.grads_[static_cast<std::size_t>(id)] = Tensor();
    switch (n.op) {
      case Op::Leaf:
        break;
      case Op::Add: {
        const auto& a = t.nodes_[static_cast<std::size_t>(n.in[0])];
        const auto& b = t.nodes_[static_cast<std::size_t>(n.in[1])];
        if (a.needs_grad) {
          Tensor da = Tensor::zeros(a.out.shape(), dt);
          if (dt == Dtype::F32)
            reduce_to_shape_add<float>(g, a.out.shape(), da);
          else
            reduce_to_shape_add<double>(g, a.out.shape(), da);
          t.accumulate(n.in[0], da);
        }
        if (b.needs_grad) {
          Tensor db = Tensor::zeros(b.out.shape(), dt);
          if (dt == Dtype::F32)
            reduce_to_shape_add<float>(g, b.out.shape(), db);
          else
            reduce_to_shape_add<double>(g, b.out.shape(), db);
          t.accumulate(n.in[1], db);
        }
        break;
      }
      case Op::Sub: {
        const auto& a = t.nodes_[static_cast<std::size_t>(n.in[0])];
        const auto& b = t.nodes_[static_cast<std::size_t>(n.in[1])];
        if (a.needs_grad) {
          Tensor da = Tensor::zeros(a.out.shape(), dt);
          if (dt == Dtype::F32)
            reduce_to_shape_add<float>(g, a.out.shape(), da);
          else
            reduce_to_shape_add<double>(g, a.out.shape(), da);
          t.accumulate(n.in[0], da);
        }
        if (b.needs_grad) {
          Tensor neg(g.shape(), dt);
          if (dt == Dtype::F32)
            map_unary<float>(g, neg, [](float v) { return -v; });
          else
            map_unary<double>(g, neg, [](double v) { return -v; });
          Tensor db = Tensor::zeros(b.out.shape(), dt);
          if (dt == Dtype::F32)
            reduce_to_shape_add<float>(neg, b.out.shape(), db);
          else
            reduce_to_shape_add<double>(neg, b.out.shape(), db);
          t.accumulate(n.in[1], db);
        }
        break;
      }
      case Op::Mul: {
        const auto& a = t.nodes_[static_cast<std::size_t>(n.in[0])];
        const auto& b = t.nodes_[static_cast<std::size_t>(n.in[1])];
        if (a.needs_grad)
          t.accumulate(n.in[0], dt == Dtype::F32
                                    ? bcast_grad_mul<float>(g, b.out, a.out.shape())
                                    : bcast_grad_mul<double>(g, b.out, a.out.shape()));
        if (b.needs_grad)
          t.accumulate(n.in[1], dt == Dtype::F32
                                    ? bcast_grad_mul<float>(g, a.out, b.out.shape())
                                    : bcast_grad_mul<double>(g, a.out, b.out.shape()));
        break;
      }
      case Op::Div: {
        const auto& a = t.nodes_[static_cast<std::size_t>(n.in[0])];
        const auto& b = t.nodes_[static_cast<std::size_t>(n.in[1])];
        if (a.needs_grad) {
          Tensor inv(b.out.shape(), dt);
          if (dt == Dtype::F32)
            map_unary<float>(b.out, inv, [](float v) { return 1.0f / v; });
          else
            map_unary<double>(b.out, inv, [](double v) { return 1.0 / v; });
          t.accumulate(n.in[0], dt == Dtype::F32
                                    ? bcast_grad_mul<float>(g, inv, a.out.shape())
                                    : bcast_grad_mul<double>(g, inv, a.out.shape()));
        }
        if (b.needs_grad) {
          // d/db (a/b) = -a / b^2 = -out / b
          Tensor factor(n.out.shape(), dt);
          if (dt == Dtype::F32)
            bcast_binary<float>(n.out, b.out, factor, [](float o, float bb) { return -o / bb; });
          else
            bcast_binary<double>(n.out, b.out, factor,
                                 [](double o, double bb) { return -o / bb; });
          t.accumulate(n.in[1], dt == Dtype::F32
                                    ? bcast_grad_mul<float>(g, factor, b.out.shape())
                                    : bcast_grad_mul<double>(g, factor, b.out.shape()));
        }
        break;
      }
      case Op::Matmul: {
        const auto& a = t.nodes_[static_cast<std::size_t>(n.in[0])];
        const auto& b = t.nodes_[static_cast<std::size_t>(n.in[1])];
        const MatmulDims d = matmul_dims(a.out.shape(), b.out.shape(), n.transpose_rhs);
        const i64 nb = shape_numel(d.batch);
        const bool rhs2d = b.out.rank() == 2;
        if (rhs2d) {
          const i64 rows = shape_numel(a.out.shape()) / d.k;
          if (a.needs_grad) {
            Tensor da(a.out.shape(), dt);
            if (dt == Dtype::F32) {
              if (n.transpose_rhs)
                kernels::gemm_nn<float>(rows, d.k, d.n, g.data<float>().data(),
                                        b.out.data<float>().data(), da.data<float>().data(), false);
              else
                kernels::gemm_nt<float>(rows, d.k, d.n, g.data<float>().data(),
                                        b.out.data<float>().data(), da.data<float>().data(), false);
            } else {
              if (n.transpose_rhs)
                kernels::gemm_nn<double>(rows, d.k, d.n, g.data<double>().data(),
                                         b.out.data<double>().data(), da.data<double>().data(),
                                         false);
              else
                kernels::gemm_nt<double>(rows, d.k, d.n, g.data<double>().data(),
                                         b.out.data<double>().data(), da.data<double>().data(),
                                         false);
            }
            t.accumulate(n.in[0], da);
          }
          if (b.needs_grad) {
            Tensor db(b.out.shape(), dt);
            if (dt == Dtype::F32) {
              if (n.transpose_rhs)
                kernels::gemm_tn<float>(rows, d.k, d.n, g.data<float>().data(),
                                        a.out.data<float>().data(), db.data<float>().data(), false);
              else
                kernels::gemm_tn<float>(rows, d.n, d.k, a.out.data<float>().data(),
                                        g.data<float>().data(), db.data<float>().data(), false);
            } else {
              if (n.transpose_rhs)
                kernels::gemm_tn<double>(rows, d.k, d.n, g.data<double>().data(),
                                         a.out.data<double>().data(), db.data<double>().data(),
                                         false);
              else
                kernels::gemm_tn<double>(rows, d.n, d.k, a.out.data<double>().data(),
                                         g.data<double>().data(), db.data<double>().data(), false);
            }
            t.accumulate(n.in[1], db);
          }
        } else {
          std::vector<i64> offa, offb;
          batch_offsets(d.batch, d.bsa, d.bsb, offa, offb);
          const i64 oslice = d.m * d.n;
          constexpr auto serial = kernels::Mode::Serial;
          auto batched = [&](auto typetag) {
            using T = decltype(typetag);
            const T* G = g.data<T>().data();
            const T* A = a.out.data<T>().data();
            const T* B = b.out.data<T>().data();
            if (a.needs_grad) {
              Tensor da = Tensor::zeros(a.out.shape(), dt);
              T* DA = da.data<T>().data();
              bool a_bcast = false;
              for (i64 s2 : d.bsa) a_bcast = a_bcast || (s2 == 0 && nb > 1);
              // dA_b = G_b * B_b^T (or G_b * B_b when rhs transposed); slices
              // shared through broadcasting are accumulated in batch order.
#pragma omp parallel for schedule(static) if (kernels::parallel() && !a_bcast)
              for (i64 i2 = 0; i2 < nb; ++i2) {
                const auto iu = static_cast<std::size_t>(i2);
                if (n.transpose_rhs)
                  kernels::gemm_nn<T>(d.m, d.k, d.n, G + i2 * oslice, B + offb[iu], DA + offa[iu],
                                      true, serial);
                else
                  kernels::gemm_nt<T>(d.m, d.k, d.n, G + i2 * oslice, B + offb[iu], DA + offa[iu],
                                      true, serial);
              }
              t.accumulate(n.in[0], da);
            }
            if (b.needs_grad) {
              Tensor db = Tensor::zeros(b.out.shape(), dt);
              T* DB = db.data<T>().data();
              bool b_bcast = false;
              for (i64 s2 : d.bsb) b_bcast = b_bcast || (s2 == 0 && nb > 1);
#pragma omp parallel for schedule(static) if (kernels::parallel() && !b_bcast)
              for (i64 i2 = 0; i2 < nb; ++i2) {
                const auto iu = static_cast<std::size_t>(i2);
                if (n.transpose_rhs)
                  kernels::gemm_tn<T>(d.m, d.k, d.n, G + i2 * oslice, A + offa[iu], DB + offb[iu],
                                      true, serial);
                else
                  kernels::gemm_tn<T>(d.m, d.n, d.k, A + offa[iu], G + i2 * oslice, DB + offb[iu],
                                      true, serial);
              }
              t.accumulate(n.in[1], db);
            }
          };
          if (dt == Dtype::F32)
            batched(float{});
          else
            batched(double{});
        }
        break;
      }
      case Op::Relu: {
        const auto& x = t.nodes_[static_cast<std::size_t>(n.in[0])];
        Tensor dx(x.out.shape(), dt);
        if (dt == Dtype::F32)
          bcast_binary<float>(g, x.out, dx, [](float gv, float xv) { return xv > 0 ? gv : 0.0f; });
        else
          bcast_binary<double>(g, x.out, dx, [](double gv, double xv) { return xv > 0 ? gv : 0.0; });
        t.accumulate(n.in[0], dx);
        break;
      }
      case Op::Softplus: {
        const auto& x = t.nodes_[static_cast<std::size_t>(n.in[0])];
        Tensor dx(x.out.shape(), dt);
        if (dt == Dtype::F32)
          bcast_binary<float>(g, x.out, dx,
                              [](float gv, float xv) { return gv / (1.0f + std::exp(-xv)); });
        else
          bcast_binary<double>(g, x.out, dx,
                               [](double gv, double xv) { return gv / (1.0 + std::exp(-xv)); });
        t.accumulate(n.in[0], dx);
        break;
      }
      case Op::Exp: {
        Tensor dx(n.out.shape(), dt);
        if (dt == Dtype::F32)
          bcast_binary<float>(g, n.out, dx, [](float gv, float ov) { return gv * ov; });
        else
          bcast_binary<double>(g, n.out, dx, [](double gv, double ov) { return gv * ov; });
        t.accumulate(n.in[0], dx);
        break;
      }
      case Op::Log: {
        const auto& x = t.nodes_[static_cast<std::size_t>(n.in[0])];
        Tensor dx(x.out.shape(), dt);
        if (dt == Dtype::F32)
          bcast_binary<float>(g, x.out, dx, [](float gv, float xv) { return gv / xv; });
        else
          bcast_binary<double>(g, x.out, dx, [](double gv, double xv) { return gv / xv; });
        t.accumulate(n.in[0], dx);
        break;
      }
      case Op::Square: {
        const auto& x = t.nodes_[static_cast<std::size_t>(n.in[0])];
        Tensor dx(x.out.shape(), dt);
        if (dt == Dtype::F32)
          bcast_binary<float>(g, x.out, dx, [](float gv, float xv) { return 2.0f * gv * xv; });
        else
          bcast_binary<double>(g, x.out, dx, [](double gv, double xv) { return 2.0 * gv * xv; });
        t.accumulate(n.in[0], dx);
        break;
      }
      case Op::Sqrt: {
        Tensor dx(n.out.shape(), dt);
        if (dt == Dtype::F32)
          bcast_binary<float>(g, n.out, dx, [](float gv, float ov) { return gv / (2.0f * ov); });
        else
          bcast_binary<double>(g, n.out, dx, [](double gv, double ov) { return gv / (2.0 * ov); });
        t.accumulate(n.in[0], dx);
        break;
      }
      case Op::SumAxis: {
        const auto& x = t.nodes_[static_cast<std::size_t>(n.in[0])];
        // broadcast g back over the reduced axis
        Shape keep = x.out.shape();
        keep[static_cast<std::size_t>(n.axis)] = 1;
        Tensor gk = g.reshaped(keep);
        Tensor dx(x.out.shape(), dt);
        if (dt == Dtype::F32)
          bcast_binary<float>(gk, gk, dx, [](float a2, float) { return a2; });
        else
          bcast_binary<double>(gk, gk, dx, [](double a2, double) { return a2; });
        t.accumulate(n.in[0], dx);
        break;
      }
      case Op::Concat: {
        i64 pos = 0;
        const int a2 = n.axis;
        const Shape& os = n.out.shape();
        i64 outer = 1, inner = 1;
        for (int d2 = 0; d2 < a2; ++d2) outer *= os[static_cast<std::size_t>(d2)];
        for (int d2 = a2 + 1; d2 < static_cast<int>(os.size()); ++d2)
          inner *= os[static_cast<std::size_t>(d2)];
        const i64 orow = os[static_cast<std::size_t>(a2)] * inner;
        for (int ii : n.in) {
          const auto& x = t.nodes_[static_cast<std::size_t>(ii)];
          const i64 width = x.out.shape()[static_cast<std::size_t>(a2)] * inner;
          if (x.needs_grad) {
            Tensor dx(x.out.shape(), dt);
            if (dt == Dtype::F32) {
              const float* G = g.data<float>().data();
              float* D = dx.data<float>().data();
              for (i64 o = 0; o < outer; ++o)
                std::copy(G + o * orow + pos, G + o * orow + pos + width, D + o * width);
            } else {
              const double* G = g.data<double>().data();
              double* D = dx.data<double>().data();
              for (i64 o = 0; o < outer; ++o)
                std::copy(G + o * orow + pos, G + o * orow + pos + width, D + o * width);
            }
            t.accumulate(ii, dx);
          }
          pos += width;
        }
        break;
      }
      case Op::Slice: {
        const auto& x = t.nodes_[static_cast<std::size_t>(n.in[0])];
        Tensor dx = Tensor::zeros(x.out.shape(), dt);
        const Shape& s = x.out.shape();
        const int a2 = n.axis;
        i64 outer = 1, inner = 1;
        for (int d2 = 0; d2 < a2; ++d2) outer *= s[static_cast<std::size_t>(d2)];
        for (int d2 = a2 + 1; d2 < static_cast<int>(s.size()); ++d2)
          inner *= s[static_cast<std::size_t>(d2)];
        const i64 len = n.out.shape()[static_cast<std::size_t>(a2)];
        const i64 src_row = s[static_cast<std::size_t>(a2)] * inner;
        const i64 dst_row = len * inner;
        if (dt == Dtype::F32) {
          const float* G = g.data<float>().data();
          float* D = dx.data<float>().data();
          for (i64 o = 0; o < outer; ++o)
            std::copy(G + o * dst_row, G + (o + 1) * dst_row,
                      D + o * src_row + n.slice_start * inner);
        } else {
          const double* G = g.data<double>().data();
          double* D = dx.data<double>().data();
          for (i64 o = 0; o < outer; ++o)
            std::copy(G + o * dst_row, G + (o + 1) * dst_row,
                      D + o * src_row + n.slice_start * inner);
        }
        t.accumulate(n.in[0], dx);
        break;
      }
      case Op::GatherRows: {
        const auto& x = t.nodes_[static_cast<std::size_t>(n.in[0])];
        const Shape& xs = x.out.shape();
        const i64 nrow = xs[xs.size() - 2];
        const i64 dim = xs[xs.size() - 1];
        Shape xlead(xs.begin(), xs.end() - 2);
        Shape ilead(n.attr_shape.begin(), n.attr_shape.end() - 1);
        const i64 m = n.attr_shape.empty() ? 1 : n.attr_shape.back();
        Shape lead = broadcast_shape(xlead, ilead, "gather");
        auto xstr = strides_in(xlead, lead);
        for (auto& s2 : xstr) s2 *= nrow * dim;
        const i64 nlead = shape_numel(lead);
        Tensor dx = Tensor::zeros(xs, dt);
        const int r = static_cast<int>(lead.size());
        std::vector<i64> idx(static_cast<std::size_t>(r), 0);
        i64 off = 0;
        if (dt == Dtype::F32) {
          const float* G = g.data<float>().data();
          float* D = dx.data<float>().data();
          for (i64 l = 0; l < nlead; ++l) {
            for (i64 j = 0; j < m; ++j) {
              float* drow = D + off + n.indices[static_cast<std::size_t>(l * m + j)] * dim;
              const float* grow = G + (l * m + j) * dim;
              for (i64 c = 0; c < dim; ++c) drow[c] += grow[c];
            }
            for (int d2 = r - 1; d2 >= 0; --d2) {
              auto du = static_cast<std::size_t>(d2);
              ++idx[du];
              off += xstr[du];
              if (idx[du] < lead[du]) break;
              off -= xstr[du] * lead[du];
              idx[du] = 0;
            }
          }
        } else {
          const double* G = g.data<double>().data();
          double* D = dx.data<double>().data();
          for (i64 l = 0; l < nlead; ++l) {
            for (i64 j = 0; j < m; ++j) {
              double* drow = D + off + n.indices[static_cast<std::size_t>(l * m + j)] * dim;
              const double* grow = G + (l * m + j) * dim;
              for (i64 c = 0; c < dim; ++c) drow[c] += grow[c];
            }
            for (int d2 = r - 1; d2 >= 0; --d2) {
              auto du = static_cast<std::size_t>(d2);
              ++idx[du];
              off += xstr[du];
              if (idx[du] < lead[du]) break;
              off -= xstr[du] * lead[du];
              idx[du] = 0;
            }
          }
        }
        t.accumulate(n.in[0], dx);
        break;
      }
      case Op::Softmax: {
        const i64 width = n.out.extent(n.out.rank() - 1);
        const i64 rows = n.out.numel() / width;
        Tensor dx(n.out.shape(), dt);
        auto run = [&](auto typetag) {
          using T = decltype(typetag);
          const T* Y = n.out.data<T>().data();
          const T* G = g.data<T>().data();
          T* D = dx.data<T>().data();
#pragma omp parallel for schedule(static) if (kernels::parallel() && rows > 1)
          for (i64 r2 = 0; r2 < rows; ++r2) {
            const T* y = Y + r2 * width;
            const T* gr = G + r2 * width;
            T* d2 = D + r2 * width;
            T dot = T(0);
            for (i64 j = 0; j < width; ++j) dot += gr[j] * y[j];
            for (i64 j = 0; j < width; ++j) d2[j] = y[j] * (gr[j] - dot);
          }
        };
        if (dt == Dtype::F32)
          run(float{});
        else
          run(double{});
        t.accumulate(n.in[0], dx);
        break;
      }
      case Op::LogSumExp: {
        const auto& x = t.nodes_[static_cast<std::size_t>(n.in[0])];
        const i64 width = x.out.extent(x.out.rank() - 1);
        const i64 rows = x.out.numel() / width;
        Tensor dx(x.out.shape(), dt);
        auto run = [&](auto typetag) {
          using T = decltype(typetag);
          const T* X = x.out.data<T>().data();
          const T* L = n.out.data<T>().data();
          const T* G = g.data<T>().data();
          T* D = dx.data<T>().data();
#pragma omp parallel for schedule(static) if (kernels::parallel() && rows > 1)
          for (i64 r2 = 0; r2 < rows; ++r2) {
            const T* xr = X + r2 * width;
            T* d2 = D + r2 * width;
            const T lse = L[r2];
            const T gv = G[r2];
            for (i64 j = 0; j < width; ++j) d2[j] = gv * std::exp(xr[j] - lse);
          }
        };
        if (dt == Dtype::F32)
          run(float{});
        else
          run(double{});
        t.accumulate(n.in[0], dx);
        break;
      }
      case Op::LayerNorm: {
        const i64 width = n.out.extent(n.out.rank() - 1);
        const i64 rows = n.out.numel() / width;
        Tensor dx(n.out.shape(), dt);
        auto run = [&](auto typetag) {
          using T = decltype(typetag);
          const T* Y = n.out.data<T>().data();
          const T* IS = n.aux2.data<T>().data();
          const T* G = g.data<T>().data();
          T* D = dx.data<T>().data();
          const T invw = T(1) / static_cast<T>(width);
#pragma omp parallel for schedule(static) if (kernels::parallel() && rows > 1)
          for (i64 r2 = 0; r2 < rows; ++r2) {
            const T* y = Y + r2 * width;
            const T* gr = G + r2 * width;
            T* d2 = D + r2 * width;
            T m1 = T(0), m2 = T(0);
            for (i64 j = 0; j < width; ++j) {
              m1 += gr[j];
              m2 += gr[j] * y[j];
            }
            m1 *= invw;
            m2 *= invw;
            const T is = IS[r2];
            for (i64 j = 0; j < width; ++j) d2[j] = is * (gr[j] - m1 - y[j] * m2);
          }
        };
        if (dt == Dtype::F32)
          run(float{});
        else
          run(double{});
        t.accumulate(n.in[0], dx);
        break;
      }
      case Op::GaussianLogDensity: {
        const auto& yv = t.nodes_[static_cast<std::size_t>(n.in[0])];
        const auto& muv = t.nodes_[static_cast<std::size_t>(n.in[1])];
        const auto& sv = t.nodes_[static_cast<std::size_t>(n.in[2])];
        auto run = [&](auto typetag) {
          using T = decltype(typetag);
          const Shape& os = n.out.shape();
          const auto sy = strides_in(yv.out.shape(), os);
          const auto sm = strides_in(muv.out.shape(), os);
          const T* Y = yv.out.data<T>().data();
          const T* M = muv.out.data<T>().data();
          const T* S = sv.out.data<T>().data();
          const T* G = g.data<T>().data();
          Tensor dy_full(os, dt), dmu_full(os, dt), ds_full(os, dt);
          T* DY = dy_full.data<T>().data();
          T* DM = dmu_full.data<T>().data();
          T* DS = ds_full.data<T>().data();
          rows_zip(os, sy, sm, [&](i64 oo, i64 oy, i64 om, i64 inner, i64 ly, i64 lm) {
            for (i64 i2 = 0; i2 < inner; ++i2) {
              const T yy = Y[oy + i2 * ly];
              const T mm = M[om + i2 * lm];
              const T ss = S[om + i2 * lm];
              const T gv = G[oo + i2];
              const T diff = yy - mm;
              const T w = diff / (ss * ss);
              DM[oo + i2] = gv * w;
              DY[oo + i2] = -gv * w;
              DS[oo + i2] = gv * (diff * w - T(1)) / ss;
            }
          });
          if (yv.needs_grad) {
            Tensor dy = Tensor::zeros(yv.out.shape(), dt);
            reduce_to_shape_add<T>(dy_full, yv.out.shape(), dy);
            t.accumulate(n.in[0], dy);
          }
          if (muv.needs_grad) {
            Tensor dm = Tensor::zeros(muv.out.shape(), dt);
            reduce_to_shape_add<T>(dmu_full, muv.out.shape(), dm);
            t.accumulate(n.in[1], dm);
          }
          if (sv.needs_grad) {
            Tensor ds = Tensor::zeros(sv.out.shape(), dt);
            reduce_to_shape_add<T>(ds_full, sv.out.shape(), ds);
            t.accumulate(n.in[2], ds);
          }
        };
        if (dt == Dtype::F32)
          run(float{});
        else
          run(double{});
        break;
      }
      case Op::BroadcastTo: {
        const auto& x = t.nodes_[static_cast<std::size_t>(n.in[0])];
        Tensor dx = Tensor::zeros(x.out.shape(), dt);
        if (dt == Dtype::F32)
          reduce_to_shape_add<float>(g, x.out.shape(), dx);
        else
          reduce_to_shape_add<double>(g, x.out.shape(), dx);
        t.accumulate(n.in[0], dx);
        break;
      }
      case Op::Reshape: {
        t.accumulate(n.in[0], g.reshaped(n.attr_shape));
        break;
      }
    }
  }
}

void Tape::backward(Var loss) { TapeOps::backward_impl(*this, loss); }

ForwardBackward forward_backward(ParamStore& params, Dtype dt,
                                 const std::function<Var(Tape&)>& program) {
  Tape tape(dt, &params);
  Var loss = program(tape);
  tape.backward(loss);
  return ForwardBackward{loss.val(), tape.param_grads()};
}

}  // namespace npf

#include "npf/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace npf {

i64 shape_numel(const Shape& shape) {
  i64 n = 1;
  for (i64 e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, Dtype dt) : shape_(std::move(shape)) {
  for (i64 e : shape_) {
    if (e < 0) throw std::invalid_argument("tensor: negative extent in shape " + shape_str(shape_));
  }
  const auto n = static_cast<std::size_t>(shape_numel(shape_));
  if (dt == Dtype::F32)
    data_ = std::vector<float>(n, 0.0f);
  else
    data_ = std::vector<double>(n, 0.0);
}

Tensor Tensor::zeros(Shape shape, Dtype dt) { return Tensor(std::move(shape), dt); }

Tensor Tensor::full(Shape shape, double value, Dtype dt) {
  Tensor t(std::move(shape), dt);
  if (dt == Dtype::F32) {
    for (auto& v : std::get<std::vector<float>>(t.data_)) v = static_cast<float>(value);
  } else {
    for (auto& v : std::get<std::vector<double>>(t.data_)) v = value;
  }
  return t;
}

Tensor Tensor::scalar(double value, Dtype dt) { return full({}, value, dt); }

Tensor Tensor::from_f32(Shape shape, std::vector<float> values) {
  if (shape_numel(shape) != static_cast<i64>(values.size()))
    throw std::invalid_argument("tensor: data length " + std::to_string(values.size()) +
                                " does not match shape " + shape_str(shape));
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::move(values);
  return t;
}

Tensor Tensor::from_f64(Shape shape, std::vector<double> values) {
  if (shape_numel(shape) != static_cast<i64>(values.size()))
    throw std::invalid_argument("tensor: data length " + std::to_string(values.size()) +
                                " does not match shape " + shape_str(shape));
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::move(values);
  return t;
}

double Tensor::at(i64 flat) const {
  if (dtype() == Dtype::F32) return static_cast<double>(data<float>()[static_cast<std::size_t>(flat)]);
  return data<double>()[static_cast<std::size_t>(flat)];
}

void Tensor::set(i64 flat, double value) {
  if (dtype() == Dtype::F32)
    data<float>()[static_cast<std::size_t>(flat)] = static_cast<float>(value);
  else
    data<double>()[static_cast<std::size_t>(flat)] = value;
}

Tensor Tensor::astype(Dtype dt) const {
  if (dt == dtype()) return *this;
  Tensor out(shape_, dt);
  const i64 n = numel();
  if (dt == Dtype::F64) {
    auto src = data<float>();
    auto dst = out.data<double>();
    for (i64 i = 0; i < n; ++i) dst[i] = static_cast<double>(src[i]);
  } else {
    auto src = data<double>();
    auto dst = out.data<float>();
    for (i64 i = 0; i < n; ++i) dst[i] = static_cast<float>(src[i]);
  }
  return out;
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel())
    throw std::invalid_argument("reshape: cannot view " + shape_str(shape_) + " as " + shape_str(shape));
  Tensor t = *this;
  t.shape_ = std::move(shape);
  return t;
}

bool Tensor::all_finite() const {
  const i64 n = numel();
  if (dtype() == Dtype::F32) {
    auto d = data<float>();
    for (i64 i = 0; i < n; ++i)
      if (!std::isfinite(d[i])) return false;
  } else {
    auto d = data<double>();
    for (i64 i = 0; i < n; ++i)
      if (!std::isfinite(d[i])) return false;
  }
  return true;
}

}  // namespace npf

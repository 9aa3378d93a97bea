#ifndef NPF_TENSOR_HPP
#define NPF_TENSOR_HPP

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace npf {

using i64 = std::int64_t;
using Shape = std::vector<i64>;

enum class Dtype : std::uint8_t { F32 = 0, F64 = 1 };

inline const char* dtype_name(Dtype dt) { return dt == Dtype::F32 ? "f32" : "f64"; }
inline std::size_t dtype_size(Dtype dt) { return dt == Dtype::F32 ? 4 : 8; }

i64 shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major array of f32 or f64 values. Deep-copy value semantics.
class Tensor {
 public:
  Tensor() : shape_{0}, data_(std::vector<float>{}) {}
  Tensor(Shape shape, Dtype dt);

  static Tensor zeros(Shape shape, Dtype dt = Dtype::F32);
  static Tensor full(Shape shape, double value, Dtype dt = Dtype::F32);
  static Tensor scalar(double value, Dtype dt = Dtype::F32);
  static Tensor from_f32(Shape shape, std::vector<float> values);
  static Tensor from_f64(Shape shape, std::vector<double> values);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  i64 extent(int axis) const { return shape_[static_cast<std::size_t>(axis)]; }
  i64 numel() const { return shape_numel(shape_); }
  Dtype dtype() const { return std::holds_alternative<std::vector<float>>(data_) ? Dtype::F32 : Dtype::F64; }
  bool empty() const { return numel() == 0; }

  template <typename T>
  std::span<T> data() {
    return std::span<T>(std::get<std::vector<T>>(data_));
  }
  template <typename T>
  std::span<const T> data() const {
    return std::span<const T>(std::get<std::vector<T>>(data_));
  }

  // Flat-index read/write as double, regardless of dtype. For tests and I/O,
  // not inner loops.
  double at(i64 flat) const;
  void set(i64 flat, double value);

  Tensor astype(Dtype dt) const;
  // Same data, new shape; numel must match.
  Tensor reshaped(Shape shape) const;

  bool all_finite() const;

 private:
  Shape shape_;
  std::variant<std::vector<float>, std::vector<double>> data_;
};

}  // namespace npf

#endif

#pragma once

#include <cstddef>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace maskkd {

using Shape = std::vector<std::size_t>;

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Floor applied inside logarithms of KL terms computed from logits.
inline constexpr double kProbFloor = 1e-12;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Dense row-major float64 array. A plain value: copying copies the data.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor vector(std::initializer_list<double> values);
  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // Matrix views; rank-1 tensors read as a single row.
  std::size_t rows() const noexcept;
  std::size_t cols() const noexcept;

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols(), cols()};
  }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

  void fill(double v) noexcept;
  bool all_finite() const noexcept;

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// C = A * B for rank-2 operands. Throws DimensionError naming both shapes.
Tensor matmul(const Tensor& a, const Tensor& b);

// Row-wise softmax of (logits + mask). Masked (-inf) entries get exactly 0;
// a row with every entry masked yields all zeros.
Tensor softmax_rows_with_additive_mask(const Tensor& logits, const Tensor& mask);

// Row-wise softmax of logits / tau.
Tensor softmax_rows(const Tensor& logits, double tau = 1.0);

// Per-row KL(p || q) with 0 log 0 = 0. Throws DivergenceError when some
// q entry is 0 where p is positive.
Tensor reverse_kl_rows(const Tensor& p, const Tensor& q);

namespace kernels {

// out[m x n] (+)= a[m x k] * b[k x n], all row-major.
void gemm_acc(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
              std::size_t n) noexcept;
// out[k x n] += a^T * g where a is [m x k] and g is [m x n].
void gemm_at_b_acc(const double* a, const double* g, double* out, std::size_t m, std::size_t k,
                   std::size_t n) noexcept;
// out[m x k] += g * b^T where g is [m x n] and b is [k x n].
void gemm_a_bt_acc(const double* g, const double* b, double* out, std::size_t m, std::size_t k,
                   std::size_t n);

// In-place masked softmax over one row; returns false when fully masked.
bool softmax_row_inplace(std::span<double> row) noexcept;

}  // namespace kernels

}  // namespace maskkd

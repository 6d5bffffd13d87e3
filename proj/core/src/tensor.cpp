#include "maskkd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "maskkd/error.hpp"

namespace maskkd {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw DimensionError("tensor shape " + shape_str(shape_) + " does not match " +
                         std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  std::size_t r = rows.size();
  std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

std::size_t Tensor::rows() const noexcept {
  if (shape_.empty()) return 0;
  return shape_.size() == 1 ? 1 : shape_[0];
}

std::size_t Tensor::cols() const noexcept {
  if (shape_.empty()) return 0;
  return shape_.back();
}

void Tensor::fill(double v) noexcept { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

namespace kernels {

namespace {

constexpr std::size_t kRowBlock = 8;
constexpr std::size_t kColBlock = 16;

// out[r0 + r][j0 + j] += sum_p a(r0 + r, p) * b[p][j0 + j] for a register
// tile of kRowBlock x kColBlock. `a_at(r, p)` abstracts the row/column layout
// of the left operand.
// Eight doubles; GCC and Clang lower this to whatever SIMD width the target has.
typedef double v8d __attribute__((vector_size(64)));

// out[r0 + r][j0 + j] += sum_p a(r0 + r, p) * b[p][j0 + j] for an R x 16
// register tile. `a_at(r, p)` abstracts the layout of the left operand.
template <std::size_t R, class AAt>
inline void tile(AAt a_at, const double* b, double* out, std::size_t k, std::size_t n,
                 std::size_t r0, std::size_t j0) noexcept {
  v8d lo[R], hi[R];
  for (std::size_t r = 0; r < R; ++r) {
    std::memcpy(&lo[r], out + (r0 + r) * n + j0, sizeof(v8d));
    std::memcpy(&hi[r], out + (r0 + r) * n + j0 + 8, sizeof(v8d));
  }
  for (std::size_t p = 0; p < k; ++p) {
    v8d b_lo, b_hi;
    std::memcpy(&b_lo, b + p * n + j0, sizeof(v8d));
    std::memcpy(&b_hi, b + p * n + j0 + 8, sizeof(v8d));
    for (std::size_t r = 0; r < R; ++r) {
      const double av = a_at(r0 + r, p);
      lo[r] += av * b_lo;
      hi[r] += av * b_hi;
    }
  }
  for (std::size_t r = 0; r < R; ++r) {
    std::memcpy(out + (r0 + r) * n + j0, &lo[r], sizeof(v8d));
    std::memcpy(out + (r0 + r) * n + j0 + 8, &hi[r], sizeof(v8d));
  }
}

template <class AAt>
void blocked_gemm(AAt a_at, const double* b, double* out, std::size_t m, std::size_t k,
                  std::size_t n) noexcept {
  const std::size_t n_full = n - n % kColBlock;
  std::size_t i = 0;
  for (; i + kRowBlock <= m; i += kRowBlock)
    for (std::size_t j0 = 0; j0 < n_full; j0 += kColBlock)
      tile<kRowBlock>(a_at, b, out, k, n, i, j0);
  for (; i < m; ++i)
    for (std::size_t j0 = 0; j0 < n_full; j0 += kColBlock) tile<1>(a_at, b, out, k, n, i, j0);
  if (n_full == n) return;
  for (std::size_t r = 0; r < m; ++r) {
    double* __restrict orow = out + r * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a_at(r, p);
      const double* brow = b + p * n;
      for (std::size_t j = n_full; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

}  // namespace

void gemm_acc(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
              std::size_t n) noexcept {
  blocked_gemm([a, k](std::size_t r, std::size_t p) { return a[r * k + p]; }, b, out, m, k, n);
}

// out (k x n) += a^T g with a (m x k) and g (m x n): rows of a^T are columns of a.
void gemm_at_b_acc(const double* a, const double* g, double* out, std::size_t m, std::size_t k,
                   std::size_t n) noexcept {
  blocked_gemm([a, k](std::size_t r, std::size_t i) { return a[i * k + r]; }, g, out, k, m, n);
}

void gemm_a_bt_acc(const double* g, const double* b, double* out, std::size_t m, std::size_t k,
                   std::size_t n) {
  // Transpose b once so the inner loop streams contiguous rows.
  std::vector<double> bt(n * k);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  gemm_acc(g, bt.data(), out, m, n, k);
}

bool softmax_row_inplace(std::span<double> row) noexcept {
  double mx = kNegInf;
  for (double v : row) mx = std::max(mx, v);
  if (mx == kNegInf) {
    std::fill(row.begin(), row.end(), 0.0);
    return false;
  }
  double sum = 0.0;
  for (double& v : row) {
    v = (v == kNegInf) ? 0.0 : std::exp(v - mx);
    sum += v;
  }
  const double inv = 1.0 / sum;
  for (double& v : row) v *= inv;
  return true;
}

}  // namespace kernels

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw DimensionError("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Tensor out({m, n});
  kernels::gemm_acc(a.data(), b.data(), out.data(), m, k, n);
  return out;
}

Tensor softmax_rows_with_additive_mask(const Tensor& logits, const Tensor& mask) {
  if (logits.shape() != mask.shape()) {
    throw DimensionError("softmax mask shape " + shape_str(mask.shape()) +
                         " does not match logits " + shape_str(logits.shape()));
  }
  Tensor out = logits;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += mask[i];
  for (std::size_t r = 0; r < out.rows(); ++r) kernels::softmax_row_inplace(out.row(r));
  return out;
}

Tensor softmax_rows(const Tensor& logits, double tau) {
  Tensor out = logits;
  const double inv_tau = 1.0 / tau;
  if (tau != 1.0) {
    for (double& v : out.storage()) v *= inv_tau;
  }
  for (std::size_t r = 0; r < out.rows(); ++r) kernels::softmax_row_inplace(out.row(r));
  return out;
}

Tensor reverse_kl_rows(const Tensor& p, const Tensor& q) {
  if (p.shape() != q.shape()) {
    throw DimensionError("KL operand shapes differ: " + shape_str(p.shape()) + " vs " +
                         shape_str(q.shape()));
  }
  Tensor out({p.rows()});
  for (std::size_t r = 0; r < p.rows(); ++r) {
    auto pr = p.row(r);
    auto qr = q.row(r);
    double kl = 0.0;
    for (std::size_t y = 0; y < pr.size(); ++y) {
      if (pr[y] <= 0.0) continue;
      if (qr[y] <= 0.0) {
        throw DivergenceError("KL undefined: q is zero where p is positive (row " +
                              std::to_string(r) + ", column " + std::to_string(y) + ")");
      }
      kl += pr[y] * std::log(pr[y] / qr[y]);
    }
    // Rounding can leave tiny negatives for p ~= q.
    out[r] = std::max(kl, 0.0);
  }
  return out;
}

}  // namespace maskkd

#include "dfs/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <functional>
#include <numbers>
#include <numeric>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "dfs/errors.hpp"

namespace dfs {

namespace {

std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(fmt::format("{}: expected a rank-2 tensor, got {}", op,
                                     shape_string(t.shape())));
  }
}

std::uint64_t rotl(std::uint64_t x, int k) noexcept {
  return (x << k) | (x >> (64 - k));
}

}  // namespace

std::string shape_string(const Shape& shape) {
  return fmt::format("[{}]", fmt::join(shape, "x"));
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(element_count(shape_), 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != element_count(shape_)) {
    throw DimensionError(fmt::format("data length {} does not match shape {}",
                                     data_.size(), shape_string(shape_)));
  }
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, double fill) {
  return Tensor({rows, cols}, std::vector<double>(rows * cols, fill));
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("from_rows: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t = matrix(n, n);
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

std::size_t Tensor::rows() const {
  require_matrix(*this, "rows");
  return shape_[0];
}

std::size_t Tensor::cols() const {
  require_matrix(*this, "cols");
  return shape_[1];
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw ContractError(fmt::format("item() on non-scalar tensor {}", shape_string(shape_)));
  }
  return data_[0];
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

bool Tensor::bitwise_equal(const Tensor& other) const noexcept {
  if (shape_ != other.shape_) return false;
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (std::bit_cast<std::uint64_t>(data_[i]) != std::bit_cast<std::uint64_t>(other.data_[i])) {
      return false;
    }
  }
  return true;
}

std::uint64_t splitmix64(std::uint64_t& state) noexcept {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

RngStream::RngStream(std::uint64_t seed) : seed_(seed) {
  std::uint64_t sm = seed;
  for (auto& word : s_) word = splitmix64(sm);
}

RngStream RngStream::derive(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t sm = seed ^ (stream * 0xD1B54A32D192ED03ULL);
  splitmix64(sm);
  return RngStream(splitmix64(sm));
}

std::uint64_t RngStream::next_u64() noexcept {
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double RngStream::uniform() noexcept {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::normal() noexcept {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // 1 - u keeps the log argument in (0, 1].
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

std::uint64_t RngStream::below(std::uint64_t n) noexcept {
  const std::uint64_t threshold = (0 - n) % n;
  for (;;) {
    const std::uint64_t x = next_u64();
    if (x >= threshold) return x % n;
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError(fmt::format("matmul: inner dimensions differ ({} vs {})",
                                     shape_string(a.shape()), shape_string(b.shape())));
  }
  Tensor c = Tensor::matrix(m, n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = c.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = pc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  require_matrix(a, "concat_cols");
  require_matrix(b, "concat_cols");
  if (a.rows() != b.rows()) {
    throw DimensionError(fmt::format("concat_cols: row counts differ ({} vs {})",
                                     shape_string(a.shape()), shape_string(b.shape())));
  }
  const std::size_t m = a.rows(), p = a.cols(), q = b.cols();
  Tensor out = Tensor::matrix(m, p + q);
  for (std::size_t r = 0; r < m; ++r) {
    std::copy_n(&a.data()[r * p], p, &out.data()[r * (p + q)]);
    std::copy_n(&b.data()[r * q], q, &out.data()[r * (p + q) + p]);
  }
  return out;
}

Tensor slice_cols(const Tensor& t, std::size_t lo, std::size_t hi) {
  require_matrix(t, "slice_cols");
  if (lo > hi || hi > t.cols()) {
    throw IndexError(fmt::format("slice_cols: range [{}, {}) invalid for {}", lo, hi,
                                 shape_string(t.shape())));
  }
  const std::size_t m = t.rows(), n = t.cols(), w = hi - lo;
  Tensor out = Tensor::matrix(m, w);
  for (std::size_t r = 0; r < m; ++r) {
    std::copy_n(&t.data()[r * n + lo], w, &out.data()[r * w]);
  }
  return out;
}

Tensor relu(const Tensor& t) {
  Tensor out = t;
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return out;
}

Tensor softmax_rows(const Tensor& t) {
  require_matrix(t, "softmax_rows");
  const std::size_t m = t.rows(), k = t.cols();
  if (k == 0) throw DimensionError("softmax_rows: need at least one column");
  Tensor out = Tensor::matrix(m, k);
  for (std::size_t r = 0; r < m; ++r) {
    const auto row = t.data().subspan(r * k, k);
    const double mx = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      const double e = std::exp(row[c] - mx);
      out.at(r, c) = e;
      total += e;
    }
    for (std::size_t c = 0; c < k; ++c) out.at(r, c) /= total;
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(fmt::format("add: shapes differ ({} vs {})", shape_string(a.shape()),
                                     shape_string(b.shape())));
  }
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

Tensor add_row(const Tensor& t, const Tensor& row) {
  require_matrix(t, "add_row");
  require_matrix(row, "add_row");
  if (row.rows() != 1 || row.cols() != t.cols()) {
    throw DimensionError(fmt::format("add_row: bias {} does not fit {}", shape_string(row.shape()),
                                     shape_string(t.shape())));
  }
  Tensor out = t;
  const std::size_t n = t.cols();
  for (std::size_t r = 0; r < t.rows(); ++r) {
    for (std::size_t c = 0; c < n; ++c) out.at(r, c) += row[c];
  }
  return out;
}

Tensor transpose(const Tensor& t) {
  require_matrix(t, "transpose");
  Tensor out = Tensor::matrix(t.cols(), t.rows());
  for (std::size_t r = 0; r < t.rows(); ++r) {
    for (std::size_t c = 0; c < t.cols(); ++c) out.at(c, r) = t.at(r, c);
  }
  return out;
}

Tensor he_init(std::size_t rows, std::size_t cols, RngStream& rng) {
  if (rows == 0 || cols == 0) throw DimensionError("he_init: dimensions must be positive");
  Tensor out = Tensor::matrix(rows, cols);
  const double stddev = std::sqrt(2.0 / static_cast<double>(rows));
  for (double& v : out.data()) v = stddev * rng.normal();
  return out;
}

}  // namespace dfs

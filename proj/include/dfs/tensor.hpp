#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace dfs {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

/// Dense row-major array of doubles.
///
/// Most operations work on rank-2 tensors; a row vector is 1 x n and a scalar
/// is 1 x 1. Dimensions may be zero (an empty column slice is m x 0).
class Tensor {
 public:
  Tensor() : shape_{0, 0} {}
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor scalar(double v) { return matrix(1, 1, v); }
  static Tensor identity(std::size_t n);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double item() const;

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  bool all_finite() const noexcept;

  // Bitwise element comparison (distinguishes -0.0 from 0.0, NaN equal to itself
  // when the payload matches).
  bool bitwise_equal(const Tensor& other) const noexcept;
  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// xoshiro256** seeded through splitmix64.
///
/// Normal draws use the Box-Muller transform on two 53-bit uniforms and cache
/// the second value; nothing depends on the standard library's distributions,
/// so a seed yields the same stream on every platform.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed);

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t next_u64() noexcept;
  double uniform() noexcept;                    // [0, 1)
  double normal() noexcept;                     // N(0, 1)
  std::uint64_t below(std::uint64_t n) noexcept;  // uniform in [0, n), n > 0

  // Independent child stream; same (seed, stream) always gives the same child.
  static RngStream derive(std::uint64_t seed, std::uint64_t stream);

 private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t& state) noexcept;

// Primitive ops. All are pure; matmul accumulates each output element in
// ascending inner index starting from 0.0, so results are bit-reproducible and
// a column-blocked product equals the monolithic one bitwise.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor slice_cols(const Tensor& t, std::size_t lo, std::size_t hi);
Tensor relu(const Tensor& t);
Tensor softmax_rows(const Tensor& t);
Tensor add(const Tensor& a, const Tensor& b);
Tensor add_row(const Tensor& t, const Tensor& row);  // broadcast 1 x n over rows
Tensor transpose(const Tensor& t);

/// Entries i.i.d. normal(0, 2 / rows).
Tensor he_init(std::size_t rows, std::size_t cols, RngStream& rng);

}  // namespace dfs

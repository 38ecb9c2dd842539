#include <gtest/gtest.h>

#include <cmath>

#include "dfs/errors.hpp"
#include "dfs/tensor.hpp"

using namespace dfs;

TEST(Tensor, MatmulExamples) {
  const Tensor a = Tensor::from_rows({{1, 2}, {3, 4}});
  EXPECT_EQ(matmul(a, Tensor::identity(2)), a);
  EXPECT_EQ(matmul(a, Tensor::from_rows({{5, 6}, {7, 8}})), Tensor::from_rows({{19, 22}, {43, 50}}));
  EXPECT_EQ(matmul(Tensor::scalar(3), Tensor::scalar(-2)), Tensor::scalar(-6));
  EXPECT_THROW(matmul(a, Tensor::matrix(3, 1)), DimensionError);
}

TEST(Tensor, ColumnBlockedMatmulIsBitwiseEqual) {
  RngStream rng(7);
  const Tensor a = he_init(5, 6, rng);
  const Tensor w = he_init(6, 9, rng);
  const Tensor full = matmul(a, w);
  for (std::size_t p = 0; p <= 9; ++p) {
    const Tensor blocked = concat_cols(matmul(a, slice_cols(w, 0, p)), matmul(a, slice_cols(w, p, 9)));
    EXPECT_TRUE(blocked.bitwise_equal(full)) << "split " << p;
  }
}

TEST(Tensor, ConcatAndSlice) {
  EXPECT_EQ(concat_cols(Tensor::from_rows({{1}, {2}}), Tensor::from_rows({{3}, {4}})),
            Tensor::from_rows({{1, 3}, {2, 4}}));
  const Tensor q = Tensor::from_rows({{1, 2}, {3, 4}});
  EXPECT_EQ(concat_cols(Tensor::matrix(2, 0), q), q);
  EXPECT_THROW(concat_cols(q, Tensor::matrix(3, 1)), DimensionError);

  const Tensor t = Tensor::from_rows({{1, 3}, {2, 4}});
  EXPECT_EQ(slice_cols(t, 0, 1), Tensor::from_rows({{1}, {2}}));
  EXPECT_EQ(slice_cols(t, 0, 2), t);
  EXPECT_EQ(slice_cols(t, 1, 1).shape(), (Shape{2, 0}));
  EXPECT_THROW(slice_cols(t, 1, 3), IndexError);
  EXPECT_THROW(slice_cols(t, 2, 1), IndexError);
}

TEST(Tensor, SliceConcatRoundTripEverySplit) {
  RngStream rng(3);
  for (std::size_t cols = 0; cols <= 6; ++cols) {
    Tensor t = Tensor::matrix(3, cols);
    for (double& v : t.data()) v = rng.normal();
    for (std::size_t p = 0; p <= cols; ++p) {
      EXPECT_TRUE(concat_cols(slice_cols(t, 0, p), slice_cols(t, p, cols)).bitwise_equal(t));
    }
  }
}

TEST(Tensor, Relu) {
  EXPECT_EQ(relu(Tensor::from_rows({{-1, 0, 2}})), Tensor::from_rows({{0, 0, 2}}));
  const Tensor pos = Tensor::from_rows({{0.5, 3}, {1, 0}});
  EXPECT_EQ(relu(pos), pos);
  EXPECT_EQ(relu(Tensor::from_rows({{-1, -2}})), Tensor::matrix(1, 2));
}

TEST(Tensor, Softmax) {
  const Tensor a = softmax_rows(Tensor::from_rows({{0, 0}}));
  EXPECT_DOUBLE_EQ(a.at(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(a.at(0, 1), 0.5);
  const Tensor b = softmax_rows(Tensor::from_rows({{std::log(1.0), std::log(3.0)}}));
  EXPECT_NEAR(b.at(0, 0), 0.25, 1e-15);
  EXPECT_NEAR(b.at(0, 1), 0.75, 1e-15);
  const Tensor c = softmax_rows(Tensor::from_rows({{1000, 1000}}));
  EXPECT_DOUBLE_EQ(c.at(0, 0), 0.5);
  EXPECT_TRUE(c.all_finite());
}

TEST(Tensor, HeInit) {
  RngStream r1(42), r2(42);
  EXPECT_TRUE(he_init(4, 5, r1).bitwise_equal(he_init(4, 5, r2)));

  RngStream one(1);
  const Tensor single = he_init(1, 1, one);
  EXPECT_TRUE(single.all_finite());

  RngStream rng(2024);
  const std::size_t rows = 8;
  const Tensor w = he_init(rows, 125000, rng);
  double mean = 0.0;
  for (double v : w.data()) mean += v;
  mean /= static_cast<double>(w.size());
  double var = 0.0;
  for (double v : w.data()) var += (v - mean) * (v - mean);
  var /= static_cast<double>(w.size() - 1);
  EXPECT_NEAR(var, 2.0 / rows, 0.05 * 2.0 / rows);
}

TEST(Rng, DeriveIsStableAndDistinct) {
  RngStream a = RngStream::derive(9, 1), b = RngStream::derive(9, 1), c = RngStream::derive(9, 2);
  const auto x = a.next_u64();
  EXPECT_EQ(x, b.next_u64());
  EXPECT_NE(x, c.next_u64());
  RngStream r(5);
  for (int i = 0; i < 1000; ++i) {
    EXPECT_LT(r.below(7), 7u);
    const double u = r.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
  }
}

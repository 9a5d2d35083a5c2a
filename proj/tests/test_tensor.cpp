#include <cmath>

#include "doctest.h"
#include "varan/tensor.hpp"

using namespace varan;

TEST_CASE("construction and indexing") {
  Tensor t(Shape{2, 3}, 1.5);
  CHECK(t.rank() == 2);
  CHECK(t.numel() == 6);
  CHECK(t.at({1, 2}) == 1.5);
  t.at({1, 2}) = 4.0;
  CHECK(t[5] == 4.0);
  CHECK_THROWS_AS(t.dim(2), std::out_of_range);
  CHECK_THROWS_AS(t.at({2, 0}), std::out_of_range);
}

TEST_CASE("default tensor is a rank-0 zero") {
  Tensor t;
  CHECK(t.rank() == 0);
  CHECK(t.numel() == 1);
  CHECK(t.item() == 0.0);
}

TEST_CASE("data length must match shape") {
  CHECK_THROWS_AS(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST_CASE("matrix literal and reshape") {
  const Tensor m = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
  CHECK(m.shape() == Shape{2, 3});
  const Tensor r = m.reshaped({3, 2});
  CHECK(r.at({2, 1}) == 6.0);
  CHECK_THROWS_AS(m.reshaped({4}), ShapeError);
  CHECK_THROWS_AS(Tensor::matrix({{1, 2}, {3}}), ShapeError);
}

TEST_CASE("item needs exactly one element") {
  CHECK(Tensor::scalar(2.5).item() == 2.5);
  CHECK_THROWS(Tensor::vector({1, 2}).item());
}

TEST_CASE("finiteness") {
  Tensor t = Tensor::vector({1, 2});
  CHECK(t.all_finite());
  t[1] = std::nan("");
  CHECK_FALSE(t.all_finite());
}

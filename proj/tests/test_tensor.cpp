#include <doctest.h>

#include <cmath>

#include "support.hpp"

using namespace ditvq;
using namespace ditvq::testing;

TEST_CASE("matmul hand examples") {
  const Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
  CHECK(matmul(eye, m).values() == m.values());
  CHECK(matmul(Tensor::from({1, 2}, {1, 1}), Tensor::from({2, 1}, {2, 3})).item() == 5.0F);
  CHECK_THROWS_AS(matmul(Tensor::from({1, 2}, {1, 1}), Tensor::from({3, 1}, {1, 2, 3})), DimensionError);
}

TEST_CASE("layer_norm examples and statistics") {
  const auto zero = layer_norm(Tensor::from({1, 4}, {5, 5, 5, 5})).values();
  for (float v : zero) CHECK(v == 0.0F);

  // var = 1, so the output is ±1/sqrt(1 + eps).
  const auto pm = layer_norm(Tensor::from({1, 2}, {1, -1})).values();
  const double expect = 1.0 / std::sqrt(1.0 + 1e-5);
  CHECK(pm[0] == doctest::Approx(expect).epsilon(1e-6));
  CHECK(pm[1] == doctest::Approx(-expect).epsilon(1e-6));

  Rng rng(3);
  const Tensor z = random_tensor({6, 16}, rng, 3.0F);
  const MatrixF y = layer_norm(z).to_matrix();
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const double mu = y.row(r).cast<double>().mean();
    const double var = (y.row(r).cast<double>().array() - mu).square().mean();
    CHECK(std::abs(mu) < 1e-5);
    CHECK(std::abs(var - 1.0) < 1e-3);
  }
  CHECK_THROWS_AS(layer_norm(Tensor::from({2, 1}, {1, 2})), DimensionError);
}

TEST_CASE("softmax examples") {
  CHECK(softmax(Tensor::from({2}, {0, 0})).values() == std::vector<float>{0.5F, 0.5F});
  CHECK(softmax(Tensor::from({2}, {1000, 1000})).values() == std::vector<float>{0.5F, 0.5F});
  const auto r = softmax(Tensor::from({2}, {static_cast<float>(std::log(3.0)), 0})).values();
  CHECK(r[0] == doctest::Approx(0.75).epsilon(1e-6));
  CHECK(r[1] == doctest::Approx(0.25).epsilon(1e-6));

  Rng rng(5);
  const MatrixF s = softmax(random_tensor({8, 7}, rng, 10.0F)).to_matrix();
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    CHECK(std::abs(s.row(i).cast<double>().sum() - 1.0) < 1e-6);
    CHECK(s.row(i).minCoeff() >= 0.0F);
  }
}

TEST_CASE("gelu asymptotes") {
  const auto v = activation_gelu(Tensor::from({3}, {0.0F, 20.0F, -20.0F})).values();
  CHECK(v[0] == 0.0F);
  CHECK(v[1] == doctest::Approx(20.0));
  CHECK(std::abs(v[2]) < 1e-6);
}

TEST_CASE("backward closed forms") {
  Rng rng(7);
  Tensor w = random_tensor({3, 5}, rng, 1.0F, true);
  backward(sum(w));
  for (float g : w.grad()) CHECK(g == 1.0F);

  const Tensor v = random_tensor({2, 3}, rng, 1.0F, true);
  backward(sum(mul(v, v)));
  for (std::size_t i = 0; i < v.numel(); ++i) CHECK(v.grad()[i] == doctest::Approx(2.0 * v.data()[i]));

  SUBCASE("grads accumulate until zeroed") {
    backward(sum(w));
    CHECK(w.grad()[0] == 2.0F);
    w.zero_grad();
    backward(sum(w));
    CHECK(w.grad()[0] == 1.0F);
  }
  SUBCASE("non-scalar loss is rejected") { CHECK_THROWS_AS(backward(w), ContractError); }
}

TEST_CASE("every primitive passes a central finite-difference check") {
  for (const auto& c : check_primitives(11)) {
    INFO(c.name << " input " << c.input << " rel " << c.rel_error);
    CHECK(c.rel_error < 1e-3);
  }
}

TEST_CASE("shape errors") {
  const Tensor a = Tensor::zeros({2, 3});
  CHECK_THROWS_AS(add(a, Tensor::zeros({3, 2})), DimensionError);
  CHECK_THROWS_AS(add_row(a, Tensor::zeros({2})), DimensionError);
  CHECK_THROWS_AS(reshape(a, {5}), DimensionError);
  CHECK_THROWS_AS(slice_last(a, 2, 4), DimensionError);
  CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(row(a, 2), InputError);
}

TEST_CASE("non-finite results raise NumericalError") {
  CHECK_THROWS_AS(scale(Tensor::from({1}, {3e38F}), 10.0F), NumericalError);
}

TEST_CASE("identical inputs give bitwise identical outputs") {
  Rng r1(9);
  Rng r2(9);
  const Tensor a = random_tensor({5, 8}, r1);
  const Tensor b = random_tensor({5, 8}, r2);
  CHECK(layer_norm(softmax(a)).values() == layer_norm(softmax(b)).values());
}

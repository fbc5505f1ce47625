#include <doctest.h>

#include <algorithm>

#include "ditvq/kernel.hpp"
#include "ditvq/parallel.hpp"
#include "support.hpp"

using namespace ditvq;
using namespace ditvq::testing;

TEST_CASE("zero activations give the bias") {
  Rng rng(1);
  const KernelCase c = random_kernel_case(rng, 16);
  std::vector<float> bias(c.shape.out);
  for (std::size_t r = 0; r < bias.size(); ++r) bias[r] = static_cast<float>(r) - 2.5F;
  const auto layer = PackedLayer::from(c.shape, c.codebook, c.assignments, bias);
  const MatrixF y = fused_matmul(layer, MatrixF::Zero(static_cast<Eigen::Index>(c.shape.in), 3));
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    for (Eigen::Index q = 0; q < y.cols(); ++q) CHECK(y(r, q) == bias[static_cast<std::size_t>(r)]);
  }
}

TEST_CASE("scalar codebook of the distinct weights reproduces the dense product") {
  // Weights drawn from four small integers: every product and partial sum is exact.
  const std::vector<float> levels{-2, -1, 1, 3};
  Rng rng(2);
  const LayerShape shape{5, 12, 1, 4};
  Codebook<float> cb;
  cb.words = Eigen::Map<const MatrixF>(levels.data(), 4, 1);
  Assignments a(shape.count());
  MatrixF w(5, 12);
  for (std::size_t s = 0; s < a.size(); ++s) {
    a[s] = static_cast<std::uint32_t>(rng.index(4));
    w.data()[s] = levels[a[s]];
  }
  MatrixF x(12, 3);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = static_cast<float>(static_cast<int>(rng.index(9)) - 4);
  const auto layer = PackedLayer::from(shape, cb, a);
  CHECK(fused_matmul(layer, x) == MatrixF(w * x));
}

TEST_CASE("fused product matches the double reference") {
  Rng rng(3);
  for (std::size_t k : {4U, 64U, 256U, 4096U}) {
    for (int i = 0; i < 5; ++i) {
      const KernelCase c = random_kernel_case(rng, k);
      const auto layer = PackedLayer::from(c.shape, c.codebook, c.assignments, c.bias);
      const MatrixF y = fused_matmul(layer, c.x);
      INFO("k=" << k << " " << c.shape.str());
      CHECK(max_relative_difference(y, naive_matmul(c.shape, c.codebook, c.assignments, c.bias, c.x)) < 1e-6);
      CHECK(max_relative_difference(dequantized_matmul(layer, c.x),
                                    naive_matmul(c.shape, c.codebook, c.assignments, c.bias, c.x)) < 1e-5);
    }
  }
}

TEST_CASE("weight traffic is the packed stream plus one codebook copy") {
  Rng rng(4);
  for (std::size_t k : {4U, 64U, 256U, 4096U}) {
    const KernelCase c = random_kernel_case(rng, k);
    const auto layer = PackedLayer::from(c.shape, c.codebook, c.assignments);
    KernelTraffic t;
    fused_matmul(layer, c.x, &t);
    CHECK(t.assignment_bytes == packed_size_bytes(c.shape.count(), k));
    CHECK(t.codebook_bytes == k * c.shape.dim * 4);
    CHECK(t.total() == storage_report(c.shape).assignment_bits / 8 + (storage_report(c.shape).assignment_bits % 8 != 0) +
                           storage_report(c.shape).codebook_bits / 8);
  }
}

TEST_CASE("results do not depend on the worker count") {
  Rng rng(5);
  const KernelCase c = random_kernel_case(rng, 64);
  const auto layer = PackedLayer::from(c.shape, c.codebook, c.assignments, c.bias);
  set_max_threads(1);
  const MatrixF one = fused_matmul(layer, c.x);
  set_max_threads(4);
  const MatrixF four = fused_matmul(layer, c.x);
  set_max_threads(0);
  CHECK(one == four);
}

TEST_CASE("shape errors") {
  Rng rng(6);
  const KernelCase c = random_kernel_case(rng, 16);
  const auto layer = PackedLayer::from(c.shape, c.codebook, c.assignments);
  CHECK_THROWS_AS(fused_matmul(layer, MatrixF::Zero(static_cast<Eigen::Index>(c.shape.in + 1), 2)), DimensionError);
  CHECK_THROWS_AS(PackedLayer::from(c.shape, c.codebook, c.assignments, std::vector<float>(c.shape.out + 1)),
                  DimensionError);
}

TEST_CASE("bench report") {
  CHECK(bench({{64, 64, 4, 16, 2}}, 0).empty());
  const auto r = bench({{64, 64, 4, 16, 2}, {32, 128, 2, 64, 1}}, 1, 3);
  REQUIRE(r.size() == 2);
  // 1024 sub-vectors at 4 bits each, plus a 16x4 float codebook.
  CHECK(r[0].fused_weight_bytes == 1024U * 4 / 8 + 16 * 4 * 4);
  CHECK(r[0].dense_weight_bytes == r[0].fused_weight_bytes + 64U * 64 * 4);
  CHECK(r[0].max_rel_diff < 1e-5);
  const std::string jsonl = bench_to_jsonl(r);
  CHECK(std::count(jsonl.begin(), jsonl.end(), '\n') == 2);
}

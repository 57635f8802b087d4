#include <cmath>
#include <cstdint>
#include <vector>

#include "doctest.h"

#include "commlearn/errors.hpp"
#include "commlearn/nn.hpp"
#include "commlearn/rng.hpp"
#include "commlearn/tensor.hpp"

using namespace commlearn;

namespace {

Batch random_batch(const ArchSpec& arch, std::int64_t b, std::uint64_t seed) {
  std::vector<std::int64_t> shape = {b};
  for (auto d : arch.input_shape) shape.push_back(d);
  Tensor x = Tensor::zeros(shape);
  RngStream s(seed, {11});
  for (auto& v : x.data) v = s.next_uniform();
  std::vector<int> labels(b);
  for (auto& l : labels) l = static_cast<int>(s.next_below(arch.num_classes));
  return Batch{std::move(x), std::move(labels)};
}

// Central finite differences over every parameter coordinate.
void gradcheck(const ArchSpec& arch, std::int64_t batch_size, std::uint64_t seed) {
  ModelParams w = init_params(arch, seed);
  Batch batch = random_batch(arch, batch_size, seed + 1);
  LossAndGrad lg = loss_and_grad(arch, w, batch);
  const double h = 1e-5;
  double worst = 0.0;
  for (std::size_t ti = 0; ti < w.size(); ++ti) {
    for (std::size_t i = 0; i < w[ti].tensor.data.size(); ++i) {
      double orig = w[ti].tensor.data[i];
      w[ti].tensor.data[i] = orig + h;
      double lp = loss_only(arch, w, batch);
      w[ti].tensor.data[i] = orig - h;
      double lm = loss_only(arch, w, batch);
      w[ti].tensor.data[i] = orig;
      double fd = (lp - lm) / (2 * h);
      double an = lg.grads[ti].tensor.data[i];
      double err = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
      worst = std::max(worst, err);
    }
  }
  INFO(arch_kind_name(arch.kind), " worst relative FD error ", worst);
  CHECK(worst < 1e-4);
}

}  // namespace

TEST_CASE("tensor construction checks shape against data") {
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5, 0.0)), ShapeError);
  Tensor t = Tensor::full({2, 2}, 3.0);
  CHECK(t.size() == 4);
  CHECK(t.data[3] == 3.0);
}

TEST_CASE("folded_dims follows the leading-product rule") {
  CHECK(folded_dims({6, 4}) == std::pair<std::int64_t, std::int64_t>{6, 4});
  CHECK(folded_dims({2, 3, 4}) == std::pair<std::int64_t, std::int64_t>{6, 4});
  CHECK(folded_dims({2, 3, 4, 5}) == std::pair<std::int64_t, std::int64_t>{24, 5});
  CHECK(folded_dims({7}) == std::pair<std::int64_t, std::int64_t>{7, 1});
}

TEST_CASE("axpy/scale/subtract do elementwise arithmetic") {
  ModelParams a = {{"w", Tensor({2}, {1.0, 2.0})}};
  ModelParams b = {{"w", Tensor({2}, {10.0, 20.0})}};
  axpy(a, 0.5, b);
  CHECK(a[0].tensor.data[0] == 6.0);
  CHECK(a[0].tensor.data[1] == 12.0);
  scale(a, 2.0);
  CHECK(a[0].tensor.data[0] == 12.0);
  ModelParams d = subtract(a, b);
  CHECK(d[0].tensor.data[0] == 2.0);
  CHECK(d[0].tensor.data[1] == 4.0);
  CHECK(max_abs_diff(a, b) == 4.0);
  CHECK(bitwise_equal(a, a));
  CHECK(!bitwise_equal(a, b));
}

TEST_CASE("check_same_structure rejects mismatched layouts") {
  ModelParams a = {{"w", Tensor::zeros({2, 2})}};
  ModelParams b = {{"w", Tensor::zeros({2, 3})}};
  CHECK_THROWS_AS(check_same_structure(a, b, "test"), ShapeError);
}

TEST_CASE("init_params is deterministic and seed sensitive") {
  ArchSpec arch = ArchSpec::mlp2({8}, 3, 16);
  ModelParams a = init_params(arch, 5);
  ModelParams b = init_params(arch, 5);
  ModelParams c = init_params(arch, 6);
  CHECK(bitwise_equal(a, b));
  CHECK(!bitwise_equal(a, c));
}

TEST_CASE("init_params: truncated-normal weights, zero biases") {
  ArchSpec arch = ArchSpec::mlp2({64}, 10, 64);
  ModelParams w = init_params(arch, 42);
  for (const auto& nt : w) {
    if (nt.name.find("bias") != std::string::npos) {
      for (double v : nt.tensor.data) CHECK(v == 0.0);
    } else {
      auto [rows, cols] = folded_dims(nt.tensor.shape);
      (void)cols;
      const double std_expect = std::sqrt(1.0 / static_cast<double>(rows));
      double sum_sq = 0.0;
      for (double v : nt.tensor.data) {
        CHECK(std::abs(v) <= 2.0 * std_expect + 1e-12);
        sum_sq += v * v;
      }
      double rms = std::sqrt(sum_sq / static_cast<double>(nt.tensor.data.size()));
      // truncation at 2 std shrinks the sample std a little below the nominal
      CHECK(rms > 0.5 * std_expect);
      CHECK(rms < 1.1 * std_expect);
    }
  }
}

TEST_CASE("parameter counts match the closed-form layer sums") {
  // mlp2 on d inputs, C classes, width W: d*W + W + W*W + W + W*C + C
  ArchSpec arch = ArchSpec::mlp2({16}, 4, 8);
  CHECK(param_count(init_params(arch, 0)) == 16 * 8 + 8 + 8 * 8 + 8 + 8 * 4 + 4);
  ArchSpec lin = ArchSpec::linear_toy({5}, 3);
  CHECK(param_count(init_params(lin, 0)) == 5 * 3 + 3);
}

TEST_CASE("conv_same_out_dim is ceil(in/stride)") {
  CHECK(conv_same_out_dim(5, 2) == 3);
  CHECK(conv_same_out_dim(4, 2) == 2);
  CHECK(conv_same_out_dim(28, 2) == 14);
  CHECK(conv_same_out_dim(7, 1) == 7);
}

TEST_CASE("cnn3 parameter geometry follows the (c, 2c, 2c) stack") {
  // 8x8x3 input, base 4: conv1 3x3x3x4 stride 2 -> 4x4x4,
  // conv2 3x3x4x8 -> 4x4x8, conv3 3x3x8x8 -> 4x4x8, head 128 -> classes.
  ArchSpec arch = ArchSpec::cnn3({8, 8, 3}, 5, 4);
  ModelParams w = init_params(arch, 0);
  REQUIRE(w.size() == 8);
  CHECK(w[0].tensor.shape == std::vector<std::int64_t>{3, 3, 3, 4});
  CHECK(w[2].tensor.shape == std::vector<std::int64_t>{3, 3, 4, 8});
  CHECK(w[4].tensor.shape == std::vector<std::int64_t>{3, 3, 8, 8});
  CHECK(w[6].tensor.shape == std::vector<std::int64_t>{4 * 4 * 8, 5});
}

TEST_CASE("zero parameters give exactly ln(C) loss") {
  ArchSpec arch = ArchSpec::mlp2({6}, 4, 8);
  ModelParams w = zeros_like(init_params(arch, 0));
  Batch b = random_batch(arch, 8, 3);
  CHECK(loss_only(arch, w, b) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("linear softmax gradient matches the closed form") {
  // Single example, zero weights: p = 1/C, dW[:,c] = (p - 1[c==y]) * x / B.
  ArchSpec arch = ArchSpec::linear_toy({2}, 2);
  ModelParams w = zeros_like(init_params(arch, 0));
  Batch b{Tensor({1, 2}, {1.0, 2.0}), {0}};
  LossAndGrad lg = loss_and_grad(arch, w, b);
  CHECK(lg.loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  // weight tensor is [in, out]
  CHECK(lg.grads[0].tensor.data[0] == doctest::Approx(-0.5 * 1.0));
  CHECK(lg.grads[0].tensor.data[1] == doctest::Approx(0.5 * 1.0));
  CHECK(lg.grads[0].tensor.data[2] == doctest::Approx(-0.5 * 2.0));
  CHECK(lg.grads[0].tensor.data[3] == doctest::Approx(0.5 * 2.0));
  CHECK(lg.grads[1].tensor.data[0] == doctest::Approx(-0.5));
  CHECK(lg.grads[1].tensor.data[1] == doctest::Approx(0.5));
}

TEST_CASE("finite differences confirm mlp2 gradients") {
  gradcheck(ArchSpec::mlp2({6}, 3, 8), 4, 21);
}

TEST_CASE("finite differences confirm mlp3 gradients") {
  gradcheck(ArchSpec::mlp3({5}, 3, 6), 4, 22);
}

TEST_CASE("finite differences confirm cnn3 gradients (stride-2 SAME padding)") {
  gradcheck(ArchSpec::cnn3({6, 6, 2}, 3, 4), 3, 23);
}

TEST_CASE("finite differences confirm cnn3 gradients on odd spatial dims") {
  gradcheck(ArchSpec::cnn3({5, 5, 1}, 2, 2), 2, 24);
}

TEST_CASE("batch validation rejects bad shapes and labels") {
  ArchSpec arch = ArchSpec::mlp2({4}, 3, 8);
  ModelParams w = init_params(arch, 0);
  Batch wrong_shape{Tensor::zeros({2, 5}), {0, 1}};
  CHECK_THROWS_AS(loss_only(arch, w, wrong_shape), Error);
  Batch bad_label{Tensor::zeros({1, 4}), {3}};
  CHECK_THROWS_AS(loss_only(arch, w, bad_label), Error);
}

TEST_CASE("cnn3 validation requires rank-3 inputs") {
  ArchSpec bad = ArchSpec::cnn3({16}, 4, 4);
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

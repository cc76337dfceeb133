#include <doctest.h>

#include <random>

#include "lfyolo/errors.hpp"
#include "lfyolo/kernels.hpp"
#include "reference_kernels.hpp"
#include "support.hpp"

using namespace lfyolo;
using testsupport::bit_equal;
using testsupport::max_rel_diff;
using testsupport::random_tensor;

TEST_CASE("conv2d identity 1x1 weight reproduces the input") {
  std::mt19937_64 rng(1);
  Tensor x = random_tensor({2, 3, 4, 5}, rng);
  Tensor w(Shape{3, 3, 1, 1});
  for (int c = 0; c < 3; ++c) w.at(c, c, 0, 0) = 1.0;
  CHECK(bit_equal(kernels::conv2d(x, w, {}, {}), x));
}

TEST_CASE("conv2d of a zero input is the bias") {
  std::mt19937_64 rng(2);
  Tensor x(Shape{1, 1, 4, 4});
  Tensor w = random_tensor({1, 1, 3, 3}, rng);
  const std::vector<double> bias{0.7};
  Tensor y = kernels::conv2d(x, w, bias, {1, 1, 1, 1});
  CHECK(y.shape() == Shape{1, 1, 4, 4});
  for (double v : y.data()) CHECK(v == 0.7);
}

TEST_CASE("conv2d dilated case matches the nested-loop oracle") {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor({1, 3, 5, 5}, rng);
  Tensor w = random_tensor({2, 3, 3, 3}, rng);
  const std::vector<double> bias{0.3, -0.2};
  Tensor y = kernels::conv2d(x, w, bias, {1, 1, 2, 1});
  Tensor o = testsupport::naive_conv(x, w, bias, 1, 1, 2, 1);
  CHECK(y.shape() == Shape{1, 2, 3, 3});
  CHECK(max_rel_diff(y, o) < 1e-12);
}

TEST_CASE("conv2d grid of stride, padding, dilation, groups matches the oracle") {
  std::mt19937_64 rng(4);
  int cases = 0;
  for (int stride : {1, 2})
    for (int pad : {0, 1, 2})
      for (int dil : {1, 2, 5})
        for (bool depthwise : {false, true}) {
          const int c_in = 4;
          const int groups = depthwise ? c_in : 1;
          const int c_out = depthwise ? 8 : 3;
          const int size = 12;
          if (size + 2 * pad < dil * 2 + 1) continue;
          Tensor x = random_tensor({2, c_in, size, size - 1}, rng);
          Tensor w = random_tensor({c_out, c_in / groups, 3, 3}, rng);
          std::vector<double> bias(c_out);
          for (double& b : bias) b = std::normal_distribution<double>()(rng);
          const kernels::ConvGeometry g{stride, pad, dil, groups};
          Tensor y = kernels::conv2d(x, w, bias, g);
          Tensor o = testsupport::naive_conv(x, w, bias, stride, pad, dil, groups);
          INFO("s=" << stride << " p=" << pad << " d=" << dil << " g=" << groups);
          CHECK(max_rel_diff(y, o) < 1e-12);
          ++cases;
        }
  CHECK(cases == 36);
}

TEST_CASE("parallel kernels agree with the serial reference on random cases") {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> pick(0, 1000);
  int checked = 0;
  for (int trial = 0; trial < 150; ++trial) {
    const int groups_sel = pick(rng) % 3;
    const int c_in = 1 + pick(rng) % 6;
    const int groups = groups_sel == 0 ? 1 : (groups_sel == 1 ? c_in : 1);
    const int c_out = groups == 1 ? 1 + pick(rng) % 6 : c_in * (1 + pick(rng) % 2);
    const int k = 1 + 2 * (pick(rng) % 3);
    const int stride = 1 + pick(rng) % 2;
    const int pad = pick(rng) % 3;
    const int dil = 1 + pick(rng) % 3;
    const int h = 3 + pick(rng) % 9;
    const int w = 3 + pick(rng) % 9;
    if (h + 2 * pad < dil * (k - 1) + 1 || w + 2 * pad < dil * (k - 1) + 1) continue;
    const kernels::ConvGeometry g{stride, pad, dil, groups};
    Tensor x = random_tensor({1 + pick(rng) % 2, c_in, h, w}, rng);
    Tensor wt = random_tensor({c_out, c_in / groups, k, k}, rng);
    std::vector<double> bias(c_out, 0.25);
    Tensor y = kernels::conv2d(x, wt, bias, g);
    CHECK(max_rel_diff(y, reference::conv2d_direct(x, wt, bias, g)) < 1e-12);
    Tensor gy = random_tensor(y.shape(), rng);
    CHECK(max_rel_diff(kernels::conv2d_backward_input(gy, wt, x.shape(), g),
                       reference::conv2d_backward_input_direct(gy, wt, x.shape(), g)) < 1e-12);
    CHECK(max_rel_diff(kernels::conv2d_backward_weight(gy, x, wt.shape(), g),
                       reference::conv2d_backward_weight_direct(gy, x, wt.shape(), g)) < 1e-12);
    const int pk = 1 + pick(rng) % 4;
    const int pp = pick(rng) % ((pk + 1) / 2);
    if (h + 2 * pp >= pk && w + 2 * pp >= pk) {
      Tensor p = kernels::maxpool2d(x, pk, stride, pp).output;
      CHECK(bit_equal(p, reference::maxpool2d_direct(x, pk, stride, pp)));
      CHECK(bit_equal(p, testsupport::naive_maxpool(x, pk, stride, pp)));
    }
    ++checked;
  }
  CHECK(checked >= 100);
}

TEST_CASE("kernel results do not depend on the thread count") {
  std::mt19937_64 rng(6);
  Tensor x = random_tensor({2, 8, 13, 11}, rng);
  Tensor w = random_tensor({6, 4, 3, 3}, rng);
  const kernels::ConvGeometry g{1, 1, 1, 2};
  const int full = kernels::max_threads();
  Tensor y_many = kernels::conv2d(x, w, {}, g);
  Tensor gy = random_tensor(y_many.shape(), rng);
  Tensor gw_many = kernels::conv2d_backward_weight(gy, x, w.shape(), g);
  Tensor gx_many = kernels::conv2d_backward_input(gy, w, x.shape(), g);
  kernels::set_num_threads(1);
  CHECK(bit_equal(kernels::conv2d(x, w, {}, g), y_many));
  CHECK(bit_equal(kernels::conv2d_backward_weight(gy, x, w.shape(), g), gw_many));
  CHECK(bit_equal(kernels::conv2d_backward_input(gy, w, x.shape(), g), gx_many));
  kernels::set_num_threads(full);
}

TEST_CASE("conv2d shape errors") {
  Tensor x(Shape{1, 3, 4, 4});
  CHECK_THROWS_AS(kernels::conv2d(x, Tensor(Shape{2, 4, 1, 1}), {}, {}), ShapeError);
  CHECK_THROWS_AS(kernels::conv2d(x, Tensor(Shape{2, 3, 7, 7}), {}, {}), ShapeError);
  CHECK_NOTHROW(kernels::conv2d(x, Tensor(Shape{2, 3, 7, 7}), {}, {1, 2, 1, 1}));
}

TEST_CASE("maxpool2d examples") {
  Tensor x(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor y = kernels::maxpool2d(x, 2, 1, 0).output;
  CHECK(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y[0] == 4.0);

  std::mt19937_64 rng(7);
  Tensor r = random_tensor({1, 2, 7, 7}, rng);
  CHECK(bit_equal(kernels::maxpool2d(r, 1, 1, 0).output, r));
  Tensor same = kernels::maxpool2d(r, 5, 1, 2).output;
  CHECK(same.shape() == r.shape());
  CHECK(bit_equal(same, testsupport::naive_maxpool(r, 5, 1, 2)));
  for (std::size_t i = 0; i < r.numel(); ++i) CHECK(same[i] >= r[i]);
}

TEST_CASE("padding never wins a maxpool window over negative data") {
  Tensor x(Shape{1, 1, 3, 3}, -5.0);
  Tensor y = kernels::maxpool2d(x, 3, 1, 1).output;
  for (double v : y.data()) CHECK(v == -5.0);
}

TEST_CASE("upsample nearest 2x replicates") {
  Tensor x(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor y = kernels::upsample_nearest_2x(x);
  const std::vector<double> expect{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
  CHECK(std::vector<double>(y.data().begin(), y.data().end()) == expect);
  Tensor g = kernels::upsample_nearest_2x_backward(Tensor(Shape{1, 1, 4, 4}, 1.0));
  for (double v : g.data()) CHECK(v == 4.0);
}

TEST_CASE("channel moments are biased per-channel statistics") {
  Tensor x(Shape{2, 2, 1, 2}, {1, 3, 10, 10, 5, 7, 20, 40});
  std::vector<double> mean, var;
  kernels::channel_moments(x, mean, var);
  CHECK(mean[0] == doctest::Approx(4.0));
  CHECK(var[0] == doctest::Approx(5.0));
  CHECK(mean[1] == doctest::Approx(20.0));
  CHECK(var[1] == doctest::Approx(150.0));
}

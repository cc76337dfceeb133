#include <doctest.h>

#include <cmath>
#include <random>

#include "lfyolo/autodiff.hpp"
#include "lfyolo/errors.hpp"
#include "support.hpp"

using namespace lfyolo;
using testsupport::bit_equal;
using testsupport::random_tensor;

namespace {

double rel_check(const std::function<ad::Var()>& fn, std::vector<ad::Var> leaves) {
  return ad::finite_diff_check(fn, leaves);
}

}  // namespace

TEST_CASE("gradient of sum is all ones") {
  std::mt19937_64 rng(1);
  ad::Var x(random_tensor({2, 3, 4, 4}, rng), true);
  ad::GradTape tape;
  {
    auto rec = tape.record();
    ad::Var loss = ad::sum(x);
    tape.backward(loss);
  }
  const Tensor gx = x.grad();
  for (double g : gx.data()) CHECK(g == 1.0);
}

TEST_CASE("1x1 conv weight gradient is the channel-summed input") {
  std::mt19937_64 rng(2);
  Tensor xv = random_tensor({2, 3, 4, 5}, rng);
  ad::Var x(xv, false);
  ad::Var w(random_tensor({1, 3, 1, 1}, rng), true);
  ad::GradTape tape;
  {
    auto rec = tape.record();
    tape.backward(ad::sum(ad::conv2d(x, w, std::nullopt, {})));
  }
  for (int c = 0; c < 3; ++c) {
    double s = 0.0;
    for (int n = 0; n < 2; ++n)
      for (int h = 0; h < 4; ++h)
        for (int ww = 0; ww < 5; ++ww) s += xv.at(n, c, h, ww);
    CHECK(w.grad()[c] == doctest::Approx(s).epsilon(1e-12));
  }
}

TEST_CASE("non-scalar loss is a contract error") {
  ad::Var x(Tensor(Shape{1, 2, 2, 2}, 1.0), true);
  ad::GradTape tape;
  auto rec = tape.record();
  ad::Var y = ad::leaky_relu(x, 0.1);
  CHECK_THROWS_AS(tape.backward(y), ContractError);
}

TEST_CASE("without an active tape nothing is recorded") {
  ad::Var x(Tensor(Shape{1, 1, 2, 2}, 1.0), true);
  ad::GradTape tape;
  ad::Var y = ad::sum(x);
  CHECK(tape.size() == 0);
  {
    auto rec = tape.record();
    ad::sum(x);
  }
  CHECK(tape.size() == 1);
  CHECK(ad::GradTape::active() == nullptr);
}

TEST_CASE("a value used twice receives both contributions") {
  std::mt19937_64 rng(3);
  ad::Var x(random_tensor({1, 2, 3, 3}, rng), true);
  ad::GradTape tape;
  {
    auto rec = tape.record();
    tape.backward(ad::sum(ad::add(x, x)));
  }
  const Tensor gx = x.grad();
  for (double g : gx.data()) CHECK(g == 2.0);
}

TEST_CASE("leaves off the loss path get zero gradient") {
  ad::Var x(Tensor(Shape{1, 1, 2, 2}, 1.0), true);
  ad::Var unused(Tensor(Shape{1, 1, 2, 2}, 3.0), true);
  ad::GradTape tape;
  {
    auto rec = tape.record();
    tape.backward(ad::sum(x));
  }
  const Tensor gu = unused.grad();
  for (double g : gu.data()) CHECK(g == 0.0);
}

TEST_CASE("activation examples") {
  Tensor t(Shape{1, 1, 1, 2}, {-2.0, 3.0});
  Tensor y = ad::leaky_relu(ad::Var(t), 0.1).value();
  CHECK(y[0] == doctest::Approx(-0.2).epsilon(1e-15));
  CHECK(y[1] == 3.0);
  CHECK(ad::sigmoid(ad::Var(Tensor::scalar(0.0))).value().item() == 0.5);
  CHECK_THROWS_AS(ad::leaky_relu(ad::Var(t), 1.5), ConfigError);

  std::mt19937_64 rng(4);
  Tensor r = random_tensor({1, 3, 4, 4}, rng, 4.0);
  Tensor neg = r;
  for (double& v : neg.data()) v = -v;
  Tensor a = ad::sigmoid(ad::Var(r)).value();
  Tensor b = ad::sigmoid(ad::Var(neg)).value();
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] + b[i] == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("batchnorm examples") {
  std::mt19937_64 rng(5);
  Tensor xv = random_tensor({2, 3, 4, 4}, rng);
  Tensor mean(Shape{1, 3, 1, 1}, 0.0), var(Shape{1, 3, 1, 1}, 1.0);
  ad::BatchNormState st;
  st.gamma = ad::Var(Tensor(Shape{1, 3, 1, 1}, 1.0));
  st.beta = ad::Var(Tensor(Shape{1, 3, 1, 1}, 0.0));
  st.running_mean = &mean;
  st.running_var = &var;
  st.eps = 1e-300;
  Tensor y = ad::batchnorm(ad::Var(xv), st, false).value();
  CHECK(testsupport::max_rel_diff(y, xv) < 1e-15);

  SUBCASE("constant channel in training mode gives beta") {
    st.eps = 1e-5;
    st.beta = ad::Var(Tensor(Shape{1, 3, 1, 1}, {0.5, -1.0, 2.0}));
    Tensor c(Shape{2, 3, 4, 4}, 7.0);
    Tensor out = ad::batchnorm(ad::Var(c), st, true).value();
    for (int ch = 0; ch < 3; ++ch)
      for (int i = 0; i < 16; ++i) CHECK(out.plane(1, ch)[i] == st.beta.value()[ch]);
  }

  SUBCASE("inference formula with random statistics") {
    st.eps = 1e-3;
    Tensor g = random_tensor({1, 3, 1, 1}, rng);
    Tensor b = random_tensor({1, 3, 1, 1}, rng);
    st.gamma = ad::Var(g);
    st.beta = ad::Var(b);
    for (int c = 0; c < 3; ++c) {
      mean[c] = std::normal_distribution<double>()(rng);
      var[c] = 0.5 + c;
    }
    Tensor out = ad::batchnorm(ad::Var(xv), st, false).value();
    for (int n = 0; n < 2; ++n)
      for (int c = 0; c < 3; ++c)
        for (int h = 0; h < 4; ++h)
          for (int w = 0; w < 4; ++w) {
            const double expect =
                (xv.at(n, c, h, w) - mean[c]) / std::sqrt(var[c] + 1e-3) * g[c] + b[c];
            CHECK(out.at(n, c, h, w) == doctest::Approx(expect).epsilon(1e-13));
          }
  }

  SUBCASE("training mode moves the running statistics by the momentum") {
    st.eps = 1e-5;
    Tensor c(Shape{1, 3, 1, 2}, {1.0, 3.0, 0.0, 0.0, -2.0, 2.0});
    ad::batchnorm(ad::Var(c), st, true);
    CHECK(mean[0] == doctest::Approx(0.2));
    CHECK(mean[1] == doctest::Approx(0.0));
    CHECK(var[2] == doctest::Approx(0.9 + 0.1 * 8.0));  // unbiased batch variance
  }

  SUBCASE("non-positive eps is a configuration error") {
    st.eps = 0.0;
    CHECK_THROWS_AS(ad::batchnorm(ad::Var(xv), st, false), ConfigError);
  }
}

TEST_CASE("combine examples") {
  std::mt19937_64 rng(6);
  Tensor a = random_tensor({1, 3, 4, 4}, rng);
  Tensor b = random_tensor({1, 5, 4, 4}, rng);
  std::vector<ad::Var> parts{ad::Var(a), ad::Var(b)};
  ad::Var cat = ad::combine(parts, ad::CombineKind::kConcatChannels);
  CHECK(cat.shape().c == 8);
  CHECK(bit_equal(ad::slice_channels(cat, 0, 3).value(), a));
  CHECK(bit_equal(ad::slice_channels(cat, 3, 5).value(), b));

  std::vector<ad::Var> with_zero{ad::Var(a), ad::Var(Tensor(a.shape()))};
  CHECK(bit_equal(ad::combine(with_zero, ad::CombineKind::kAdd).value(), a));

  std::vector<ad::Var> bad{ad::Var(a), ad::Var(Tensor(Shape{1, 3, 5, 4}))};
  try {
    ad::concat_channels(bad);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("1") != std::string::npos);
  }
  CHECK_THROWS_AS(ad::add(ad::Var(a), ad::Var(b)), ShapeError);
}

TEST_CASE("maxpool same mode rejects even kernels") {
  ad::Var x(Tensor(Shape{1, 1, 4, 4}));
  CHECK_THROWS_AS(ad::maxpool2d_same(x, 4), ConfigError);
  CHECK(ad::maxpool2d_same(x, 5).shape() == x.shape());
}

TEST_CASE("finite_diff_check examples") {
  std::mt19937_64 rng(7);
  SUBCASE("sum of squares") {
    // x * x through a 1x1 conv whose weight is the input itself.
    auto square = [](const ad::Var& v) {
      return ad::sum(ad::conv2d(v, v, std::nullopt, {1, 0, 1, 1}));
    };
    Tensor one = random_tensor({1, 1, 1, 1}, rng);
    CHECK(ad::finite_diff_check(square, one, 1e-5) < 1e-8);
  }
  SUBCASE("conv then leaky relu") {
    Tensor x = random_tensor({1, 2, 5, 5}, rng);
    Tensor w = random_tensor({3, 2, 3, 3}, rng);
    auto fn = [&](const ad::Var& v) {
      return ad::sum(ad::leaky_relu(ad::conv2d(v, ad::Var(w), std::nullopt, {1, 1, 1, 1}), 0.1));
    };
    CHECK(ad::finite_diff_check(fn, x, 1e-5) < 1e-6);
  }
  SUBCASE("composite of every operator") {
    ad::Var x(random_tensor({2, 2, 6, 6}, rng), true);
    ad::Var w(random_tensor({4, 2, 3, 3}, rng, 0.5), true);
    ad::Var b(random_tensor({1, 4, 1, 1}, rng), true);
    Tensor mean(Shape{1, 4, 1, 1}, 0.0), var(Shape{1, 4, 1, 1}, 1.0);
    ad::BatchNormState st;
    st.gamma = ad::Var(random_tensor({1, 4, 1, 1}, rng), true);
    st.beta = ad::Var(random_tensor({1, 4, 1, 1}, rng), true);
    st.running_mean = &mean;
    st.running_var = &var;
    Tensor proj = random_tensor({2, 8, 6, 6}, rng);
    auto fn = [&] {
      ad::Var c = ad::conv2d(x, w, b, {1, 1, 1, 1});
      ad::Var n = ad::batchnorm(c, st, true);
      ad::Var a = ad::leaky_relu(n, 0.1);
      ad::Var p = ad::upsample_nearest_2x(ad::maxpool2d(a, 2, 2, 0));
      std::vector<ad::Var> parts{ad::sigmoid(p), ad::add(a, c)};
      return ad::weighted_sum(ad::concat_channels(parts), proj);
    };
    CHECK(rel_check(fn, {x, w, b, st.gamma, st.beta}) < 1e-6);
  }
}

TEST_CASE("finite_diff_check detects a non-deterministic function") {
  std::mt19937_64 rng(8);
  int calls = 0;
  ad::Var x(random_tensor({1, 1, 2, 2}, rng), true);
  std::vector<ad::Var> leaves{x};
  auto fn = [&] {
    ++calls;
    return ad::weighted_sum(x, Tensor(Shape{1, 1, 2, 2}, 1.0 + calls * 1e-3));
  };
  CHECK_THROWS_AS(ad::finite_diff_check(fn, leaves), ContractError);
}

TEST_CASE("finite_diff_check corrupt hook makes the check fail") {
  std::mt19937_64 rng(9);
  Tensor w = random_tensor({1, 2, 3, 3}, rng);
  ad::Var x(random_tensor({1, 2, 3, 3}, rng), true);
  std::vector<ad::Var> leaves{x};
  ad::FiniteDiffOptions opt;
  auto fn = [&] { return ad::weighted_sum(ad::sigmoid(x), w); };
  CHECK(ad::finite_diff_check(fn, leaves, opt) < 1e-6);
  opt.corrupt_analytic = true;
  CHECK(ad::finite_diff_check(fn, leaves, opt) > 1e-3);
}

TEST_CASE("operators are pure") {
  std::mt19937_64 rng(10);
  Tensor x = random_tensor({1, 3, 6, 6}, rng);
  Tensor w = random_tensor({4, 3, 3, 3}, rng);
  auto run = [&] {
    return ad::sigmoid(ad::maxpool2d(ad::conv2d(ad::Var(x), ad::Var(w), std::nullopt, {1, 1, 1, 1}), 3, 1, 1)).value();
  };
  CHECK(bit_equal(run(), run()));
}

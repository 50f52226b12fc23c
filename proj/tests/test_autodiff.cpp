#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <functional>
#include <random>

#include "doctest.h"
#include "taskemb/autodiff.hpp"
#include "taskemb/common.hpp"

using taskemb::ad::Tensor;
namespace ad = taskemb::ad;

namespace {

constexpr double kStep = 1e-5;
constexpr double kRelTol = 1e-4;

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

Tensor random_tensor(std::mt19937_64& rng, std::size_t r, std::size_t c, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(r * c);
  for (auto& x : v) x = d(rng);
  return Tensor::from(r, c, std::move(v), true);
}

// One finite-difference check: `forward` rebuilds the graph from the given
// leaves each call; every leaf element is perturbed centrally and compared
// against the analytic gradient from one backward pass.
void check_gradients(const std::vector<Tensor>& leaves, const std::function<Tensor()>& forward) {
  Tensor loss = forward();
  REQUIRE(loss.size() == 1);
  ad::backward(loss);
  std::vector<std::vector<double>> analytic;
  for (const auto& leaf : leaves) analytic.push_back(leaf.node()->grad);
  for (std::size_t t = 0; t < leaves.size(); ++t) {
    auto& vals = const_cast<Tensor&>(leaves[t]).mutable_value();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double keep = vals[i];
      vals[i] = keep + kStep;
      const double up = forward().item();
      vals[i] = keep - kStep;
      const double dn = forward().item();
      vals[i] = keep;
      const double fd = (up - dn) / (2.0 * kStep);
      CAPTURE(t);
      CAPTURE(i);
      CHECK(rel_err(analytic[t][i], fd) < kRelTol);
    }
  }
}

// Reduce an arbitrary op output to a scalar through fixed random weights so
// upstream gradients are non-uniform.
Tensor weighted_sum(const Tensor& x, const Tensor& w) { return ad::sum_all(ad::mul(x, w)); }

}  // namespace

TEST_CASE("finite differences cover every primitive") {
  std::mt19937_64 rng(20260822);
  std::uniform_int_distribution<std::size_t> dim(1, 5);
  std::uniform_int_distribution<std::size_t> dim2(2, 6);

  for (int iter = 0; iter < 100; ++iter) {
    const std::size_t m = dim(rng), k = dim(rng), n = dim(rng);

    {  // add, same shape
      auto a = random_tensor(rng, m, k, -2, 2);
      auto b = random_tensor(rng, m, k, -2, 2);
      auto w = random_tensor(rng, m, k, -1, 1);
      check_gradients({a, b}, [&] { return weighted_sum(ad::add(a, b), w); });
    }
    {  // add, bias row broadcast
      const std::size_t rows = m + 1;  // ensure rows != 1 so broadcast engages
      auto a = random_tensor(rng, rows, k, -2, 2);
      auto b = random_tensor(rng, 1, k, -2, 2);
      auto w = random_tensor(rng, rows, k, -1, 1);
      check_gradients({a, b}, [&] { return weighted_sum(ad::add(a, b), w); });
    }
    {  // sub
      auto a = random_tensor(rng, m, k, -2, 2);
      auto b = random_tensor(rng, m, k, -2, 2);
      auto w = random_tensor(rng, m, k, -1, 1);
      check_gradients({a, b}, [&] { return weighted_sum(ad::sub(a, b), w); });
    }
    {  // mul
      auto a = random_tensor(rng, m, k, -2, 2);
      auto b = random_tensor(rng, m, k, -2, 2);
      auto w = random_tensor(rng, m, k, -1, 1);
      check_gradients({a, b}, [&] { return weighted_sum(ad::mul(a, b), w); });
    }
    {  // scale
      auto a = random_tensor(rng, m, k, -2, 2);
      auto w = random_tensor(rng, m, k, -1, 1);
      check_gradients({a}, [&] { return weighted_sum(ad::scale(a, 1.7), w); });
    }
    {  // matmul
      auto a = random_tensor(rng, m, k, -2, 2);
      auto b = random_tensor(rng, k, n, -2, 2);
      auto w = random_tensor(rng, m, n, -1, 1);
      check_gradients({a, b}, [&] { return weighted_sum(ad::matmul(a, b), w); });
    }
    {  // matmul_nt
      auto a = random_tensor(rng, m, k, -2, 2);
      auto b = random_tensor(rng, n, k, -2, 2);
      auto w = random_tensor(rng, m, n, -1, 1);
      check_gradients({a, b}, [&] { return weighted_sum(ad::matmul_nt(a, b), w); });
    }
    {  // transpose
      auto a = random_tensor(rng, m, k, -2, 2);
      auto w = random_tensor(rng, k, m, -1, 1);
      check_gradients({a}, [&] { return weighted_sum(ad::transpose(a), w); });
    }
    {  // slice_rows / slice_cols
      auto a = random_tensor(rng, m + 2, k + 2, -2, 2);
      auto wr = random_tensor(rng, m + 1, k + 2, -1, 1);
      check_gradients({a}, [&] { return weighted_sum(ad::slice_rows(a, 1, m + 2), wr); });
      auto wc = random_tensor(rng, m + 2, k + 1, -1, 1);
      check_gradients({a}, [&] { return weighted_sum(ad::slice_cols(a, 0, k + 1), wc); });
    }
    {  // concat_cols
      auto a = random_tensor(rng, m, k, -2, 2);
      auto b = random_tensor(rng, m, n, -2, 2);
      auto w = random_tensor(rng, m, k + n, -1, 1);
      check_gradients({a, b}, [&] { return weighted_sum(ad::concat_cols({a, b}), w); });
    }
    {  // sum_all
      auto a = random_tensor(rng, m, k, -2, 2);
      check_gradients({a}, [&] { return ad::scale(ad::sum_all(a), 0.7); });
    }
    {  // mean_rows
      auto a = random_tensor(rng, m, k, -2, 2);
      auto w = random_tensor(rng, 1, k, -1, 1);
      check_gradients({a}, [&] { return weighted_sum(ad::mean_rows(a), w); });
    }
    {  // softmax_rows / log_softmax_rows (small logits avoid saturation)
      auto a = random_tensor(rng, m, dim2(rng), -2, 2);
      auto w = random_tensor(rng, a.rows(), a.cols(), -1, 1);
      check_gradients({a}, [&] { return weighted_sum(ad::softmax_rows(a), w); });
      check_gradients({a}, [&] { return weighted_sum(ad::log_softmax_rows(a), w); });
    }
    {  // log (positive domain)
      auto a = random_tensor(rng, m, k, 0.2, 3.0);
      auto w = random_tensor(rng, m, k, -1, 1);
      check_gradients({a}, [&] { return weighted_sum(ad::log(a), w); });
    }
    {  // gelu
      auto a = random_tensor(rng, m, k, -3, 3);
      auto w = random_tensor(rng, m, k, -1, 1);
      check_gradients({a}, [&] { return weighted_sum(ad::gelu(a), w); });
    }
    {  // layer_norm_rows
      const std::size_t c = dim2(rng) + 1;
      auto a = random_tensor(rng, m, c, -2, 2);
      auto g = random_tensor(rng, 1, c, 0.5, 1.5);
      auto b = random_tensor(rng, 1, c, -0.5, 0.5);
      auto w = random_tensor(rng, m, c, -1, 1);
      check_gradients({a, g, b}, [&] { return weighted_sum(ad::layer_norm_rows(a, g, b), w); });
    }
    {  // embedding_gather
      const std::size_t V = 6;
      auto table = random_tensor(rng, V, k, -2, 2);
      std::uniform_int_distribution<int> idd(0, int(V) - 1);
      std::vector<int> ids(m + 1);
      for (auto& id : ids) id = idd(rng);
      auto w = random_tensor(rng, ids.size(), k, -1, 1);
      check_gradients({table}, [&] { return weighted_sum(ad::embedding_gather(table, ids), w); });
    }
    {  // pick / pick_rows
      auto a = random_tensor(rng, m, k, -2, 2);
      std::uniform_int_distribution<std::size_t> rr(0, m - 1), cc(0, k - 1);
      const std::size_t pr = rr(rng), pc = cc(rng);
      check_gradients({a}, [&] { return ad::scale(ad::pick(a, pr, pc), 1.3); });
      std::vector<int> cols(m);
      std::uniform_int_distribution<int> cd(0, int(k) - 1);
      for (auto& c2 : cols) c2 = cd(rng);
      auto w = random_tensor(rng, m, 1, -1, 1);
      check_gradients({a}, [&] { return weighted_sum(ad::pick_rows(a, cols), w); });
    }
    {  // nll_row
      const std::size_t classes = dim2(rng);
      auto logits = random_tensor(rng, m, classes, -2, 2);
      std::uniform_int_distribution<std::size_t> rr(0, m - 1), tt(0, classes - 1);
      const std::size_t row = rr(rng), target = tt(rng);
      check_gradients({logits}, [&] { return ad::scale(ad::nll_row(logits, row, target), 0.9); });
    }
  }
}

TEST_CASE("negative log-likelihood of a uniform row is the log class count") {
  auto logits = Tensor::from(2, 4, {0.7, 0.7, 0.7, 0.7, 1.0, 2.0, 3.0, 4.0}, true);
  CHECK(ad::nll_row(logits, 0, 2).item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("two-class log-softmax reproduces the logistic gradient at zero") {
  // log sigma(theta) with theta = 0, observed label on the theta side:
  // d/dtheta = 1 - sigma(0) = 0.5.
  auto theta = Tensor::scalar(0.0, true);
  auto zero = Tensor::scalar(0.0, false);
  auto logits = ad::concat_cols({theta, zero});
  auto ll = ad::pick(ad::log_softmax_rows(logits), 0, 0);
  ad::backward(ll);
  CHECK(theta.grad()[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(ll.item() == doctest::Approx(std::log(0.5)).epsilon(1e-12));
}

TEST_CASE("natural log hand value") {
  auto x = Tensor::scalar(4.0, true);
  auto y = ad::log(x);
  CHECK(y.item() == doctest::Approx(1.3862943611198906).epsilon(1e-12));
}

TEST_CASE("backward is linear in the loss") {
  std::mt19937_64 rng(7);
  auto a = random_tensor(rng, 3, 4, -2, 2);
  auto b = random_tensor(rng, 4, 2, -2, 2);
  auto h = ad::gelu(ad::matmul(a, b));
  auto l1 = ad::sum_all(h);
  auto l2 = ad::sum_all(ad::mul(h, h));
  ad::backward(l1);
  auto g1 = a.grad();
  ad::backward(l2);
  auto g2 = a.grad();
  const double alpha = 1.25, beta = -0.5;
  ad::backward(ad::add(ad::scale(l1, alpha), ad::scale(l2, beta)));
  for (std::size_t i = 0; i < g1.size(); ++i) {
    CHECK(a.grad()[i] == doctest::Approx(alpha * g1[i] + beta * g2[i]).epsilon(1e-10));
  }
}

TEST_CASE("repeated backward gives identical gradients (fresh accumulation)") {
  std::mt19937_64 rng(11);
  auto a = random_tensor(rng, 4, 4, -2, 2);
  auto loss = ad::sum_all(ad::mul(ad::softmax_rows(a), a));
  ad::backward(loss);
  auto first = a.grad();
  ad::backward(loss);
  for (std::size_t i = 0; i < first.size(); ++i) CHECK(a.grad()[i] == first[i]);
}

TEST_CASE("diamond-shaped graph accumulates each path exactly once") {
  auto x = Tensor::from(1, 3, {1.0, -2.0, 0.5}, true);
  auto y = ad::mul(x, x);
  auto z = ad::add(y, y);  // L = 2 * sum(x^2), dL/dx = 4x
  ad::backward(ad::sum_all(z));
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(x.grad()[i] == doctest::Approx(4.0 * x.value()[i]).epsilon(1e-12));
  }
}

TEST_CASE("shape mismatches raise structured dimension errors") {
  auto a = Tensor::zeros(2, 3);
  auto b = Tensor::zeros(3, 2);
  CHECK_THROWS_AS(ad::add(a, b), taskemb::DimensionError);
  CHECK_THROWS_AS(ad::mul(a, b), taskemb::DimensionError);
  CHECK_THROWS_AS(ad::matmul(a, a), taskemb::DimensionError);
  CHECK_THROWS_AS(ad::layer_norm_rows(a, Tensor::zeros(1, 2), Tensor::zeros(1, 3)),
                  taskemb::DimensionError);
  CHECK_THROWS_AS(ad::backward(ad::add(a, a)), taskemb::DimensionError);
  CHECK_THROWS_AS(ad::embedding_gather(a, {5}), taskemb::ValidationError);
}

TEST_CASE("identical seeds give bitwise-identical gradients") {
  auto run = [] {
    std::mt19937_64 rng(99);
    auto a = random_tensor(rng, 5, 5, -2, 2);
    auto b = random_tensor(rng, 5, 5, -2, 2);
    auto loss = ad::sum_all(ad::mul(ad::layer_norm_rows(ad::matmul(a, b),
                                                        Tensor::from(1, 5, {1, 1, 1, 1, 1}),
                                                        Tensor::zeros(1, 5)),
                                    b));
    ad::backward(loss);
    return std::make_pair(a.grad(), loss.item());
  };
  auto [g1, v1] = run();
  auto [g2, v2] = run();
  CHECK(v1 == v2);
  REQUIRE(g1.size() == g2.size());
  for (std::size_t i = 0; i < g1.size(); ++i) CHECK(g1[i] == g2[i]);
}

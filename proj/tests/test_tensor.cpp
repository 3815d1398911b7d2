#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <limits>
#include <vector>

#include "doctest.h"
#include "gradcheck_suite.hpp"
#include "ops.hpp"

using namespace gatedformer;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Tensor<double> make(Shape shape, std::vector<double> values, bool requires_grad = false) {
  return Tensor<double>::from(std::move(shape), std::move(values), requires_grad);
}

}  // namespace

TEST_CASE("matmul forward") {
  SUBCASE("identity") {
    auto eye = make({2, 2}, {1, 0, 0, 1});
    auto b = make({2, 2}, {3, 4, 5, 6});
    auto c = matmul(eye, b);
    CHECK(c.to_vector() == std::vector<double>{3, 4, 5, 6});
  }
  SUBCASE("row times column") {
    auto a = make({1, 2}, {1, 2});
    auto b = make({2, 1}, {3, 4});
    auto c = matmul(a, b);
    CHECK(c.to_vector() == std::vector<double>{11});
  }
  SUBCASE("inner extent mismatch") {
    auto a = make({2, 3}, std::vector<double>(6, 1.0));
    auto b = make({2, 3}, std::vector<double>(6, 1.0));
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("2x3"), Error);
  }
}

TEST_CASE("matmul backward accumulates G*B^T and A^T*G") {
  auto a = make({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  auto b = make({3, 2}, {1, 0, 0, 1, 1, 1}, true);
  auto loss = sum(matmul(a, b));
  backward(loss);
  // dA = ones(2,2) * B^T, dB = A^T * ones(2,2)
  CHECK(a.grad()[0] == doctest::Approx(1.0));
  CHECK(a.grad()[1] == doctest::Approx(1.0));
  CHECK(a.grad()[2] == doctest::Approx(2.0));
  CHECK(b.grad()[0] == doctest::Approx(5.0));
  CHECK(b.grad()[2] == doctest::Approx(7.0));
  CHECK(b.grad()[4] == doctest::Approx(9.0));
}

TEST_CASE("softmax") {
  SUBCASE("uniform logits") {
    auto x = make({3}, {1, 1, 1});
    auto p = softmax(x);
    for (double v : p.values()) CHECK(v == doctest::Approx(1.0 / 3));
  }
  SUBCASE("log-ratio logits") {
    auto x = make({2}, {0.0, std::log(2.0)});
    auto p = softmax(x);
    CHECK(p.values()[0] == doctest::Approx(1.0 / 3));
    CHECK(p.values()[1] == doctest::Approx(2.0 / 3));
  }
  SUBCASE("masked entry is exactly zero") {
    auto x = make({2}, {5.0, -kInf});
    auto p = softmax(x);
    CHECK(p.values()[0] == 1.0);
    CHECK(p.values()[1] == 0.0);
  }
  SUBCASE("fully masked slice") {
    auto x = make({1, 2}, {-kInf, -kInf});
    CHECK_THROWS_AS(softmax(x, 1), Error);
    try {
      softmax(x, 1);
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::AllMasked);
    }
  }
  SUBCASE("rows sum to one and stay nonnegative") {
    auto x = gradcheck_detail::random_tensor({5, 7}, 1234, false, -30.0, 30.0);
    auto p = softmax(x, 1);
    for (int64_t i = 0; i < 5; ++i) {
      double row = 0;
      for (int64_t j = 0; j < 7; ++j) {
        const double v = p.values()[i * 7 + j];
        CHECK(v >= 0.0);
        row += v;
      }
      CHECK(row == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("layer_norm") {
  auto gamma = Tensor<double>::filled({4}, 1.0, true);
  auto beta = Tensor<double>::zeros({4}, true);
  SUBCASE("constant rows normalize to zero") {
    auto x = make({2, 4}, {3, 3, 3, 3, -1, -1, -1, -1});
    auto y = layer_norm(x, gamma, beta);
    for (double v : y.values()) CHECK(v == doctest::Approx(0.0));
  }
  SUBCASE("already normalized input survives small eps") {
    auto g2 = Tensor<double>::filled({2}, 1.0);
    auto b2 = Tensor<double>::zeros({2});
    auto x = make({1, 2}, {1, -1});
    auto y = layer_norm(x, g2, b2, 1e-12);
    CHECK(y.values()[0] == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(y.values()[1] == doctest::Approx(-1.0).epsilon(1e-6));
  }
  SUBCASE("per-position mean and variance") {
    auto x = gradcheck_detail::random_tensor({6, 16}, 99, false);
    auto y = layer_norm(x, Tensor<double>::filled({16}, 1.0), Tensor<double>::zeros({16}));
    for (int64_t i = 0; i < 6; ++i) {
      double mean = 0, var = 0;
      for (int64_t j = 0; j < 16; ++j) mean += y.values()[i * 16 + j];
      mean /= 16;
      for (int64_t j = 0; j < 16; ++j) {
        const double d = y.values()[i * 16 + j] - mean;
        var += d * d;
      }
      var /= 16;
      CHECK(std::abs(mean) < 1e-6);
      CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
    }
  }
  SUBCASE("backward matches finite differences") {
    auto x = gradcheck_detail::random_tensor({3, 4}, 7);
    auto fn = [&] { return gradcheck_detail::project(layer_norm(x, gamma, beta), 8); };
    CHECK(gradcheck_detail::check_leaves(fn, {x, gamma, beta}) < 1e-6);
  }
}

TEST_CASE("activations") {
  auto x0 = make({1}, {0.0});
  CHECK(sigmoid(x0).values()[0] == doctest::Approx(0.5));
  CHECK(tanh_act(x0).values()[0] == doctest::Approx(0.0));
  CHECK(relu(make({1}, {-1.0})).values()[0] == 0.0);

  SUBCASE("tanh is the rescaled sigmoid") {
    for (int i = -30; i <= 30; ++i) {
      const double x = i / 10.0;
      const double t = std::tanh(x);
      auto s = sigmoid(make({1}, {2 * x}));
      CHECK(std::abs(t - (2 * s.values()[0] - 1)) < 1e-12);
    }
  }
  SUBCASE("sigmoid derivative at zero") {
    auto x = make({1}, {0.0}, true);
    backward(sum(sigmoid(x)));
    CHECK(x.grad()[0] == doctest::Approx(0.25));
  }
}

TEST_CASE("stop_gradient") {
  SUBCASE("forward is bitwise identity") {
    auto x = gradcheck_detail::random_tensor({3, 3}, 11, false);
    auto y = stop_gradient(x);
    CHECK(x.to_vector() == y.to_vector());
  }
  SUBCASE("detached factor contributes nothing") {
    auto x = make({3}, {1, 2, 3}, true);
    auto w = make({3}, {4, 5, 6}, true);
    backward(sum(hadamard(stop_gradient(x), w)));
    CHECK(x.grad()[0] == 0.0);
    CHECK(x.grad()[1] == 0.0);
    CHECK(x.grad()[2] == 0.0);
    CHECK(w.grad()[0] == doctest::Approx(1.0));
    CHECK(w.grad()[1] == doctest::Approx(2.0));
    CHECK(w.grad()[2] == doctest::Approx(3.0));
  }
  SUBCASE("x + sg(x) records gradient one, numeric oracle sees two") {
    auto x = make({2}, {0.3, -0.7}, true);
    auto fn = [&] { return sum(add(x, stop_gradient(x))); };
    backward(fn());
    CHECK(x.grad()[0] == doctest::Approx(1.0));
    CHECK(x.grad()[1] == doctest::Approx(1.0));
    // Central differences see both paths; the mismatch is the defining
    // stop-gradient property, not a backward bug.
    const double h = 1e-6;
    auto vals = x.values_mut();
    const double orig = vals[0];
    vals[0] = orig + h;
    const double fp = fn().values()[0];
    vals[0] = orig - h;
    const double fm = fn().values()[0];
    vals[0] = orig;
    CHECK((fp - fm) / (2 * h) == doctest::Approx(2.0).epsilon(1e-6));
  }
}

TEST_CASE("backward basics") {
  SUBCASE("hadamard product rule") {
    auto a = make({3}, {1, 2, 3}, true);
    auto b = make({3}, {4, 5, 6}, true);
    backward(sum(hadamard(a, b)));
    CHECK(a.grad()[0] == doctest::Approx(4.0));
    CHECK(a.grad()[2] == doctest::Approx(6.0));
    CHECK(b.grad()[1] == doctest::Approx(2.0));
  }
  SUBCASE("loss equal to a leaf") {
    auto x = make({1}, {2.5}, true);
    backward(x);
    CHECK(x.grad()[0] == doctest::Approx(1.0));
  }
  SUBCASE("non-scalar loss is rejected") {
    auto x = make({2}, {1, 2}, true);
    CHECK_THROWS_AS(backward(x), Error);
  }
  SUBCASE("gated product decomposes into the two product-rule terms") {
    // loss = sum(w (.) [f(X) (.) sigmoid(g(X))]) with f, g linear.
    auto x = gradcheck_detail::random_tensor({4, 3}, 21);
    auto wf = gradcheck_detail::random_tensor({3, 3}, 22, false);
    auto wg = gradcheck_detail::random_tensor({3, 3}, 23, false);
    auto w = gradcheck_detail::random_tensor({4, 3}, 24, false);

    auto fn = [&] { return sum(hadamard(w, hadamard(matmul(x, wf), sigmoid(matmul(x, wg))))); };
    CHECK(gradcheck_detail::check_leaves(fn, {x}) < 1e-6);

    x.zero_grad();
    backward(fn());

    // Independent evaluation of each term: dX = [w (.) sig] Wf^T +
    // [w (.) f (.) sig'] Wg^T.
    auto f = matmul(x, wf);
    auto sig = sigmoid(matmul(x, wg));
    std::vector<double> expected(12, 0.0);
    for (int i = 0; i < 4; ++i) {
      for (int k = 0; k < 3; ++k) {
        double acc = 0;
        for (int j = 0; j < 3; ++j) {
          const double s = sig.values()[i * 3 + j];
          const double term1 = w.values()[i * 3 + j] * s * wf.values()[k * 3 + j];
          const double term2 =
              w.values()[i * 3 + j] * f.values()[i * 3 + j] * s * (1 - s) * wg.values()[k * 3 + j];
          acc += term1 + term2;
        }
        expected[i * 3 + k] = acc;
      }
    }
    for (int i = 0; i < 12; ++i) CHECK(x.grad()[i] == doctest::Approx(expected[i]).epsilon(1e-10));
  }
}

TEST_CASE("finite_diff_check") {
  SUBCASE("sum of squares against 2x") {
    auto x = make({2}, {1, 2}, true);
    auto fn = [&]() -> Tensor<double> { return sum(hadamard(x, x)); };
    CHECK(finite_diff_check<double>(fn, x, 1e-5) < 1e-8);
  }
  SUBCASE("nondeterministic functions are rejected") {
    auto x = make({1}, {1.0}, true);
    int calls = 0;
    auto fn = [&]() -> Tensor<double> {
      ++calls;
      return Tensor<double>::scalar(static_cast<double>(calls));
    };
    CHECK_THROWS_AS(finite_diff_check<double>(fn, x, 1e-5), Error);
  }
}

TEST_CASE("gradcheck suite covers every op within 1e-6") {
  for (const auto& c : gradcheck_ops()) {
    INFO(c.name);
    CHECK(c.max_rel_err < 1e-6);
  }
}

TEST_CASE("corrupted backward fixture is detected") {
  auto cases = run_gradcheck_suite(/*inject_defect=*/true);
  bool found = false;
  for (const auto& c : cases) {
    if (c.name == "fixture.corrupted_backward") {
      found = true;
      CHECK(c.max_rel_err > 1e-4);
    }
  }
  CHECK(found);
}

TEST_CASE("dropout") {
  auto x = Tensor<double>::filled({1, 1000}, 1.0, true);
  SUBCASE("eval mode is the identity handle") {
    auto y = dropout(x, 0.5, false, {1, 2, 3});
    CHECK(y.raw() == x.raw());
  }
  SUBCASE("train mode keeps the expected mass with inverted scaling") {
    auto y = dropout(x, 0.25, true, {7, 1, 1});
    double mean = 0;
    int zeros = 0;
    for (double v : y.values()) {
      mean += v;
      if (v == 0.0) ++zeros;
      else CHECK(v == doctest::Approx(1.0 / 0.75));
    }
    mean /= 1000;
    CHECK(mean == doctest::Approx(1.0).epsilon(0.1));
    CHECK(zeros > 150);
    CHECK(zeros < 350);
  }
  SUBCASE("masks depend only on the key") {
    auto a = dropout(x, 0.5, true, {7, 2, 5});
    auto b = dropout(x, 0.5, true, {7, 2, 5});
    CHECK(a.to_vector() == b.to_vector());
    auto c = dropout(x, 0.5, true, {7, 3, 5});
    CHECK(a.to_vector() != c.to_vector());
  }
}

TEST_CASE("forward and backward are deterministic given the same inputs") {
  auto run = [] {
    auto x = gradcheck_detail::random_tensor({4, 6}, 500);
    auto w = gradcheck_detail::random_tensor({6, 6}, 501);
    auto y = softmax(matmul(tanh_act(x), w), 1);
    auto loss = sum(hadamard(y, y));
    backward(loss);
    std::vector<double> out = loss.to_vector();
    auto g = x.grad();
    out.insert(out.end(), g.begin(), g.end());
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("non-finite forward values are caught when checks are on") {
  finite_checks_enabled() = true;
  auto x = make({1}, {1e308});
  CHECK_THROWS_AS(hadamard(x, x), Error);
}

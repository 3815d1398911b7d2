#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "doctest.h"
#include "gating.hpp"
#include "gradcheck_suite.hpp"

using namespace gatedformer;
using gradcheck_detail::random_tensor;

namespace {

GateParams<double> random_gate(int64_t dh, uint64_t key, double range = 0.5) {
  return {random_tensor({dh, dh}, key + 1, true, -range, range), random_tensor({dh}, key + 2),
          random_tensor({dh, dh}, key + 3, true, -range, range), random_tensor({dh}, key + 4)};
}

Tensor<double> identity(int64_t n) {
  std::vector<double> data(static_cast<size_t>(n * n), 0.0);
  for (int64_t i = 0; i < n; ++i) data[static_cast<size_t>(i * n + i)] = 1.0;
  return Tensor<double>::from({n, n}, std::move(data));
}

}  // namespace

TEST_CASE("sdu") {
  const int64_t dh = 4;
  SUBCASE("neutral sigmoid gate halves the content branch") {
    auto x = random_tensor({3, dh}, 1, false);
    GateParams<double> p{Tensor<double>::zeros({dh, dh}), Tensor<double>::zeros({dh}), identity(dh),
                         Tensor<double>::zeros({dh})};
    auto out = sdu(x, p, GateFn::Sigmoid);
    for (int64_t i = 0; i < out.size(); ++i)
      CHECK(out.values()[i] == doctest::Approx(0.5 * x.values()[i]).epsilon(1e-12));
  }
  SUBCASE("closed tanh gate zeroes everything") {
    auto x = random_tensor({3, dh}, 2, false);
    GateParams<double> p{Tensor<double>::zeros({dh, dh}), Tensor<double>::zeros({dh}),
                         random_tensor({dh, dh}, 3, false), random_tensor({dh}, 4, false)};
    auto out = sdu(x, p, GateFn::Tanh);
    for (double v : out.values()) CHECK(v == 0.0);
  }
  SUBCASE("gradients for all five leaves match finite differences") {
    const int64_t d = 6;
    auto x = random_tensor({3, d}, 5);
    auto p = random_gate(d, 10);
    for (GateFn fn_kind : {GateFn::Sigmoid, GateFn::Tanh}) {
      auto fn = [&] { return gradcheck_detail::project(sdu(x, p, fn_kind), 20); };
      CHECK(gradcheck_detail::check_leaves(fn, {x, p.w1, p.b1, p.w2, p.b2}) < 1e-6);
    }
  }
  SUBCASE("sigmoid gate bounds the output by the content branch") {
    auto x = random_tensor({4, dh}, 30, false);
    auto p = random_gate(dh, 31);
    auto content = add_bias(matmul(x, p.w2), p.b2);
    for (GateFn fn_kind : {GateFn::Sigmoid, GateFn::Tanh}) {
      auto out = sdu(x, p, fn_kind);
      for (int64_t i = 0; i < out.size(); ++i)
        CHECK(std::abs(out.values()[i]) <= std::abs(content.values()[i]));
    }
  }
}

TEST_CASE("highway_gate") {
  const int64_t dh = 4;
  SUBCASE("neutral gate averages input and transform") {
    auto x = random_tensor({3, dh}, 40, false);
    GateParams<double> p{Tensor<double>::zeros({dh, dh}), Tensor<double>::zeros({dh}),
                         random_tensor({dh, dh}, 41, false), random_tensor({dh}, 42, false)};
    auto f = add_bias(matmul(x, p.w2), p.b2);
    auto out = highway_gate(x, p);
    for (int64_t i = 0; i < out.size(); ++i)
      CHECK(out.values()[i] ==
            doctest::Approx(0.5 * x.values()[i] + 0.5 * f.values()[i]).epsilon(1e-12));
  }
  SUBCASE("saturated transform gate passes the transform branch") {
    auto x = random_tensor({3, dh}, 43, false);
    GateParams<double> p{Tensor<double>::zeros({dh, dh}), Tensor<double>::filled({dh}, 20.0),
                         random_tensor({dh, dh}, 44, false), random_tensor({dh}, 45, false)};
    auto f = add_bias(matmul(x, p.w2), p.b2);
    auto out = highway_gate(x, p);
    for (int64_t i = 0; i < out.size(); ++i)
      CHECK(std::abs(out.values()[i] - f.values()[i]) <
            1e-6 * std::abs(x.values()[i]) + 1e-12);
  }
  SUBCASE("identity transform returns the input for any gate") {
    auto x = random_tensor({3, dh}, 46, false);
    GateParams<double> p{random_tensor({dh, dh}, 47, false), random_tensor({dh}, 48, false),
                         identity(dh), Tensor<double>::zeros({dh})};
    auto out = highway_gate(x, p);
    for (int64_t i = 0; i < out.size(); ++i)
      CHECK(out.values()[i] == doctest::Approx(x.values()[i]).epsilon(1e-12));
  }
  SUBCASE("output interpolates between input and transform entrywise") {
    auto x = random_tensor({5, dh}, 49, false);
    auto p = random_gate(dh, 50);
    auto f = add_bias(matmul(x, p.w2), p.b2);
    auto out = highway_gate(x, p);
    for (int64_t i = 0; i < out.size(); ++i) {
      const double lo = std::min(x.values()[i], f.values()[i]) - 1e-12;
      const double hi = std::max(x.values()[i], f.values()[i]) + 1e-12;
      CHECK(out.values()[i] >= lo);
      CHECK(out.values()[i] <= hi);
    }
  }
}

TEST_CASE("gated_mhdpa_combine") {
  const int64_t dh = 4;
  SUBCASE("neutral gate averages attention and transform") {
    auto att = random_tensor({3, dh}, 60, false);
    auto x = random_tensor({3, dh}, 61, false);
    GateParams<double> p{Tensor<double>::zeros({dh, dh}), Tensor<double>::zeros({dh}),
                         random_tensor({dh, dh}, 62, false), random_tensor({dh}, 63, false)};
    auto f = add_bias(matmul(x, p.w2), p.b2);
    auto out = gated_mhdpa_combine(att, x, p);
    for (int64_t i = 0; i < out.size(); ++i)
      CHECK(out.values()[i] ==
            doctest::Approx(0.5 * att.values()[i] + 0.5 * f.values()[i]).epsilon(1e-12));
  }
  SUBCASE("closed transform gate passes the attention output") {
    auto att = random_tensor({3, dh}, 64, false);
    auto x = random_tensor({3, dh}, 65, false);
    GateParams<double> p{Tensor<double>::zeros({dh, dh}), Tensor<double>::filled({dh}, -20.0),
                         random_tensor({dh, dh}, 66, false), random_tensor({dh}, 67, false)};
    auto out = gated_mhdpa_combine(att, x, p);
    for (int64_t i = 0; i < out.size(); ++i)
      CHECK(out.values()[i] == doctest::Approx(att.values()[i]).epsilon(1e-7));
  }
  SUBCASE("gradient through the combine matches finite differences") {
    auto att = random_tensor({3, dh}, 68);
    auto x = random_tensor({3, dh}, 69);
    auto p = random_gate(dh, 70);
    auto fn = [&] { return gradcheck_detail::project(gated_mhdpa_combine(att, x, p), 71); };
    CHECK(gradcheck_detail::check_leaves(fn, {att, x, p.w1, p.b1, p.w2, p.b2}) < 1e-6);
  }
}

TEST_CASE("sdu_param_count") {
  CHECK(sdu_param_count(512) == 525312);
  CHECK(sdu_param_count(1) == 4);
  CHECK(sdu_param_count(64) == 8320);
  CHECK_THROWS_AS(sdu_param_count(0), Error);
}

TEST_CASE("gate_saturation_stats") {
  SUBCASE("all mid") {
    auto acts = Tensor<double>::filled({10}, 0.5);
    auto s = gate_saturation_stats(acts, GateFn::Sigmoid);
    CHECK(s.frac_below == 0.0);
    CHECK(s.frac_mid == 1.0);
    CHECK(s.frac_above == 0.0);
  }
  SUBCASE("even thirds") {
    auto acts = Tensor<double>::from({3}, {0.05, 0.5, 0.95});
    auto s = gate_saturation_stats(acts, GateFn::Sigmoid);
    CHECK(s.frac_below == doctest::Approx(1.0 / 3));
    CHECK(s.frac_mid == doctest::Approx(1.0 / 3));
    CHECK(s.frac_above == doctest::Approx(1.0 / 3));
  }
  SUBCASE("matches a direct counting oracle on random activations") {
    auto logits = random_tensor({40, 25}, 80, false, -3.0, 3.0);
    auto acts = sigmoid(logits);
    auto s = gate_saturation_stats(acts, GateFn::Sigmoid);
    int below = 0, mid = 0, above = 0;
    for (double v : acts.values()) {
      if (v < 0.1) ++below;
      else if (v > 0.9) ++above;
      else ++mid;
    }
    const double n = static_cast<double>(acts.size());
    CHECK(s.frac_below == doctest::Approx(below / n));
    CHECK(s.frac_mid == doctest::Approx(mid / n));
    CHECK(s.frac_above == doctest::Approx(above / n));
    CHECK(s.frac_below + s.frac_mid + s.frac_above == doctest::Approx(1.0));
  }
  SUBCASE("tanh thresholds sit at +-0.8") {
    auto acts = Tensor<double>::from({4}, {-0.9, -0.5, 0.5, 0.9});
    auto s = gate_saturation_stats(acts, GateFn::Tanh);
    CHECK(s.frac_below == doctest::Approx(0.25));
    CHECK(s.frac_mid == doctest::Approx(0.5));
    CHECK(s.frac_above == doctest::Approx(0.25));
  }
  SUBCASE("empty tensor is rejected") {
    Tensor<double> empty;
    CHECK_THROWS_AS(gate_saturation_stats(empty, GateFn::Sigmoid), Error);
  }
}

TEST_CASE("product-rule decomposition of the gated branch") {
  // Backward of f(X) (.) Psi(g(X)) equals the sum of the two product-rule
  // terms, each evaluated independently by explicit matrix algebra.
  const int64_t d = 5, L = 4;
  auto x = random_tensor({L, d}, 90);
  auto p = random_gate(d, 91);
  auto w = random_tensor({L, d}, 92, false, -1.0, 1.0);

  for (GateFn kind : {GateFn::Sigmoid, GateFn::Tanh}) {
    x.zero_grad();
    backward(sum(hadamard(w, sdu(x, p, kind))));

    auto gate_logits = add_bias(matmul(x, p.w1), p.b1);
    auto gate = kind == GateFn::Sigmoid ? sigmoid(gate_logits) : tanh_act(gate_logits);
    auto content = add_bias(matmul(x, p.w2), p.b2);

    // term1 = [w (.) Psi(g)] W2^T ; term2 = [w (.) f (.) Psi'(g)] W1^T
    std::vector<double> expected(static_cast<size_t>(L * d), 0.0);
    for (int64_t i = 0; i < L; ++i) {
      for (int64_t k = 0; k < d; ++k) {
        double term1 = 0.0, term2 = 0.0;
        for (int64_t j = 0; j < d; ++j) {
          const double g = gate.values()[i * d + j];
          const double dpsi = kind == GateFn::Sigmoid ? g * (1 - g) : 1 - g * g;
          term1 += w.values()[i * d + j] * g * p.w2.values()[k * d + j];
          term2 += w.values()[i * d + j] * content.values()[i * d + j] * dpsi *
                   p.w1.values()[k * d + j];
        }
        expected[static_cast<size_t>(i * d + k)] = term1 + term2;
      }
    }
    for (int64_t i = 0; i < L * d; ++i) {
      const double got = x.grad()[i];
      CHECK(std::abs(got - expected[static_cast<size_t>(i)]) /
                std::max(1e-10, std::abs(expected[static_cast<size_t>(i)])) <
            1e-10);
    }
  }
}

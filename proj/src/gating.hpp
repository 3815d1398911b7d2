#pragma once

#include <cstdint>
#include <string>

#include "ops.hpp"

namespace gatedformer {

enum class GateKind { None, SduSigmoid, SduTanh, HighwayGate, GatedMhdpa };

inline const char* gate_kind_name(GateKind kind) {
  switch (kind) {
    case GateKind::None: return "none";
    case GateKind::SduSigmoid: return "sdu-sigmoid";
    case GateKind::SduTanh: return "sdu-tanh";
    case GateKind::HighwayGate: return "highway";
    case GateKind::GatedMhdpa: return "gated-mhdpa";
  }
  return "none";
}

// Gate-branch (w1, b1) and content-branch (w2, b2) parameters of one gate
// instance. Biases start at zero so sigmoid gates open half-way and tanh
// gates start closed.
template <class T>
struct GateParams {
  Tensor<T> w1, b1;  // dh x dh, dh
  Tensor<T> w2, b2;  // dh x dh, dh
};

enum class GateFn { Sigmoid, Tanh };

// Self-dependency unit: Psi(x*w1 + b1) (.) (x*w2 + b2).
template <class T>
Tensor<T> sdu(const Tensor<T>& x, const GateParams<T>& p, GateFn psi) {
  Tensor<T> gate_logits = add_bias(matmul(x, p.w1), p.b1);
  Tensor<T> gate = psi == GateFn::Sigmoid ? sigmoid(gate_logits) : tanh_act(gate_logits);
  Tensor<T> content = add_bias(matmul(x, p.w2), p.b2);
  return hadamard(gate, content);
}

// Highway combination of the input with its linear transform:
// (1 - T(x)) (.) x + T(x) (.) f(x). The caller adds the attention output
// and applies layer norm.
template <class T>
Tensor<T> highway_gate(const Tensor<T>& x, const GateParams<T>& p) {
  Tensor<T> t = sigmoid(add_bias(matmul(x, p.w1), p.b1));
  Tensor<T> f = add_bias(matmul(x, p.w2), p.b2);
  Tensor<T> carry = hadamard(affine(t, T(-1), T(1)), x);
  return add(carry, hadamard(t, f));
}

// Gate between the attention output and the transformed input:
// (1 - T(x)) (.) att + T(x) (.) f(x). The caller computes LN(o + x).
template <class T>
Tensor<T> gated_mhdpa_combine(const Tensor<T>& att, const Tensor<T>& x, const GateParams<T>& p) {
  detail::require_same_shape(att, x, "gated_mhdpa_combine");
  Tensor<T> t = sigmoid(add_bias(matmul(x, p.w1), p.b1));
  Tensor<T> f = add_bias(matmul(x, p.w2), p.b2);
  Tensor<T> carry = hadamard(affine(t, T(-1), T(1)), att);
  return add(carry, hadamard(t, f));
}

// Trainable-parameter cost of one gate instance: two dh x dh weights plus
// two dh biases.
inline int64_t sdu_param_count(int64_t dh) {
  require(dh >= 1, ErrorCode::InvalidArgument, "sdu_param_count: dh must be >= 1");
  return 2 * dh * (dh + 1);
}

struct GateSaturation {
  double frac_below = 0.0;
  double frac_mid = 0.0;
  double frac_above = 0.0;
};

// Fraction of gate activations in the closed / linear / open regions.
// Sigmoid thresholds are 0.1 and 0.9; tanh uses the symmetric -0.8 / 0.8.
template <class T>
GateSaturation gate_saturation_stats(const Tensor<T>& activations, GateFn psi) {
  require(activations.defined() && activations.size() > 0, ErrorCode::EmptyTensor,
          "gate_saturation_stats: no activations");
  const double lo = psi == GateFn::Sigmoid ? 0.1 : -0.8;
  const double hi = psi == GateFn::Sigmoid ? 0.9 : 0.8;
  int64_t below = 0, mid = 0, above = 0;
  for (T v : activations.values()) {
    const double x = static_cast<double>(v);
    if (x < lo) {
      ++below;
    } else if (x > hi) {
      ++above;
    } else {
      ++mid;
    }
  }
  const double n = static_cast<double>(activations.size());
  return {below / n, mid / n, above / n};
}

}  // namespace gatedformer

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "autodiff.hpp"

namespace gatedformer {

template <class T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>>>;

// Global L2 norm over all gradients, accumulated in double in a fixed order.
template <class T>
double global_grad_norm(const NamedParams<T>& params) {
  double sum = 0.0;
  for (const auto& [name, p] : params) {
    for (T g : p.grad()) sum += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(sum);
}

// Rescale gradients so the global norm is at most max_norm. The factor is
// shaved by a few ulps so the rescaled norm stays below the bound after
// element rounding. Returns the pre-clip norm.
template <class T>
double clip_global_norm(NamedParams<T>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm <= max_norm || norm == 0.0) return norm;
  const double s =
      (max_norm / norm) * (1.0 - 8.0 * static_cast<double>(std::numeric_limits<T>::epsilon()));
  for (auto& [name, p] : params) {
    auto node = p.node();
    for (T& g : node->grad) g = static_cast<T>(static_cast<double>(g) * s);
  }
  return norm;
}

// Plain SGD update; annealing is driven by the trainer via SgdAnnealState.
template <class T>
void sgd_step(NamedParams<T>& params, double lr) {
  for (auto& [name, p] : params) {
    auto node = p.node();
    node->ensure_grad();
    for (size_t i = 0; i < node->value.size(); ++i)
      node->value[i] -= static_cast<T>(lr) * node->grad[i];
  }
}

// Validation-plateau annealing: when the validation loss fails to improve
// for `patience` consecutive evaluations, lr <- lr * decay_factor.
struct SgdAnnealState {
  double lr = 2.0;
  double decay_factor = 0.25;
  int patience = 1;
  int bad_evals = 0;
  double best_valid_loss = std::numeric_limits<double>::infinity();

  // Returns true when the learning rate was decayed.
  bool observe_validation(double valid_loss) {
    if (valid_loss < best_valid_loss) {
      best_valid_loss = valid_loss;
      bad_evals = 0;
      return false;
    }
    if (++bad_evals >= patience) {
      lr *= decay_factor;
      bad_evals = 0;
      return true;
    }
    return false;
  }
};

// Adam with bias correction, no warm-up schedule.
template <class T>
struct AdamState {
  int64_t t = 0;
  std::vector<std::vector<T>> m, v;

  void ensure_shapes(const NamedParams<T>& params) {
    if (!m.empty()) return;
    for (const auto& [name, p] : params) {
      m.emplace_back(p.size(), T(0));
      v.emplace_back(p.size(), T(0));
    }
  }
};

template <class T>
void adam_step(NamedParams<T>& params, AdamState<T>& state, double lr, double beta1 = 0.9,
               double beta2 = 0.999, double eps = 1e-8) {
  state.ensure_shapes(params);
  state.t += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto node = params[pi].second.node();
    node->ensure_grad();
    auto& m = state.m[pi];
    auto& v = state.v[pi];
    for (size_t i = 0; i < node->value.size(); ++i) {
      const double g = static_cast<double>(node->grad[i]);
      m[i] = static_cast<T>(beta1 * static_cast<double>(m[i]) + (1.0 - beta1) * g);
      v[i] = static_cast<T>(beta2 * static_cast<double>(v[i]) + (1.0 - beta2) * g * g);
      const double m_hat = static_cast<double>(m[i]) / bc1;
      const double v_hat = static_cast<double>(v[i]) / bc2;
      node->value[i] -= static_cast<T>(lr * m_hat / (std::sqrt(v_hat) + eps));
    }
  }
}

}  // namespace gatedformer

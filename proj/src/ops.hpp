#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <limits>
#include <string>
#include <thread>
#include <vector>

#include "autodiff.hpp"
#include "rng.hpp"

namespace gatedformer {

// Worker cap for the parallel matmul path. Each output row is reduced by a
// single worker in fixed k-order, so results are bit-stable for any count.
inline int worker_count() {
  static int count = [] {
    if (const char* env = std::getenv("GATEDFORMER_THREADS")) {
      int n = std::atoi(env);
      if (n >= 1) return n;
    }
    return 1;
  }();
  return count;
}

namespace detail {

inline void parallel_rows(int64_t rows, int64_t work_per_row, const std::function<void(int64_t, int64_t)>& fn) {
  const int workers = worker_count();
  if (workers <= 1 || rows < 2 || rows * work_per_row < (1 << 16)) {
    fn(0, rows);
    return;
  }
  const int n = static_cast<int>(std::min<int64_t>(workers, rows));
  std::vector<std::thread> threads;
  threads.reserve(static_cast<size_t>(n));
  const int64_t chunk = (rows + n - 1) / n;
  for (int w = 0; w < n; ++w) {
    const int64_t begin = w * chunk;
    const int64_t end = std::min(rows, begin + chunk);
    if (begin >= end) break;
    threads.emplace_back([&fn, begin, end] { fn(begin, end); });
  }
  for (auto& t : threads) t.join();
}

// C[m,n] += A[m,k] * B[k,n]
template <class T>
void gemm_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  parallel_rows(m, k * n, [=](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      const T* arow = a + i * k;
      T* crow = c + i * n;
      for (int64_t l = 0; l < k; ++l) {
        const T av = arow[l];
        if (av == T(0)) continue;
        const T* brow = b + l * n;
        for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  });
}

// C[m,n] += A[m,k] * B[n,k]^T
template <class T>
void gemm_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  parallel_rows(m, k * n, [=](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      const T* arow = a + i * k;
      T* crow = c + i * n;
      for (int64_t j = 0; j < n; ++j) {
        const T* brow = b + j * k;
        T acc = T(0);
        for (int64_t l = 0; l < k; ++l) acc += arow[l] * brow[l];
        crow[j] += acc;
      }
    }
  });
}

// C[k,n] += A[m,k]^T * B[m,n]
template <class T>
void gemm_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (int64_t l = 0; l < k; ++l) {
      const T av = arow[l];
      if (av == T(0)) continue;
      T* crow = c + l * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
void require_2d(const Tensor<T>& x, const char* op) {
  require(x.rank() == 2, ErrorCode::ShapeMismatch,
          std::string(op) + " expects a 2-d tensor, got " + shape_str(x.shape()));
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.shape() == b.shape(), ErrorCode::ShapeMismatch,
          std::string(op) + ": shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  const int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  require(k == k2, ErrorCode::ShapeMismatch,
          "matmul: inner extents differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));

  auto node = detail::new_node<T>({m, n});
  detail::gemm_nn(a.values().data(), b.values().data(), node->value.data(), m, k, n);
  detail::check_finite(*node, "matmul");

  if (detail::any_requires_grad<T>({&a, &b})) {
    node->requires_grad = true;
    node->parents = {a.node(), b.node()};
    auto* self = node.get();
    auto* an = a.raw();
    auto* bn = b.raw();
    node->backward_fn = [self, an, bn, m, k, n] {
      if (an->requires_grad) {
        an->ensure_grad();
        detail::gemm_nt(self->grad.data(), bn->value.data(), an->grad.data(), m, n, k);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        detail::gemm_tn(an->value.data(), self->grad.data(), bn->grad.data(), m, k, n);
      }
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  detail::require_2d(x, "transpose");
  const int64_t r = x.dim(0), c = x.dim(1);
  auto node = detail::new_node<T>({c, r});
  const T* src = x.values().data();
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) node->value[j * r + i] = src[i * c + j];
  if (x.requires_grad()) {
    node->requires_grad = true;
    node->parents = {x.node()};
    auto* self = node.get();
    auto* xn = x.raw();
    node->backward_fn = [self, xn, r, c] {
      xn->ensure_grad();
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) xn->grad[i * c + j] += self->grad[j * r + i];
    };
  }
  return Tensor<T>(node);
}

namespace detail {

template <class T, class Fwd, class Bwd>
Tensor<T> elementwise_binary(const Tensor<T>& a, const Tensor<T>& b, const char* op, Fwd fwd,
                             Bwd bwd) {
  require_same_shape(a, b, op);
  auto node = new_node<T>(a.shape());
  const T* av = a.values().data();
  const T* bv = b.values().data();
  for (size_t i = 0; i < node->value.size(); ++i) node->value[i] = fwd(av[i], bv[i]);
  check_finite(*node, op);
  if (any_requires_grad<T>({&a, &b})) {
    node->requires_grad = true;
    node->parents = {a.node(), b.node()};
    auto* self = node.get();
    auto* an = a.raw();
    auto* bn = b.raw();
    node->backward_fn = [self, an, bn, bwd] {
      const size_t n = self->value.size();
      if (an->requires_grad) an->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      for (size_t i = 0; i < n; ++i) {
        auto [da, db] = bwd(an->value[i], bn->value[i], self->grad[i]);
        if (an->requires_grad) an->grad[i] += da;
        if (bn->requires_grad) bn->grad[i] += db;
      }
    };
  }
  return Tensor<T>(node);
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::elementwise_binary(
      a, b, "add", [](T x, T y) { return x + y; },
      [](T, T, T g) { return std::pair<T, T>(g, g); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::elementwise_binary(
      a, b, "sub", [](T x, T y) { return x - y; },
      [](T, T, T g) { return std::pair<T, T>(g, -g); });
}

template <class T>
Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::elementwise_binary(
      a, b, "hadamard", [](T x, T y) { return x * y; },
      [](T x, T y, T g) { return std::pair<T, T>(g * y, g * x); });
}

// y = mul*x + shift, scalar coefficients.
template <class T>
Tensor<T> affine(const Tensor<T>& x, T mul, T shift) {
  auto node = detail::new_node<T>(x.shape());
  const T* xv = x.values().data();
  for (size_t i = 0; i < node->value.size(); ++i) node->value[i] = mul * xv[i] + shift;
  detail::check_finite(*node, "affine");
  if (x.requires_grad()) {
    node->requires_grad = true;
    node->parents = {x.node()};
    auto* self = node.get();
    auto* xn = x.raw();
    node->backward_fn = [self, xn, mul] {
      xn->ensure_grad();
      for (size_t i = 0; i < self->grad.size(); ++i) xn->grad[i] += mul * self->grad[i];
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T mul) {
  return affine(x, mul, T(0));
}

// Broadcast a length-d bias over the rows of an L x d tensor.
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  detail::require_2d(x, "add_bias");
  const int64_t rows = x.dim(0), cols = x.dim(1);
  require(bias.rank() == 1 && bias.dim(0) == cols, ErrorCode::ShapeMismatch,
          "add_bias: bias " + shape_str(bias.shape()) + " does not match " + shape_str(x.shape()));
  auto node = detail::new_node<T>(x.shape());
  const T* xv = x.values().data();
  const T* bv = bias.values().data();
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < cols; ++j) node->value[i * cols + j] = xv[i * cols + j] + bv[j];
  detail::check_finite(*node, "add_bias");
  if (detail::any_requires_grad<T>({&x, &bias})) {
    node->requires_grad = true;
    node->parents = {x.node(), bias.node()};
    auto* self = node.get();
    auto* xn = x.raw();
    auto* bn = bias.raw();
    node->backward_fn = [self, xn, bn, rows, cols] {
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (size_t i = 0; i < self->grad.size(); ++i) xn->grad[i] += self->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int64_t i = 0; i < rows; ++i)
          for (int64_t j = 0; j < cols; ++j) bn->grad[j] += self->grad[i * cols + j];
      }
    };
  }
  return Tensor<T>(node);
}

// Repeat a length-k vector (or 1 x k matrix) down `rows` rows.
template <class T>
Tensor<T> broadcast_row(const Tensor<T>& v, int64_t rows) {
  const int64_t cols = (v.rank() == 2 && v.dim(0) == 1) ? v.dim(1)
                       : (v.rank() == 1)                ? v.dim(0)
                                                        : -1;
  require(cols >= 0, ErrorCode::ShapeMismatch,
          "broadcast_row expects a vector, got " + shape_str(v.shape()));
  auto node = detail::new_node<T>({rows, cols});
  const T* vv = v.values().data();
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < cols; ++j) node->value[i * cols + j] = vv[j];
  if (v.requires_grad()) {
    node->requires_grad = true;
    node->parents = {v.node()};
    auto* self = node.get();
    auto* vn = v.raw();
    node->backward_fn = [self, vn, rows, cols] {
      vn->ensure_grad();
      for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < cols; ++j) vn->grad[j] += self->grad[i * cols + j];
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, int axis) {
  detail::require_2d(a, "concat");
  detail::require_2d(b, "concat");
  require(axis == 0 || axis == 1, ErrorCode::InvalidArgument, "concat axis must be 0 or 1");
  Shape shape;
  if (axis == 0) {
    require(a.dim(1) == b.dim(1), ErrorCode::ShapeMismatch,
            "concat axis 0: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    shape = {a.dim(0) + b.dim(0), a.dim(1)};
  } else {
    require(a.dim(0) == b.dim(0), ErrorCode::ShapeMismatch,
            "concat axis 1: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    shape = {a.dim(0), a.dim(1) + b.dim(1)};
  }
  auto node = detail::new_node<T>(shape);
  const int64_t rows = shape[0], cols = shape[1];
  const T* av = a.values().data();
  const T* bv = b.values().data();
  if (axis == 0) {
    std::copy(av, av + a.size(), node->value.begin());
    std::copy(bv, bv + b.size(), node->value.begin() + a.size());
  } else {
    const int64_t ac = a.dim(1), bc = b.dim(1);
    for (int64_t i = 0; i < rows; ++i) {
      std::copy(av + i * ac, av + (i + 1) * ac, node->value.begin() + i * cols);
      std::copy(bv + i * bc, bv + (i + 1) * bc, node->value.begin() + i * cols + ac);
    }
  }
  if (detail::any_requires_grad<T>({&a, &b})) {
    node->requires_grad = true;
    node->parents = {a.node(), b.node()};
    auto* self = node.get();
    auto* an = a.raw();
    auto* bn = b.raw();
    const int64_t arows = a.dim(0), acols = a.dim(1), bcols = b.dim(1);
    node->backward_fn = [self, an, bn, axis, rows, cols, arows, acols, bcols] {
      if (axis == 0) {
        if (an->requires_grad) {
          an->ensure_grad();
          for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += self->grad[i];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          const size_t off = static_cast<size_t>(arows) * cols;
          for (size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] += self->grad[off + i];
        }
      } else {
        if (an->requires_grad) {
          an->ensure_grad();
          for (int64_t i = 0; i < rows; ++i)
            for (int64_t j = 0; j < acols; ++j) an->grad[i * acols + j] += self->grad[i * cols + j];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (int64_t i = 0; i < rows; ++i)
            for (int64_t j = 0; j < bcols; ++j)
              bn->grad[i * bcols + j] += self->grad[i * cols + acols + j];
        }
      }
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> slice_rows(const Tensor<T>& x, int64_t begin, int64_t count) {
  detail::require_2d(x, "slice_rows");
  require(begin >= 0 && count >= 0 && begin + count <= x.dim(0), ErrorCode::ShapeMismatch,
          "slice_rows [" + std::to_string(begin) + "," + std::to_string(begin + count) +
              ") out of range for " + shape_str(x.shape()));
  const int64_t cols = x.dim(1);
  auto node = detail::new_node<T>({count, cols});
  const T* xv = x.values().data();
  std::copy(xv + begin * cols, xv + (begin + count) * cols, node->value.begin());
  if (x.requires_grad()) {
    node->requires_grad = true;
    node->parents = {x.node()};
    auto* self = node.get();
    auto* xn = x.raw();
    node->backward_fn = [self, xn, begin, cols] {
      xn->ensure_grad();
      const size_t off = static_cast<size_t>(begin) * cols;
      for (size_t i = 0; i < self->grad.size(); ++i) xn->grad[off + i] += self->grad[i];
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& x, int64_t begin, int64_t count) {
  detail::require_2d(x, "slice_cols");
  require(begin >= 0 && count >= 0 && begin + count <= x.dim(1), ErrorCode::ShapeMismatch,
          "slice_cols [" + std::to_string(begin) + "," + std::to_string(begin + count) +
              ") out of range for " + shape_str(x.shape()));
  const int64_t rows = x.dim(0), cols = x.dim(1);
  auto node = detail::new_node<T>({rows, count});
  const T* xv = x.values().data();
  for (int64_t i = 0; i < rows; ++i)
    std::copy(xv + i * cols + begin, xv + i * cols + begin + count, node->value.begin() + i * count);
  if (x.requires_grad()) {
    node->requires_grad = true;
    node->parents = {x.node()};
    auto* self = node.get();
    auto* xn = x.raw();
    node->backward_fn = [self, xn, begin, rows, cols, count] {
      xn->ensure_grad();
      for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < count; ++j)
          xn->grad[i * cols + begin + j] += self->grad[i * count + j];
    };
  }
  return Tensor<T>(node);
}

enum class Activation { Sigmoid, Tanh, Relu };

template <class T>
Tensor<T> activation(Activation kind, const Tensor<T>& x) {
  auto node = detail::new_node<T>(x.shape());
  const T* xv = x.values().data();
  for (size_t i = 0; i < node->value.size(); ++i) {
    const T v = xv[i];
    switch (kind) {
      case Activation::Sigmoid:
        node->value[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                                   : std::exp(v) / (T(1) + std::exp(v));
        break;
      case Activation::Tanh:
        node->value[i] = std::tanh(v);
        break;
      case Activation::Relu:
        node->value[i] = v > T(0) ? v : T(0);
        break;
    }
  }
  detail::check_finite(*node, "activation");
  if (x.requires_grad()) {
    node->requires_grad = true;
    node->parents = {x.node()};
    auto* self = node.get();
    auto* xn = x.raw();
    node->backward_fn = [self, xn, kind] {
      xn->ensure_grad();
      for (size_t i = 0; i < self->grad.size(); ++i) {
        const T y = self->value[i];
        T local = T(0);
        switch (kind) {
          case Activation::Sigmoid: local = y * (T(1) - y); break;
          case Activation::Tanh: local = T(1) - y * y; break;
          case Activation::Relu: local = y > T(0) ? T(1) : T(0); break;
        }
        xn->grad[i] += local * self->grad[i];
      }
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) { return activation(Activation::Sigmoid, x); }
template <class T>
Tensor<T> tanh_act(const Tensor<T>& x) { return activation(Activation::Tanh, x); }
template <class T>
Tensor<T> relu(const Tensor<T>& x) { return activation(Activation::Relu, x); }

// Forward identity that records no parentage: nothing flows back through it.
template <class T>
Tensor<T> stop_gradient(const Tensor<T>& x) {
  auto node = detail::new_node<T>(x.shape());
  node->value = x.to_vector();
  return Tensor<T>(node);
}

// Numerically stabilized softmax. Entries may be -inf (masked -> exactly 0);
// a slice that is entirely -inf is an error.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1) {
  require(x.rank() == 1 || x.rank() == 2, ErrorCode::ShapeMismatch,
          "softmax expects a 1-d or 2-d tensor, got " + shape_str(x.shape()));
  const bool vec = x.rank() == 1;
  if (axis < 0) axis += x.rank();
  require(axis >= 0 && axis < x.rank(), ErrorCode::InvalidArgument, "softmax: invalid axis");

  Tensor<T> input = (!vec && axis == 0) ? transpose(x) : x;
  const int64_t rows = vec ? 1 : input.dim(0);
  const int64_t cols = vec ? input.dim(0) : input.dim(1);

  auto node = detail::new_node<T>(input.shape());
  const T* xv = input.values().data();
  const T neg_inf = -std::numeric_limits<T>::infinity();
  for (int64_t i = 0; i < rows; ++i) {
    const T* row = xv + i * cols;
    T m = neg_inf;
    for (int64_t j = 0; j < cols; ++j) m = std::max(m, row[j]);
    require(m != neg_inf, ErrorCode::AllMasked,
            "softmax: slice " + std::to_string(i) + " is entirely masked");
    T sum = T(0);
    T* out = node->value.data() + i * cols;
    for (int64_t j = 0; j < cols; ++j) {
      out[j] = std::exp(row[j] - m);
      sum += out[j];
    }
    for (int64_t j = 0; j < cols; ++j) out[j] /= sum;
  }
  detail::check_finite(*node, "softmax");
  if (input.requires_grad()) {
    node->requires_grad = true;
    node->parents = {input.node()};
    auto* self = node.get();
    auto* xn = input.raw();
    node->backward_fn = [self, xn, rows, cols] {
      xn->ensure_grad();
      for (int64_t i = 0; i < rows; ++i) {
        const T* p = self->value.data() + i * cols;
        const T* g = self->grad.data() + i * cols;
        T dot = T(0);
        for (int64_t j = 0; j < cols; ++j) dot += p[j] * g[j];
        for (int64_t j = 0; j < cols; ++j) xn->grad[i * cols + j] += p[j] * (g[j] - dot);
      }
    };
  }
  Tensor<T> out(node);
  return (!vec && axis == 0) ? transpose(out) : out;
}

// Causal mask over L x (mem_len + L) attention logits: query i keeps keys
// 0..mem_len+i and the rest become -inf exactly.
template <class T>
Tensor<T> causal_mask(const Tensor<T>& logits, int64_t mem_len) {
  detail::require_2d(logits, "causal_mask");
  const int64_t rows = logits.dim(0), cols = logits.dim(1);
  require(cols == mem_len + rows, ErrorCode::ShapeMismatch,
          "causal_mask: key length " + std::to_string(cols) + " != mem " +
              std::to_string(mem_len) + " + query length " + std::to_string(rows));
  auto node = detail::new_node<T>(logits.shape());
  const T* xv = logits.values().data();
  const T neg_inf = -std::numeric_limits<T>::infinity();
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < cols; ++j)
      node->value[i * cols + j] = j <= mem_len + i ? xv[i * cols + j] : neg_inf;
  detail::check_finite(*node, "causal_mask", /*allow_neg_inf=*/true);
  if (logits.requires_grad()) {
    node->requires_grad = true;
    node->parents = {logits.node()};
    auto* self = node.get();
    auto* xn = logits.raw();
    node->backward_fn = [self, xn, rows, cols, mem_len] {
      xn->ensure_grad();
      for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j <= mem_len + i && j < cols; ++j)
          xn->grad[i * cols + j] += self->grad[i * cols + j];
    };
  }
  return Tensor<T>(node);
}

// Diagonal-offset gather used by relative attention scores. The input is
// indexed by relative-distance row r (distances stored descending); the
// output is indexed by key position j via r = L-1-i+j. Out-of-range r only
// happens for masked (future) pairs and is clamped.
template <class T>
Tensor<T> rel_gather(const Tensor<T>& s) {
  detail::require_2d(s, "rel_gather");
  const int64_t rows = s.dim(0), cols = s.dim(1);
  auto node = detail::new_node<T>(s.shape());
  const T* sv = s.values().data();
  auto rindex = [rows, cols](int64_t i, int64_t j) {
    return std::clamp<int64_t>(rows - 1 - i + j, 0, cols - 1);
  };
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < cols; ++j) node->value[i * cols + j] = sv[i * cols + rindex(i, j)];
  if (s.requires_grad()) {
    node->requires_grad = true;
    node->parents = {s.node()};
    auto* self = node.get();
    auto* sn = s.raw();
    node->backward_fn = [self, sn, rows, cols, rindex] {
      sn->ensure_grad();
      for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < cols; ++j)
          sn->grad[i * cols + rindex(i, j)] += self->grad[i * cols + j];
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  detail::require_2d(x, "layer_norm");
  const int64_t rows = x.dim(0), cols = x.dim(1);
  require(gamma.rank() == 1 && gamma.dim(0) == cols && beta.rank() == 1 && beta.dim(0) == cols,
          ErrorCode::ShapeMismatch,
          "layer_norm: affine params " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
              " do not match " + shape_str(x.shape()));
  require(eps > T(0), ErrorCode::InvalidArgument, "layer_norm: eps must be positive");

  auto node = detail::new_node<T>(x.shape());
  std::vector<T> inv_std(static_cast<size_t>(rows));
  std::vector<T> xhat(static_cast<size_t>(rows * cols));
  const T* xv = x.values().data();
  const T* gv = gamma.values().data();
  const T* bv = beta.values().data();
  for (int64_t i = 0; i < rows; ++i) {
    const T* row = xv + i * cols;
    T mean = T(0);
    for (int64_t j = 0; j < cols; ++j) mean += row[j];
    mean /= static_cast<T>(cols);
    T var = T(0);
    for (int64_t j = 0; j < cols; ++j) {
      const T d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<T>(cols);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(i)] = is;
    for (int64_t j = 0; j < cols; ++j) {
      const T h = (row[j] - mean) * is;
      xhat[static_cast<size_t>(i * cols + j)] = h;
      node->value[i * cols + j] = gv[j] * h + bv[j];
    }
  }
  detail::check_finite(*node, "layer_norm");
  if (detail::any_requires_grad<T>({&x, &gamma, &beta})) {
    node->requires_grad = true;
    node->parents = {x.node(), gamma.node(), beta.node()};
    auto* self = node.get();
    auto* xn = x.raw();
    auto* gn = gamma.raw();
    auto* bn = beta.raw();
    node->backward_fn = [self, xn, gn, bn, rows, cols, inv_std = std::move(inv_std),
                         xhat = std::move(xhat)] {
      if (xn->requires_grad) xn->ensure_grad();
      if (gn->requires_grad) gn->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      for (int64_t i = 0; i < rows; ++i) {
        const T* g = self->grad.data() + i * cols;
        const T* h = xhat.data() + i * cols;
        if (gn->requires_grad || bn->requires_grad) {
          for (int64_t j = 0; j < cols; ++j) {
            if (gn->requires_grad) gn->grad[j] += g[j] * h[j];
            if (bn->requires_grad) bn->grad[j] += g[j];
          }
        }
        if (xn->requires_grad) {
          T sum_dh = T(0), sum_dh_h = T(0);
          for (int64_t j = 0; j < cols; ++j) {
            const T dh = gn->value[j] * g[j];
            sum_dh += dh;
            sum_dh_h += dh * h[j];
          }
          const T inv_n = T(1) / static_cast<T>(cols);
          const T is = inv_std[static_cast<size_t>(i)];
          for (int64_t j = 0; j < cols; ++j) {
            const T dh = gn->value[j] * g[j];
            xn->grad[i * cols + j] += is * (dh - inv_n * sum_dh - h[j] * inv_n * sum_dh_h);
          }
        }
      }
    };
  }
  return Tensor<T>(node);
}

// Gather rows of the embedding table; backward scatter-adds into it.
template <class T>
Tensor<T> embedding_lookup(const Tensor<T>& table, const std::vector<int32_t>& ids) {
  detail::require_2d(table, "embedding_lookup");
  const int64_t vocab = table.dim(0), width = table.dim(1);
  for (int32_t id : ids) {
    require(id >= 0 && id < vocab, ErrorCode::OutOfVocab,
            "token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(vocab));
  }
  const int64_t rows = static_cast<int64_t>(ids.size());
  auto node = detail::new_node<T>({rows, width});
  const T* tv = table.values().data();
  for (int64_t i = 0; i < rows; ++i)
    std::copy(tv + ids[static_cast<size_t>(i)] * width, tv + (ids[static_cast<size_t>(i)] + 1) * width,
              node->value.begin() + i * width);
  if (table.requires_grad()) {
    node->requires_grad = true;
    node->parents = {table.node()};
    auto* self = node.get();
    auto* tn = table.raw();
    node->backward_fn = [self, tn, ids, width] {
      tn->ensure_grad();
      for (size_t i = 0; i < ids.size(); ++i) {
        const T* g = self->grad.data() + static_cast<int64_t>(i) * width;
        T* dst = tn->grad.data() + ids[i] * static_cast<int64_t>(width);
        for (int64_t j = 0; j < width; ++j) dst[j] += g[j];
      }
    };
  }
  return Tensor<T>(node);
}

// Mean next-token negative log-likelihood in nats (log-softmax + NLL).
template <class T>
Tensor<T> cross_entropy_from_logits(const Tensor<T>& logits, const std::vector<int32_t>& targets) {
  detail::require_2d(logits, "cross_entropy_from_logits");
  const int64_t rows = logits.dim(0), vocab = logits.dim(1);
  require(rows == static_cast<int64_t>(targets.size()), ErrorCode::ShapeMismatch,
          "cross_entropy: " + std::to_string(targets.size()) + " targets for " +
              std::to_string(rows) + " positions");
  for (int32_t t : targets) {
    require(t >= 0 && t < vocab, ErrorCode::OutOfVocab,
            "target id " + std::to_string(t) + " outside vocabulary of size " + std::to_string(vocab));
  }

  auto node = detail::new_node<T>({1});
  const T* zv = logits.values().data();
  T total = T(0);
  for (int64_t i = 0; i < rows; ++i) {
    const T* row = zv + i * vocab;
    T m = row[0];
    for (int64_t j = 1; j < vocab; ++j) m = std::max(m, row[j]);
    T sum = T(0);
    for (int64_t j = 0; j < vocab; ++j) sum += std::exp(row[j] - m);
    total += m + std::log(sum) - row[targets[static_cast<size_t>(i)]];
  }
  node->value[0] = total / static_cast<T>(rows);
  detail::check_finite(*node, "cross_entropy_from_logits");
  if (logits.requires_grad()) {
    node->requires_grad = true;
    node->parents = {logits.node()};
    auto* self = node.get();
    auto* zn = logits.raw();
    node->backward_fn = [self, zn, targets, rows, vocab] {
      zn->ensure_grad();
      const T g = self->grad[0] / static_cast<T>(rows);
      for (int64_t i = 0; i < rows; ++i) {
        const T* row = zn->value.data() + i * vocab;
        T m = row[0];
        for (int64_t j = 1; j < vocab; ++j) m = std::max(m, row[j]);
        T sum = T(0);
        for (int64_t j = 0; j < vocab; ++j) sum += std::exp(row[j] - m);
        T* dst = zn->grad.data() + i * vocab;
        for (int64_t j = 0; j < vocab; ++j) dst[j] += g * (std::exp(row[j] - m) / sum);
        dst[targets[static_cast<size_t>(i)]] -= g;
      }
    };
  }
  return Tensor<T>(node);
}

// Identifies one dropout site across graph rebuilds; masks depend only on
// (seed, site, step, element).
struct DropoutKey {
  uint64_t seed = 0;
  uint64_t site = 0;
  uint64_t step = 0;
};

template <class T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool train, DropoutKey key) {
  require(p >= 0.0 && p < 1.0, ErrorCode::InvalidArgument, "dropout: p must be in [0,1)");
  if (!train || p == 0.0) return x;

  auto node = detail::new_node<T>(x.shape());
  auto keep = std::make_shared<std::vector<uint8_t>>(x.size());
  const T inv_keep = T(1) / static_cast<T>(1.0 - p);
  const T* xv = x.values().data();
  for (int64_t i = 0; i < x.size(); ++i) {
    const bool k = rng::uniform01(key.seed, key.site, key.step, static_cast<uint64_t>(i)) >= p;
    (*keep)[static_cast<size_t>(i)] = k;
    node->value[i] = k ? xv[i] * inv_keep : T(0);
  }
  detail::check_finite(*node, "dropout");
  if (x.requires_grad()) {
    node->requires_grad = true;
    node->parents = {x.node()};
    auto* self = node.get();
    auto* xn = x.raw();
    node->backward_fn = [self, xn, keep, inv_keep] {
      xn->ensure_grad();
      for (size_t i = 0; i < self->grad.size(); ++i)
        if ((*keep)[i]) xn->grad[i] += inv_keep * self->grad[i];
    };
  }
  return Tensor<T>(node);
}

// Stack n vectors (or 1 x k rows) into an n x k matrix.
template <class T>
Tensor<T> stack_rows(const std::vector<Tensor<T>>& rows) {
  require(!rows.empty(), ErrorCode::EmptyTensor, "stack_rows: no rows");
  const int64_t cols = rows.front().rank() == 2 ? rows.front().dim(1) : rows.front().dim(0);
  const int64_t n = static_cast<int64_t>(rows.size());
  auto node = detail::new_node<T>({n, cols});
  bool req = false;
  for (int64_t i = 0; i < n; ++i) {
    require(rows[static_cast<size_t>(i)].size() == cols, ErrorCode::ShapeMismatch,
            "stack_rows: row " + std::to_string(i) + " has shape " +
                shape_str(rows[static_cast<size_t>(i)].shape()));
    auto vals = rows[static_cast<size_t>(i)].values();
    std::copy(vals.begin(), vals.end(), node->value.begin() + i * cols);
    req = req || rows[static_cast<size_t>(i)].requires_grad();
  }
  if (req) {
    node->requires_grad = true;
    for (const auto& r : rows) node->parents.push_back(r.node());
    auto* self = node.get();
    node->backward_fn = [self, cols] {
      for (size_t i = 0; i < self->parents.size(); ++i) {
        auto& parent = *self->parents[i];
        if (!parent.requires_grad) continue;
        parent.ensure_grad();
        const T* g = self->grad.data() + static_cast<int64_t>(i) * cols;
        for (int64_t j = 0; j < cols; ++j) parent.grad[j] += g[j];
      }
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  auto node = detail::new_node<T>({1});
  T total = T(0);
  for (T v : x.values()) total += v;
  node->value[0] = total;
  detail::check_finite(*node, "sum");
  if (x.requires_grad()) {
    node->requires_grad = true;
    node->parents = {x.node()};
    auto* self = node.get();
    auto* xn = x.raw();
    node->backward_fn = [self, xn] {
      xn->ensure_grad();
      const T g = self->grad[0];
      for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> l2_norm(const Tensor<T>& x) {
  auto node = detail::new_node<T>({1});
  T total = T(0);
  for (T v : x.values()) total += v * v;
  node->value[0] = std::sqrt(total);
  detail::check_finite(*node, "l2_norm");
  if (x.requires_grad()) {
    node->requires_grad = true;
    node->parents = {x.node()};
    auto* self = node.get();
    auto* xn = x.raw();
    node->backward_fn = [self, xn] {
      const T norm = self->value[0];
      if (norm == T(0)) return;
      xn->ensure_grad();
      const T g = self->grad[0] / norm;
      for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g * xn->value[i];
    };
  }
  return Tensor<T>(node);
}

}  // namespace gatedformer

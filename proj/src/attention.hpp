#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "ops.hpp"

namespace gatedformer {

// Projection weights for one attention block. Full-width projections are
// applied first and the result is split into h contiguous head blocks of
// width d = dh/h. Relative mode additionally carries the per-head-width
// position projection and the global content/position bias vectors.
template <class T>
struct AttentionParams {
  Tensor<T> wq, wk, wv, wo;  // dh x dh
  Tensor<T> wkr;             // d x d, relative mode only
  Tensor<T> u, v;            // d, relative mode only

  bool relative() const { return wkr.defined(); }
};

// Layer-wise cache of previous-segment hidden states. Entries are stored
// detached: nothing backpropagates into memory.
template <class T>
struct SegmentMemory {
  int64_t mem_len = 0;
  std::vector<Tensor<T>> layers;  // each mem_len_current x dh, may be undefined (empty)

  int64_t current_rows(size_t layer) const {
    if (layer >= layers.size() || !layers[layer].defined()) return 0;
    return layers[layer].dim(0);
  }
};

// Sinusoid rows of the shared positional family: row k encodes positions[k],
// with sin on even columns and cos on odd columns.
template <class T>
Tensor<T> sinusoid_encoding(const std::vector<int64_t>& positions, int64_t dim) {
  require(dim % 2 == 0, ErrorCode::OddDimension,
          "sinusoidal encoding needs an even dimension, got " + std::to_string(dim));
  const int64_t rows = static_cast<int64_t>(positions.size());
  std::vector<T> data(static_cast<size_t>(rows * dim));
  for (int64_t r = 0; r < rows; ++r) {
    const double pos = static_cast<double>(positions[static_cast<size_t>(r)]);
    for (int64_t i = 0; i < dim / 2; ++i) {
      const double freq = std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(dim));
      data[static_cast<size_t>(r * dim + 2 * i)] = static_cast<T>(std::sin(pos / freq));
      data[static_cast<size_t>(r * dim + 2 * i + 1)] = static_cast<T>(std::cos(pos / freq));
    }
  }
  return Tensor<T>::from({rows, dim}, std::move(data));
}

// Absolute sinusoidal positional encoding for positions 0..len-1.
template <class T>
Tensor<T> absolute_pe(int64_t len, int64_t dh) {
  std::vector<int64_t> positions(static_cast<size_t>(len));
  for (int64_t p = 0; p < len; ++p) positions[static_cast<size_t>(p)] = p;
  return sinusoid_encoding<T>(positions, dh);
}

// Relative-distance encoding rows for xl_attention: distances mem_len+L-1
// down to 0, one row per distance (descending).
template <class T>
Tensor<T> relative_encoding(int64_t query_len, int64_t mem_len, int64_t dim) {
  std::vector<int64_t> distances(static_cast<size_t>(mem_len + query_len));
  for (int64_t r = 0; r < mem_len + query_len; ++r)
    distances[static_cast<size_t>(r)] = mem_len + query_len - 1 - r;
  return sinusoid_encoding<T>(distances, dim);
}

// Scaled dot-product attention for a single head under the causal mask.
// K and V may carry mem extra history rows in front of the L query rows.
template <class T>
Tensor<T> dpa(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  detail::require_2d(q, "dpa");
  detail::require_2d(k, "dpa");
  detail::require_2d(v, "dpa");
  require(k.dim(0) == v.dim(0), ErrorCode::ShapeMismatch,
          "dpa: key/value row counts differ, " + shape_str(k.shape()) + " vs " + shape_str(v.shape()));
  require(q.dim(1) == k.dim(1), ErrorCode::ShapeMismatch,
          "dpa: query/key widths differ, " + shape_str(q.shape()) + " vs " + shape_str(k.shape()));
  const int64_t mem = k.dim(0) - q.dim(0);
  require(mem >= 0, ErrorCode::ShapeMismatch, "dpa: fewer keys than queries");
  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(q.dim(1)));
  Tensor<T> logits = scale(matmul(q, transpose(k)), inv_sqrt_d);
  Tensor<T> probs = softmax(causal_mask(logits, mem), 1);
  return matmul(probs, v);
}

// Multi-head attention with keys/values drawn from x_kv (which is x itself
// for self-attention, or memory-prefixed input for recurrence).
template <class T>
Tensor<T> mhdpa_kv(const Tensor<T>& x_q, const Tensor<T>& x_kv, const AttentionParams<T>& p, int heads) {
  detail::require_2d(x_q, "mhdpa");
  const int64_t dh = x_q.dim(1);
  require(dh % heads == 0, ErrorCode::IndivisibleHeads,
          "model width " + std::to_string(dh) + " not divisible by " + std::to_string(heads) + " heads");
  require(x_kv.dim(1) == dh, ErrorCode::ShapeMismatch,
          "mhdpa: key/value source width " + shape_str(x_kv.shape()) + " != " + std::to_string(dh));
  const int64_t d = dh / heads;

  Tensor<T> q = matmul(x_q, p.wq);
  Tensor<T> k = matmul(x_kv, p.wk);
  Tensor<T> v = matmul(x_kv, p.wv);

  Tensor<T> heads_out;
  for (int h = 0; h < heads; ++h) {
    Tensor<T> head = dpa(slice_cols(q, h * d, d), slice_cols(k, h * d, d), slice_cols(v, h * d, d));
    heads_out = h == 0 ? head : concat(heads_out, head, 1);
  }
  return matmul(heads_out, p.wo);
}

template <class T>
Tensor<T> mhdpa(const Tensor<T>& x, const AttentionParams<T>& p, int heads) {
  return mhdpa_kv(x, x, p, heads);
}

// 1 x d view of a vector that shares gradients with it.
template <class T>
Tensor<T> reshape_vector_row(const Tensor<T>& vec) {
  require(vec.rank() == 1, ErrorCode::ShapeMismatch,
          "expected a vector, got " + shape_str(vec.shape()));
  auto node = detail::new_node<T>({1, vec.dim(0)});
  node->value = vec.to_vector();
  if (vec.requires_grad()) {
    node->requires_grad = true;
    node->parents = {vec.node()};
    auto* self = node.get();
    auto* vn = vec.raw();
    node->backward_fn = [self, vn] {
      vn->ensure_grad();
      for (size_t i = 0; i < self->grad.size(); ++i) vn->grad[i] += self->grad[i];
    };
  }
  return Tensor<T>(node);
}

// Treat a length-d vector as a 1 x d matrix and right-multiply: v^T * M.
template <class T>
Tensor<T> matmul_vec_row(const Tensor<T>& vec, const Tensor<T>& m) {
  require(vec.rank() == 1, ErrorCode::ShapeMismatch,
          "expected a vector, got " + shape_str(vec.shape()));
  return matmul(reshape_vector_row(vec), m);
}

// Raw relative attention scores for one head: content-content, content-
// position, global-content and global-position terms summed. `r` holds the
// sinusoid rows in descending-distance order; the caller scales and masks.
template <class T>
Tensor<T> relative_scores(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& r,
                          const Tensor<T>& wkr, const Tensor<T>& u, const Tensor<T>& v) {
  detail::require_2d(q, "relative_scores");
  detail::require_2d(k, "relative_scores");
  detail::require_2d(r, "relative_scores");
  const int64_t d = q.dim(1);
  require(k.dim(1) == d && r.dim(1) == d, ErrorCode::ShapeMismatch,
          "relative_scores: head widths differ, q " + shape_str(q.shape()) + " k " +
              shape_str(k.shape()) + " r " + shape_str(r.shape()));
  require(r.dim(0) == k.dim(0), ErrorCode::ShapeMismatch,
          "relative_scores: need one encoding row per key, got " + shape_str(r.shape()) + " for " +
              shape_str(k.shape()));
  require(wkr.rank() == 2 && wkr.dim(0) == d && wkr.dim(1) == d, ErrorCode::ShapeMismatch,
          "relative_scores: wkr " + shape_str(wkr.shape()) + " != " + std::to_string(d) + "x" +
              std::to_string(d));
  require(u.rank() == 1 && u.dim(0) == d && v.rank() == 1 && v.dim(0) == d, ErrorCode::ShapeMismatch,
          "relative_scores: u/v must be length-" + std::to_string(d) + " vectors");

  const int64_t query_len = q.dim(0);
  Tensor<T> kt = transpose(k);
  Tensor<T> rt_proj = transpose(matmul(wkr, transpose(r)));  // (L+M) x d rows of Wkr*R_r

  Tensor<T> a = matmul(q, kt);
  Tensor<T> b = rel_gather(matmul(q, transpose(rt_proj)));
  Tensor<T> c = broadcast_row(matmul_vec_row(u, kt), query_len);
  Tensor<T> dterm = rel_gather(broadcast_row(matmul_vec_row(v, transpose(rt_proj)), query_len));
  return add(add(a, b), add(c, dterm));
}

// Transformer-XL attention over one layer: queries from the current segment,
// keys/values from detached memory plus the current segment, scores from the
// relative decomposition, then causal-masked softmax and output projection.
template <class T>
Tensor<T> xl_attention(const Tensor<T>& x_cur, const Tensor<T>& mem, const AttentionParams<T>& p,
                       int heads) {
  detail::require_2d(x_cur, "xl_attention");
  const int64_t dh = x_cur.dim(1);
  require(dh % heads == 0, ErrorCode::IndivisibleHeads,
          "model width " + std::to_string(dh) + " not divisible by " + std::to_string(heads) + " heads");
  require(p.relative(), ErrorCode::InvalidArgument, "xl_attention requires relative-mode parameters");
  const int64_t d = dh / heads;
  const int64_t mem_rows = mem.defined() ? mem.dim(0) : 0;
  if (mem.defined()) {
    require(mem.dim(1) == dh, ErrorCode::ShapeMismatch,
            "memory width " + shape_str(mem.shape()) + " != model width " + std::to_string(dh));
  }

  Tensor<T> x_kv = mem_rows > 0 ? concat(mem, x_cur, 0) : x_cur;
  Tensor<T> q = matmul(x_cur, p.wq);
  Tensor<T> k = matmul(x_kv, p.wk);
  Tensor<T> v = matmul(x_kv, p.wv);
  Tensor<T> r = relative_encoding<T>(x_cur.dim(0), mem_rows, d);

  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(d));
  Tensor<T> heads_out;
  for (int h = 0; h < heads; ++h) {
    Tensor<T> scores = relative_scores(slice_cols(q, h * d, d), slice_cols(k, h * d, d), r, p.wkr,
                                       p.u, p.v);
    Tensor<T> probs = softmax(causal_mask(scale(scores, inv_sqrt_d), mem_rows), 1);
    Tensor<T> head = matmul(probs, slice_cols(v, h * d, d));
    heads_out = h == 0 ? head : concat(heads_out, head, 1);
  }
  return matmul(heads_out, p.wo);
}

// Slide the layer cache forward: keep the last mem_len rows of
// [old memory ; new hidden], detached from the graph.
template <class T>
Tensor<T> update_memory(const Tensor<T>& old_mem, const Tensor<T>& hidden, int64_t mem_len) {
  if (mem_len <= 0) return Tensor<T>();
  detail::require_2d(hidden, "update_memory");
  const int64_t cols = hidden.dim(1);
  std::vector<T> rows;
  if (old_mem.defined()) {
    require(old_mem.dim(1) == cols, ErrorCode::ShapeMismatch,
            "update_memory: width mismatch " + shape_str(old_mem.shape()) + " vs " +
                shape_str(hidden.shape()));
    rows.insert(rows.end(), old_mem.values().begin(), old_mem.values().end());
  }
  rows.insert(rows.end(), hidden.values().begin(), hidden.values().end());
  const int64_t total = static_cast<int64_t>(rows.size()) / cols;
  const int64_t keep = std::min(mem_len, total);
  std::vector<T> kept(rows.end() - keep * cols, rows.end());
  return Tensor<T>::from({keep, cols}, std::move(kept), false);
}

}  // namespace gatedformer

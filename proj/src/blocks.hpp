#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "attention.hpp"
#include "gating.hpp"
#include "rng.hpp"

namespace gatedformer {

enum class Variant { Vanilla, XL, RT };
enum class RnnCellKind { Gru, Lstm };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::Vanilla: return "vanilla";
    case Variant::XL: return "xl";
    case Variant::RT: return "rt";
  }
  return "vanilla";
}

// Which layers carry gates, and whether the FFN sublayer does too.
struct GatePlacement {
  GateKind kind = GateKind::None;
  std::set<int> layers;  // 1-based indices
  bool include_ffn = true;

  bool covers(int layer_1based) const {
    return kind != GateKind::None && layers.count(layer_1based) > 0;
  }
  bool covers_ffn(int layer_1based) const { return covers(layer_1based) && include_ffn; }
};

struct InitSpec {
  enum class Kind { Uniform, Gaussian };
  Kind kind = Kind::Uniform;
  double param = 0.1;  // half-range for uniform, sigma for gaussian
};

struct ModelConfig {
  Variant variant = Variant::Vanilla;
  int n_layers = 2;
  int64_t dh = 64;
  int heads = 4;
  int64_t d_ffn = 256;
  int64_t vocab_size = 0;
  int64_t mem_len = 0;                      // XL only
  int64_t local_window = 4;                 // RT only
  RnnCellKind rnn_cell = RnnCellKind::Gru;  // RT only
  double dropout_sublayer = 0.0;
  double dropout_embed = 0.0;
  GatePlacement gate;
  InitSpec init;

  std::vector<std::string> violations() const {
    std::vector<std::string> v;
    if (n_layers < 1) v.push_back("n_layers must be >= 1");
    if (dh < 1) v.push_back("dh must be >= 1");
    if (heads < 1) v.push_back("heads must be >= 1");
    if (dh >= 1 && heads >= 1 && dh % heads != 0)
      v.push_back("dh (" + std::to_string(dh) + ") must be divisible by heads (" +
                  std::to_string(heads) + ")");
    if (d_ffn < 1) v.push_back("d_ffn must be >= 1");
    if (vocab_size < 1) v.push_back("vocab_size must be >= 1");
    if (mem_len < 0) v.push_back("mem_len must be >= 0");
    if (variant == Variant::Vanilla && dh % 2 != 0)
      v.push_back("vanilla variant needs even dh for the sinusoidal encoding");
    if (variant == Variant::XL && heads >= 1 && dh % heads == 0 && (dh / heads) % 2 != 0)
      v.push_back("xl variant needs an even head width dh/heads for the relative encoding");
    if (variant == Variant::RT && local_window < 1) v.push_back("local_window must be >= 1");
    if (dropout_sublayer < 0.0 || dropout_sublayer >= 1.0)
      v.push_back("dropout_sublayer must be in [0,1)");
    if (dropout_embed < 0.0 || dropout_embed >= 1.0) v.push_back("dropout_embed must be in [0,1)");
    if (gate.kind == GateKind::None && !gate.layers.empty())
      v.push_back("gate_layers given but gate kind is none");
    if (gate.kind != GateKind::None && gate.layers.empty())
      v.push_back("gate kind set but gate_layers is empty");
    for (int layer : gate.layers) {
      if (layer < 1 || layer > n_layers)
        v.push_back("gate_layers index " + std::to_string(layer) + " outside 1.." +
                    std::to_string(n_layers));
    }
    return v;
  }
};

template <class T>
struct FfnParams {
  Tensor<T> w_in, b_in;    // dh x d_ffn, d_ffn
  Tensor<T> w_out, b_out;  // d_ffn x dh, dh
};

template <class T>
struct LayerNormParams {
  Tensor<T> gamma, beta;  // dh each
};

// Standard GRU (z, r, h) or LSTM (i, f, o, c) gate stacks: per gate an input
// weight, a recurrent weight and a bias.
template <class T>
struct RnnCellParams {
  RnnCellKind kind = RnnCellKind::Gru;
  std::vector<Tensor<T>> w;  // dh x dh per gate
  std::vector<Tensor<T>> u;  // dh x dh per gate
  std::vector<Tensor<T>> b;  // dh per gate

  int gates() const { return kind == RnnCellKind::Gru ? 3 : 4; }
};

template <class T>
struct RnnState {
  Tensor<T> h;
  Tensor<T> c;  // LSTM only
};

template <class T>
struct LayerParams {
  AttentionParams<T> att;
  FfnParams<T> ffn;
  LayerNormParams<T> ln_att, ln_ffn;
  std::optional<GateParams<T>> gate_att, gate_ffn;
  std::optional<RnnCellParams<T>> rnn;
};

template <class T>
struct Model {
  ModelConfig cfg;
  uint64_t seed = 0;
  Tensor<T> embedding;        // vocab x dh
  std::vector<LayerParams<T>> layers;
  Tensor<T> head_w, head_b;   // dh x vocab, vocab

  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    out.emplace_back("embedding", embedding);
    for (size_t i = 0; i < layers.size(); ++i) {
      const std::string prefix = "layers." + std::to_string(i) + ".";
      const LayerParams<T>& lp = layers[i];
      out.emplace_back(prefix + "att.wq", lp.att.wq);
      out.emplace_back(prefix + "att.wk", lp.att.wk);
      out.emplace_back(prefix + "att.wv", lp.att.wv);
      out.emplace_back(prefix + "att.wo", lp.att.wo);
      if (lp.att.relative()) {
        out.emplace_back(prefix + "att.wkr", lp.att.wkr);
        out.emplace_back(prefix + "att.u", lp.att.u);
        out.emplace_back(prefix + "att.v", lp.att.v);
      }
      out.emplace_back(prefix + "ffn.w_in", lp.ffn.w_in);
      out.emplace_back(prefix + "ffn.b_in", lp.ffn.b_in);
      out.emplace_back(prefix + "ffn.w_out", lp.ffn.w_out);
      out.emplace_back(prefix + "ffn.b_out", lp.ffn.b_out);
      out.emplace_back(prefix + "ln_att.gamma", lp.ln_att.gamma);
      out.emplace_back(prefix + "ln_att.beta", lp.ln_att.beta);
      out.emplace_back(prefix + "ln_ffn.gamma", lp.ln_ffn.gamma);
      out.emplace_back(prefix + "ln_ffn.beta", lp.ln_ffn.beta);
      if (lp.gate_att) {
        out.emplace_back(prefix + "gate_att.w1", lp.gate_att->w1);
        out.emplace_back(prefix + "gate_att.b1", lp.gate_att->b1);
        out.emplace_back(prefix + "gate_att.w2", lp.gate_att->w2);
        out.emplace_back(prefix + "gate_att.b2", lp.gate_att->b2);
      }
      if (lp.gate_ffn) {
        out.emplace_back(prefix + "gate_ffn.w1", lp.gate_ffn->w1);
        out.emplace_back(prefix + "gate_ffn.b1", lp.gate_ffn->b1);
        out.emplace_back(prefix + "gate_ffn.w2", lp.gate_ffn->w2);
        out.emplace_back(prefix + "gate_ffn.b2", lp.gate_ffn->b2);
      }
      if (lp.rnn) {
        for (int g = 0; g < lp.rnn->gates(); ++g) {
          out.emplace_back(prefix + "rnn.w" + std::to_string(g), lp.rnn->w[static_cast<size_t>(g)]);
          out.emplace_back(prefix + "rnn.u" + std::to_string(g), lp.rnn->u[static_cast<size_t>(g)]);
          out.emplace_back(prefix + "rnn.b" + std::to_string(g), lp.rnn->b[static_cast<size_t>(g)]);
        }
      }
    }
    out.emplace_back("head.w", head_w);
    out.emplace_back("head.b", head_b);
    return out;
  }

  void zero_grad() {
    for (auto& [name, t] : named_parameters()) t.zero_grad();
  }
};

// Position-wise feed-forward: FF(ReLU(FF(u))).
template <class T>
Tensor<T> ffn(const Tensor<T>& u, const FfnParams<T>& p) {
  Tensor<T> inner = relu(add_bias(matmul(u, p.w_in), p.b_in));
  return add_bias(matmul(inner, p.w_out), p.b_out);
}

// One recurrent step. Rows are independent, so a whole batch of window
// states can step together.
template <class T>
RnnState<T> rnn_cell_step(const RnnCellParams<T>& p, const RnnState<T>& state, const Tensor<T>& x) {
  auto gate_input = [&](int g) {
    return add_bias(add(matmul(x, p.w[static_cast<size_t>(g)]),
                        matmul(state.h, p.u[static_cast<size_t>(g)])),
                    p.b[static_cast<size_t>(g)]);
  };
  if (p.kind == RnnCellKind::Gru) {
    Tensor<T> z = sigmoid(gate_input(0));
    Tensor<T> r = sigmoid(gate_input(1));
    Tensor<T> cand = tanh_act(add_bias(
        add(matmul(x, p.w[2]), matmul(hadamard(r, state.h), p.u[2])), p.b[2]));
    Tensor<T> h = add(hadamard(affine(z, T(-1), T(1)), state.h), hadamard(z, cand));
    return {h, Tensor<T>()};
  }
  Tensor<T> i = sigmoid(gate_input(0));
  Tensor<T> f = sigmoid(gate_input(1));
  Tensor<T> o = sigmoid(gate_input(2));
  Tensor<T> cand = tanh_act(gate_input(3));
  Tensor<T> c = add(hadamard(f, state.c), hadamard(i, cand));
  Tensor<T> h = hadamard(o, tanh_act(c));
  return {h, c};
}

// Windowed recurrence: the output at position t is the final hidden state of
// running the cell over inputs [max(0, t-window+1) .. t] from a zero state.
// Windows are unrolled independently per position.
template <class T>
Tensor<T> local_rnn(const Tensor<T>& e, const RnnCellParams<T>& cell, int64_t window) {
  detail::require_2d(e, "local_rnn");
  require(window >= 1, ErrorCode::InvalidArgument, "local_rnn: window must be >= 1");
  const int64_t len = e.dim(0), dh = e.dim(1);
  std::vector<Tensor<T>> outputs;
  outputs.reserve(static_cast<size_t>(len));
  for (int64_t t = 0; t < len; ++t) {
    const int64_t begin = std::max<int64_t>(0, t - window + 1);
    RnnState<T> state{Tensor<T>::zeros({1, dh}), Tensor<T>::zeros({1, dh})};
    for (int64_t s = begin; s <= t; ++s) state = rnn_cell_step(cell, state, slice_rows(e, s, 1));
    outputs.push_back(state.h);
  }
  return stack_rows(outputs);
}

// Dropout site ids, stable across graph rebuilds.
namespace sites {
constexpr uint64_t kEmbed = 0;
inline uint64_t att_out(int layer) { return 1 + 4 * static_cast<uint64_t>(layer); }
inline uint64_t ffn_out(int layer) { return 2 + 4 * static_cast<uint64_t>(layer); }
inline uint64_t sdu_att(int layer) { return 3 + 4 * static_cast<uint64_t>(layer); }
inline uint64_t sdu_ffn(int layer) { return 4 + 4 * static_cast<uint64_t>(layer); }
}  // namespace sites

struct ForwardCtx {
  bool train = false;
  uint64_t seed = 0;
  uint64_t step = 0;
};

namespace detail {

template <class T>
Tensor<T> attention_for_layer(const ModelConfig& cfg, const LayerParams<T>& lp, const Tensor<T>& x,
                              const Tensor<T>& mem) {
  if (cfg.variant == Variant::XL) return xl_attention(x, mem, lp.att, cfg.heads);
  return mhdpa(x, lp.att, cfg.heads);
}

template <class T>
Tensor<T> attention_sublayer(const ModelConfig& cfg, const LayerParams<T>& lp, int layer_index,
                             const Tensor<T>& x, const Tensor<T>& mem, const ForwardCtx& ctx,
                             GateKind kind) {
  Tensor<T> att = attention_for_layer(cfg, lp, x, mem);
  att = dropout(att, cfg.dropout_sublayer, ctx.train,
                {ctx.seed, sites::att_out(layer_index), ctx.step});
  switch (kind) {
    case GateKind::None:
      return layer_norm(add(x, att), lp.ln_att.gamma, lp.ln_att.beta);
    case GateKind::SduSigmoid:
    case GateKind::SduTanh: {
      Tensor<T> branch = sdu(x, *lp.gate_att,
                             kind == GateKind::SduTanh ? GateFn::Tanh : GateFn::Sigmoid);
      branch = dropout(branch, cfg.dropout_sublayer, ctx.train,
                       {ctx.seed, sites::sdu_att(layer_index), ctx.step});
      return layer_norm(add(add(x, att), branch), lp.ln_att.gamma, lp.ln_att.beta);
    }
    case GateKind::HighwayGate:
      return layer_norm(add(highway_gate(x, *lp.gate_att), att), lp.ln_att.gamma, lp.ln_att.beta);
    case GateKind::GatedMhdpa:
      return layer_norm(add(gated_mhdpa_combine(att, x, *lp.gate_att), x), lp.ln_att.gamma,
                        lp.ln_att.beta);
  }
  fail(ErrorCode::InvalidPlacement, "unknown gate kind");
}

template <class T>
Tensor<T> ffn_sublayer(const ModelConfig& cfg, const LayerParams<T>& lp, int layer_index,
                       const Tensor<T>& u, const ForwardCtx& ctx, bool gate_ffn, GateKind kind) {
  Tensor<T> f = dropout(ffn(u, lp.ffn), cfg.dropout_sublayer, ctx.train,
                        {ctx.seed, sites::ffn_out(layer_index), ctx.step});
  if (!gate_ffn) return layer_norm(add(u, f), lp.ln_ffn.gamma, lp.ln_ffn.beta);
  // Highway and gated-MHDPA variants restructure only the attention side;
  // their FFN sublayer keeps a plain sigmoid SDU branch.
  Tensor<T> branch = sdu(u, *lp.gate_ffn, kind == GateKind::SduTanh ? GateFn::Tanh : GateFn::Sigmoid);
  branch = dropout(branch, cfg.dropout_sublayer, ctx.train,
                   {ctx.seed, sites::sdu_ffn(layer_index), ctx.step});
  return layer_norm(add(add(u, f), branch), lp.ln_ffn.gamma, lp.ln_ffn.beta);
}

}  // namespace detail

// Post-LN block without gates: U = LN(X + Att), O = LN(U + FFN(U)).
template <class T>
Tensor<T> transformer_layer(const ModelConfig& cfg, const LayerParams<T>& lp, int layer_index,
                            const Tensor<T>& x, const Tensor<T>& mem = {}, ForwardCtx ctx = {}) {
  Tensor<T> u = detail::attention_sublayer(cfg, lp, layer_index, x, mem, ctx, GateKind::None);
  return detail::ffn_sublayer(cfg, lp, layer_index, u, ctx, false, GateKind::None);
}

// Gate-augmented block per the configured kind and placement flags.
template <class T>
Tensor<T> gated_transformer_layer(const ModelConfig& cfg, const LayerParams<T>& lp, int layer_index,
                                  const Tensor<T>& x, const Tensor<T>& mem = {}, ForwardCtx ctx = {}) {
  require(cfg.gate.kind != GateKind::None, ErrorCode::InvalidPlacement,
          "gated_transformer_layer called with gate kind none");
  Tensor<T> u = detail::attention_sublayer(cfg, lp, layer_index, x, mem, ctx, cfg.gate.kind);
  return detail::ffn_sublayer(cfg, lp, layer_index, u, ctx, cfg.gate.include_ffn, cfg.gate.kind);
}

template <class T>
Model<T> build_model(const ModelConfig& cfg, uint64_t seed) {
  const auto violations = cfg.violations();
  if (!violations.empty()) {
    std::string msg;
    for (size_t i = 0; i < violations.size(); ++i) {
      if (i) msg += "; ";
      msg += violations[i];
    }
    fail(ErrorCode::ConfigError, msg);
  }

  Model<T> m;
  m.cfg = cfg;
  m.seed = seed;

  InitRng base(seed);
  auto draw = [&](InitRng& r) {
    return cfg.init.kind == InitSpec::Kind::Uniform
               ? static_cast<T>(r.uniform(-cfg.init.param, cfg.init.param))
               : static_cast<T>(r.gaussian(cfg.init.param));
  };
  auto weight = [&](InitRng& r, Shape shape) {
    std::vector<T> data(static_cast<size_t>(shape_numel(shape)));
    for (T& v : data) v = draw(r);
    return Tensor<T>::from(std::move(shape), std::move(data), true);
  };
  auto zeros = [&](Shape shape) { return Tensor<T>::zeros(std::move(shape), true); };
  auto ones = [&](Shape shape) { return Tensor<T>::filled(std::move(shape), T(1), true); };

  const int64_t dh = cfg.dh;
  const int64_t d = dh / cfg.heads;
  m.embedding = weight(base, {cfg.vocab_size, dh});

  for (int li = 0; li < cfg.n_layers; ++li) {
    LayerParams<T> lp;
    lp.att.wq = weight(base, {dh, dh});
    lp.att.wk = weight(base, {dh, dh});
    lp.att.wv = weight(base, {dh, dh});
    lp.att.wo = weight(base, {dh, dh});
    if (cfg.variant == Variant::XL) {
      lp.att.wkr = weight(base, {d, d});
      lp.att.u = weight(base, {d});
      lp.att.v = weight(base, {d});
    }
    lp.ffn.w_in = weight(base, {dh, cfg.d_ffn});
    lp.ffn.b_in = zeros({cfg.d_ffn});
    lp.ffn.w_out = weight(base, {cfg.d_ffn, dh});
    lp.ffn.b_out = zeros({dh});
    lp.ln_att = {ones({dh}), zeros({dh})};
    lp.ln_ffn = {ones({dh}), zeros({dh})};
    if (cfg.variant == Variant::RT) {
      RnnCellParams<T> cell;
      cell.kind = cfg.rnn_cell;
      for (int g = 0; g < cell.gates(); ++g) {
        cell.w.push_back(weight(base, {dh, dh}));
        cell.u.push_back(weight(base, {dh, dh}));
        cell.b.push_back(zeros({dh}));
      }
      lp.rnn = std::move(cell);
    }
    // Gate weights come from their own per-sublayer streams so that gate
    // placement never perturbs the base parameter draws.
    if (cfg.gate.covers(li + 1)) {
      InitRng gate_rng(rng::hash4(seed, 0x67617465ULL, static_cast<uint64_t>(li), 0));
      lp.gate_att = GateParams<T>{weight(gate_rng, {dh, dh}), zeros({dh}),
                                  weight(gate_rng, {dh, dh}), zeros({dh})};
    }
    if (cfg.gate.covers_ffn(li + 1)) {
      InitRng gate_rng(rng::hash4(seed, 0x67617465ULL, static_cast<uint64_t>(li), 1));
      lp.gate_ffn = GateParams<T>{weight(gate_rng, {dh, dh}), zeros({dh}),
                                  weight(gate_rng, {dh, dh}), zeros({dh})};
    }
    m.layers.push_back(std::move(lp));
  }
  m.head_w = weight(base, {dh, cfg.vocab_size});
  m.head_b = zeros({cfg.vocab_size});
  return m;
}

// Forward one token stream. For XL, `mem` supplies per-layer history and is
// advanced in place (detached) when `advance_memory` is set.
template <class T>
Tensor<T> forward_stream(const Model<T>& m, const std::vector<int32_t>& tokens,
                         SegmentMemory<T>* mem, const ForwardCtx& ctx, bool advance_memory = true) {
  const ModelConfig& cfg = m.cfg;
  const bool xl = cfg.variant == Variant::XL;
  if (xl) {
    require(mem != nullptr, ErrorCode::InvalidArgument, "xl forward needs a SegmentMemory");
    if (mem->layers.size() != static_cast<size_t>(cfg.n_layers))
      mem->layers.assign(static_cast<size_t>(cfg.n_layers), Tensor<T>());
  }

  Tensor<T> x = embedding_lookup(m.embedding, tokens);
  if (cfg.variant == Variant::Vanilla)
    x = add(x, absolute_pe<T>(x.dim(0), cfg.dh));
  x = dropout(x, cfg.dropout_embed, ctx.train, {ctx.seed, sites::kEmbed, ctx.step});

  std::vector<Tensor<T>> layer_inputs;
  if (xl) layer_inputs.reserve(static_cast<size_t>(cfg.n_layers));

  for (int li = 0; li < cfg.n_layers; ++li) {
    if (xl) layer_inputs.push_back(x);
    const LayerParams<T>& lp = m.layers[static_cast<size_t>(li)];
    Tensor<T> rnn_x = cfg.variant == Variant::RT ? local_rnn(x, *lp.rnn, cfg.local_window) : x;
    Tensor<T> mem_slice = xl ? mem->layers[static_cast<size_t>(li)] : Tensor<T>();
    x = cfg.gate.covers(li + 1) ? gated_transformer_layer(cfg, lp, li, rnn_x, mem_slice, ctx)
                                : transformer_layer(cfg, lp, li, rnn_x, mem_slice, ctx);
  }

  if (xl && advance_memory) {
    for (int li = 0; li < cfg.n_layers; ++li) {
      mem->layers[static_cast<size_t>(li)] = update_memory(
          mem->layers[static_cast<size_t>(li)], layer_inputs[static_cast<size_t>(li)], cfg.mem_len);
    }
    mem->mem_len = cfg.mem_len;
  }

  return add_bias(matmul(x, m.head_w), m.head_b);
}

// Batched LM forward: one logits tensor per stream; XL memories advance
// stream-wise.
template <class T>
std::vector<Tensor<T>> forward_lm(const Model<T>& m,
                                  const std::vector<std::vector<int32_t>>& token_streams,
                                  std::vector<SegmentMemory<T>>* mems = nullptr,
                                  const ForwardCtx& ctx = {}) {
  const bool xl = m.cfg.variant == Variant::XL;
  if (xl) {
    require(mems != nullptr, ErrorCode::InvalidArgument, "xl forward needs per-stream memories");
    if (mems->size() != token_streams.size()) mems->assign(token_streams.size(), SegmentMemory<T>{});
  }
  std::vector<Tensor<T>> logits;
  logits.reserve(token_streams.size());
  for (size_t s = 0; s < token_streams.size(); ++s) {
    SegmentMemory<T>* mem = xl ? &(*mems)[s] : nullptr;
    logits.push_back(forward_stream(m, token_streams[s], mem, ctx));
  }
  return logits;
}

struct ParamCountTable {
  std::vector<std::pair<std::string, int64_t>> rows;
  int64_t total = 0;
};

template <class T>
ParamCountTable count_parameters(const Model<T>& m) {
  ParamCountTable table;
  auto add_row = [&](const std::string& name, int64_t count) {
    table.rows.emplace_back(name, count);
    table.total += count;
  };
  add_row("embedding", m.embedding.size());
  for (size_t i = 0; i < m.layers.size(); ++i) {
    const LayerParams<T>& lp = m.layers[i];
    const std::string prefix = "layers." + std::to_string(i) + ".";
    int64_t att = lp.att.wq.size() + lp.att.wk.size() + lp.att.wv.size() + lp.att.wo.size();
    if (lp.att.relative()) att += lp.att.wkr.size() + lp.att.u.size() + lp.att.v.size();
    add_row(prefix + "attention", att);
    add_row(prefix + "ffn",
            lp.ffn.w_in.size() + lp.ffn.b_in.size() + lp.ffn.w_out.size() + lp.ffn.b_out.size());
    add_row(prefix + "layer_norm", lp.ln_att.gamma.size() + lp.ln_att.beta.size() +
                                       lp.ln_ffn.gamma.size() + lp.ln_ffn.beta.size());
    if (lp.rnn) {
      int64_t rnn = 0;
      for (int g = 0; g < lp.rnn->gates(); ++g)
        rnn += lp.rnn->w[static_cast<size_t>(g)].size() + lp.rnn->u[static_cast<size_t>(g)].size() +
               lp.rnn->b[static_cast<size_t>(g)].size();
      add_row(prefix + "local_rnn", rnn);
    }
    int64_t gates = 0;
    for (const auto& gp : {lp.gate_att, lp.gate_ffn}) {
      if (gp) gates += gp->w1.size() + gp->b1.size() + gp->w2.size() + gp->b2.size();
    }
    if (gates > 0) add_row(prefix + "gates", gates);
  }
  add_row("output_head", m.head_w.size() + m.head_b.size());
  return table;
}

}  // namespace gatedformer

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "blocks.hpp"
#include "trainer.hpp"

namespace gatedformer {

struct GradcheckCase {
  std::string name;
  double max_rel_err = 0.0;
};

namespace gradcheck_detail {

inline Tensor<double> random_tensor(Shape shape, uint64_t key, bool requires_grad = true,
                                    double lo = -2.0, double hi = 2.0) {
  InitRng rng(rng::hash4(0x6f7261636c65ULL, key, static_cast<uint64_t>(shape_numel(shape)), 17));
  std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
  for (double& v : data) v = rng.uniform(lo, hi);
  return Tensor<double>::from(std::move(shape), std::move(data), requires_grad);
}

// Fixed pseudo-random projection makes the scalar sensitive to every output
// entry, including asymmetric backward mistakes.
inline Tensor<double> project(const Tensor<double>& t, uint64_t key) {
  Tensor<double> w = random_tensor(t.shape(), key ^ 0x77ULL, false, -1.0, 1.0);
  return sum(hadamard(t, w));
}

// Gradients checked against central differences for every leaf, reusing one
// analytic backward pass across leaves. A coordinate that fails at the
// primary step width is retried on a small ladder of widths and scored by
// its best stencil: rounding noise and ReLU-kink crossings are artifacts of
// one particular h, while a wrong backward rule fails at every h.
inline double check_leaves(const std::function<Tensor<double>()>& fn,
                           std::vector<Tensor<double>> leaves, double h = 1e-5) {
  Tensor<double> first = fn();
  Tensor<double> second = fn();
  require(first.values()[0] == second.values()[0], ErrorCode::NondeterministicFunction,
          "gradcheck function is not deterministic");
  for (auto& leaf : leaves) leaf.zero_grad();
  backward(second);

  double max_rel = 0.0;
  for (auto& leaf : leaves) {
    if (!leaf.requires_grad()) continue;
    std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());
    auto vals = leaf.values_mut();
    for (size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      auto stencil_err = [&](double step) {
        vals[i] = orig + step;
        const double fp = fn().values()[0];
        vals[i] = orig - step;
        const double fm = fn().values()[0];
        vals[i] = orig;
        const double numeric = (fp - fm) / (2.0 * step);
        return std::abs(analytic[i] - numeric) / std::max(1e-8, std::abs(numeric));
      };
      double rel = stencil_err(h);
      for (double retry : {h / 8, h * 4, h / 64, h * 10}) {
        if (rel <= 1e-6) break;
        rel = std::min(rel, stencil_err(retry));
      }
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

// Keep ReLU-style kinks away from the finite-difference stencil.
inline Tensor<double> random_tensor_off_kink(Shape shape, uint64_t key) {
  Tensor<double> t = random_tensor(std::move(shape), key);
  for (double& v : t.values_mut()) {
    if (std::abs(v) < 0.05) v += v < 0 ? -0.1 : 0.1;
  }
  return t;
}

// A deliberately wrong backward rule (detector sanity fixture): forward is
// x^2 but the recorded gradient uses 3x.
inline Tensor<double> corrupted_square(const Tensor<double>& x) {
  auto node = detail::new_node<double>(x.shape());
  for (int64_t i = 0; i < x.size(); ++i) node->value[i] = x.values()[i] * x.values()[i];
  node->requires_grad = x.requires_grad();
  if (node->requires_grad) {
    node->parents = {x.node()};
    auto* self = node.get();
    auto* xn = x.raw();
    node->backward_fn = [self, xn] {
      xn->ensure_grad();
      for (size_t i = 0; i < self->grad.size(); ++i)
        xn->grad[i] += 3.0 * xn->value[i] * self->grad[i];
    };
  }
  return Tensor<double>(node);
}

}  // namespace gradcheck_detail

// Finite-difference checks for every differentiable op.
inline std::vector<GradcheckCase> gradcheck_ops() {
  using namespace gradcheck_detail;
  std::vector<GradcheckCase> cases;
  auto run = [&](const std::string& name, const std::function<Tensor<double>()>& fn,
                 std::vector<Tensor<double>> leaves) {
    cases.push_back({name, check_leaves(fn, std::move(leaves))});
  };

  {
    auto a = random_tensor({3, 4}, 1);
    auto b = random_tensor({4, 2}, 2);
    run("op.matmul", [=] { return project(matmul(a, b), 3); }, {a, b});
  }
  {
    auto a = random_tensor({3, 4}, 4);
    run("op.transpose", [=] { return project(transpose(a), 5); }, {a});
  }
  {
    auto a = random_tensor({2, 5}, 6);
    auto b = random_tensor({2, 5}, 7);
    run("op.add", [=] { return project(add(a, b), 8); }, {a, b});
    run("op.sub", [=] { return project(sub(a, b), 9); }, {a, b});
    run("op.hadamard", [=] { return project(hadamard(a, b), 10); }, {a, b});
  }
  {
    auto a = random_tensor({4, 3}, 11);
    run("op.affine", [=] { return project(affine(a, 1.7, -0.3), 12); }, {a});
  }
  {
    auto x = random_tensor({3, 4}, 13);
    auto b = random_tensor({4}, 14);
    run("op.add_bias", [=] { return project(add_bias(x, b), 15); }, {x, b});
  }
  {
    auto v = random_tensor({5}, 16);
    run("op.broadcast_row", [=] { return project(broadcast_row(v, 3), 17); }, {v});
  }
  {
    auto a = random_tensor({2, 3}, 18);
    auto b = random_tensor({4, 3}, 19);
    run("op.concat_rows", [=] { return project(concat(a, b, 0), 20); }, {a, b});
    auto c = random_tensor({2, 5}, 21);
    run("op.concat_cols", [=] { return project(concat(a, c, 1), 22); }, {a, c});
  }
  {
    auto a = random_tensor({5, 3}, 23);
    run("op.slice_rows", [=] { return project(slice_rows(a, 1, 3), 24); }, {a});
    run("op.slice_cols", [=] { return project(slice_cols(a, 1, 2), 25); }, {a});
  }
  {
    auto a = random_tensor({3, 4}, 26);
    run("op.sigmoid", [=] { return project(sigmoid(a), 27); }, {a});
    run("op.tanh", [=] { return project(tanh_act(a), 28); }, {a});
    auto r = random_tensor_off_kink({3, 4}, 29);
    run("op.relu", [=] { return project(relu(r), 30); }, {r});
  }
  {
    auto a = random_tensor({3, 5}, 31);
    run("op.softmax", [=] { return project(softmax(a, 1), 32); }, {a});
  }
  {
    auto a = random_tensor({3, 5}, 33);
    run("op.causal_mask", [=] { return project(softmax(causal_mask(a, 2), 1), 34); }, {a});
  }
  {
    auto a = random_tensor({3, 5}, 35);
    run("op.rel_gather", [=] { return project(rel_gather(a), 36); }, {a});
  }
  {
    auto x = random_tensor({3, 6}, 37);
    auto g = random_tensor({6}, 38);
    auto b = random_tensor({6}, 39);
    run("op.layer_norm", [=] { return project(layer_norm(x, g, b), 40); }, {x, g, b});
  }
  {
    auto table = random_tensor({7, 4}, 41);
    const std::vector<int32_t> ids{1, 3, 3, 6, 0};
    run("op.embedding_lookup", [=] { return project(embedding_lookup(table, ids), 42); }, {table});
  }
  {
    auto logits = random_tensor({4, 6}, 43);
    const std::vector<int32_t> targets{2, 0, 5, 1};
    run("op.cross_entropy", [=] { return cross_entropy_from_logits(logits, targets); }, {logits});
  }
  {
    auto x = random_tensor({4, 4}, 44);
    run("op.dropout",
        [=] { return project(dropout(x, 0.4, true, DropoutKey{7, 3, 11}), 45); }, {x});
  }
  {
    auto x = random_tensor({3, 3}, 46);
    run("op.sum", [=] { return sum(x); }, {x});
    run("op.l2_norm", [=] { return l2_norm(x); }, {x});
  }
  {
    auto rows0 = random_tensor({1, 4}, 47);
    auto rows1 = random_tensor({1, 4}, 48);
    run("op.stack_rows",
        [=] { return project(stack_rows(std::vector<Tensor<double>>{rows0, rows1}), 49); },
        {rows0, rows1});
  }
  return cases;
}

// Whole-model loss gradients for every variant x gate kind combination at
// tiny dimensions, double precision, dropout off.
inline std::vector<GradcheckCase> gradcheck_models(int64_t dh = 8, int heads = 2, int64_t seq = 5,
                                                   int64_t vocab = 11, int n_layers = 2) {
  using namespace gradcheck_detail;
  std::vector<GradcheckCase> cases;
  const Variant variants[] = {Variant::Vanilla, Variant::XL, Variant::RT};
  const GateKind kinds[] = {GateKind::None, GateKind::SduSigmoid, GateKind::SduTanh,
                            GateKind::HighwayGate, GateKind::GatedMhdpa};

  std::vector<int32_t> tokens(static_cast<size_t>(seq));
  std::vector<int32_t> targets(static_cast<size_t>(seq));
  InitRng data_rng(321);
  for (auto& t : tokens) t = static_cast<int32_t>(data_rng.next_u64() % static_cast<uint64_t>(vocab));
  for (auto& t : targets) t = static_cast<int32_t>(data_rng.next_u64() % static_cast<uint64_t>(vocab));

  for (Variant variant : variants) {
    for (GateKind kind : kinds) {
      ModelConfig cfg;
      cfg.variant = variant;
      cfg.n_layers = n_layers;
      cfg.dh = dh;
      cfg.heads = heads;
      cfg.d_ffn = 2 * dh;
      cfg.vocab_size = vocab;
      cfg.mem_len = variant == Variant::XL ? 3 : 0;
      cfg.local_window = 3;
      cfg.init = {InitSpec::Kind::Uniform, 0.2};
      cfg.gate.kind = kind;
      if (kind != GateKind::None) {
        for (int l = 1; l <= n_layers; ++l) cfg.gate.layers.insert(l);
        cfg.gate.include_ffn = true;
      }
      Model<double> model = build_model<double>(cfg, 97);

      // Prime a nonempty memory so XL checks the recurrence path too.
      SegmentMemory<double> base_mem;
      if (variant == Variant::XL) {
        ForwardCtx warm{false, model.seed, 0};
        forward_stream(model, tokens, &base_mem, warm);
      }

      auto fn = [&model, &tokens, &targets, &base_mem, variant]() {
        SegmentMemory<double> mem = base_mem;
        ForwardCtx ctx{false, model.seed, 1};
        Tensor<double> logits =
            forward_stream(model, tokens, variant == Variant::XL ? &mem : nullptr, ctx,
                           /*advance_memory=*/false);
        return cross_entropy_from_logits(logits, targets);
      };

      std::vector<Tensor<double>> leaves;
      for (auto& [name, t] : model.named_parameters()) leaves.push_back(t);
      const std::string name =
          std::string("model.") + variant_name(variant) + "." + gate_kind_name(kind);
      // h = 1e-4: deep compositions leave some true gradients near 1e-7,
      // where the 1e-5 stencil is dominated by evaluation rounding.
      cases.push_back({name, check_leaves(fn, std::move(leaves), 1e-4)});
    }
  }
  return cases;
}

// Informational stop-gradient case: the recorded gradient must be exactly 0
// while the numeric oracle sees 1. That divergence is the contract.
inline GradcheckCase gradcheck_stop_gradient() {
  using namespace gradcheck_detail;
  auto x = random_tensor({2, 3}, 50);
  auto fn = [=] { return sum(stop_gradient(x)); };
  Tensor<double> loss = fn();
  x.zero_grad();
  backward(loss);
  double max_analytic = 0.0;
  for (double g : x.grad()) max_analytic = std::max(max_analytic, std::abs(g));

  double max_numeric_dev = 0.0;  // deviation of the numeric slope from 1
  auto vals = x.values_mut();
  const double h = 1e-5;
  for (size_t i = 0; i < vals.size(); ++i) {
    const double orig = vals[i];
    vals[i] = orig + h;
    const double fp = fn().values()[0];
    vals[i] = orig - h;
    const double fm = fn().values()[0];
    vals[i] = orig;
    max_numeric_dev = std::max(max_numeric_dev, std::abs((fp - fm) / (2 * h) - 1.0));
  }
  // Reported error is how far the case sits from the expected divergence.
  return {"op.stop_gradient(expected-sg-divergence)", std::max(max_analytic, max_numeric_dev)};
}

inline std::vector<GradcheckCase> run_gradcheck_suite(bool inject_defect = false) {
  std::vector<GradcheckCase> cases = gradcheck_ops();
  cases.push_back(gradcheck_stop_gradient());
  auto models = gradcheck_models();
  cases.insert(cases.end(), models.begin(), models.end());
  if (inject_defect) {
    using namespace gradcheck_detail;
    auto x = random_tensor({3, 3}, 51);
    cases.push_back(
        {"fixture.corrupted_backward", check_leaves([=] { return sum(corrupted_square(x)); }, {x})});
  }
  return cases;
}

}  // namespace gatedformer

#pragma once

#include <cstdio>
#include <limits>
#include <string>

#include "blocks.hpp"

namespace gatedformer {

// One TSV row per gate instance: tag a<k> for the attention sublayer of
// layer k, b<k> for its FFN sublayer, then the dh gate-branch bias values at
// full round-trip precision.
template <class T>
std::string gate_bias_tsv(const Model<T>& model) {
  std::string out;
  char buf[64];
  auto append_row = [&](const std::string& tag, const Tensor<T>& b1) {
    out += tag;
    for (T v : b1.values()) {
      std::snprintf(buf, sizeof(buf), "%.*g", std::numeric_limits<T>::max_digits10,
                    static_cast<double>(v));
      out += '\t';
      out += buf;
    }
    out += '\n';
  };
  int rows = 0;
  for (size_t i = 0; i < model.layers.size(); ++i) {
    const auto& lp = model.layers[i];
    if (lp.gate_att) {
      append_row("a" + std::to_string(i + 1), lp.gate_att->b1);
      ++rows;
    }
    if (lp.gate_ffn) {
      append_row("b" + std::to_string(i + 1), lp.gate_ffn->b1);
      ++rows;
    }
  }
  require(rows > 0, ErrorCode::NoGates, "model has no gate instances to export");
  return out;
}

}  // namespace gatedformer

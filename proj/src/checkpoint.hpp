#pragma once

#include <cstdint>
#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "config.hpp"
#include "trainer.hpp"

namespace gatedformer {

// Wire format: magic "GFCK", u32 LE version, u32-length-prefixed canonical
// text (config echo plus a "[state]" section), u32 tensor count, then per
// tensor u16 name length + name, u8 rank, u32 LE dims, raw little-endian
// IEEE-754 payload, and a trailing CRC32 over all preceding bytes.
inline constexpr uint32_t kCheckpointVersion = 1;

struct RawTensorEntry {
  std::string name;
  std::vector<int64_t> dims;
  std::vector<unsigned char> payload;
};

struct RawCheckpoint {
  uint32_t version = kCheckpointVersion;
  std::string text;
  std::vector<RawTensorEntry> tensors;
};

void write_checkpoint_file(const std::string& path, const RawCheckpoint& ckpt);
RawCheckpoint read_checkpoint_file(const std::string& path);

struct CheckpointText {
  std::string config_text;
  std::map<std::string, std::string> state;
};

CheckpointText split_checkpoint_text(const std::string& text);
std::string join_checkpoint_text(const std::string& config_text,
                                 const std::map<std::string, std::string>& state);

namespace detail {

template <class T>
std::vector<unsigned char> tensor_payload(const Tensor<T>& t) {
  std::vector<unsigned char> bytes(t.size() * sizeof(T));
  std::memcpy(bytes.data(), t.values().data(), bytes.size());
  return bytes;
}

template <class T>
void fill_tensor(Tensor<T>& t, const RawTensorEntry& entry) {
  require(entry.payload.size() == static_cast<size_t>(t.size()) * sizeof(T),
          ErrorCode::ChecksumMismatch,
          "tensor '" + entry.name + "' payload size does not match its shape");
  std::memcpy(t.values_mut().data(), entry.payload.data(), entry.payload.size());
}

inline std::string format_full(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

template <class T>
RawCheckpoint make_checkpoint(const Model<T>& model, const TrainerState<T>& state,
                              const RunConfig& rc) {
  RawCheckpoint ckpt;
  std::map<std::string, std::string> sm;
  sm["step"] = std::to_string(state.step);
  sm["sgd_lr"] = detail::format_full(state.sgd.lr);
  sm["sgd_bad_evals"] = std::to_string(state.sgd.bad_evals);
  sm["sgd_best_valid_loss"] = detail::format_full(state.sgd.best_valid_loss);
  sm["adam_t"] = std::to_string(state.adam.t);
  ckpt.text = join_checkpoint_text(rc.echo(), sm);

  auto params = model.named_parameters();
  for (const auto& [name, t] : params)
    ckpt.tensors.push_back({name, t.shape(), detail::tensor_payload(t)});
  if (state.adam.t > 0) {
    for (size_t i = 0; i < params.size(); ++i) {
      const auto& [name, t] = params[i];
      std::vector<unsigned char> m(state.adam.m[i].size() * sizeof(T));
      std::memcpy(m.data(), state.adam.m[i].data(), m.size());
      std::vector<unsigned char> v(state.adam.v[i].size() * sizeof(T));
      std::memcpy(v.data(), state.adam.v[i].data(), v.size());
      ckpt.tensors.push_back({"opt.m." + name, t.shape(), std::move(m)});
      ckpt.tensors.push_back({"opt.v." + name, t.shape(), std::move(v)});
    }
  }
  return ckpt;
}

// Restore parameters and optimizer state into a model freshly built from the
// checkpoint's own config snapshot.
template <class T>
void restore_checkpoint(const RawCheckpoint& ckpt, Model<T>& model, TrainerState<T>& state) {
  const CheckpointText text = split_checkpoint_text(ckpt.text);
  std::map<std::string, const RawTensorEntry*> by_name;
  for (const auto& entry : ckpt.tensors) by_name[entry.name] = &entry;

  auto params = model.named_parameters();
  for (auto& [name, t] : params) {
    auto it = by_name.find(name);
    require(it != by_name.end(), ErrorCode::ChecksumMismatch,
            "checkpoint is missing tensor '" + name + "'");
    detail::fill_tensor(t, *it->second);
  }

  auto state_value = [&](const std::string& key) {
    auto it = text.state.find(key);
    require(it != text.state.end(), ErrorCode::ChecksumMismatch,
            "checkpoint is missing state key '" + key + "'");
    return it->second;
  };
  state.step = std::stoll(state_value("step"));
  state.sgd.lr = std::stod(state_value("sgd_lr"));
  state.sgd.bad_evals = std::stoi(state_value("sgd_bad_evals"));
  state.sgd.best_valid_loss = std::stod(state_value("sgd_best_valid_loss"));
  state.adam.t = std::stoll(state_value("adam_t"));
  if (state.adam.t > 0) {
    state.adam.ensure_shapes(params);
    for (size_t i = 0; i < params.size(); ++i) {
      for (const char* which : {"m", "v"}) {
        auto it = by_name.find(std::string("opt.") + which + "." + params[i].first);
        require(it != by_name.end(), ErrorCode::ChecksumMismatch,
                "checkpoint is missing optimizer moments for '" + params[i].first + "'");
        auto& dst = which[0] == 'm' ? state.adam.m[i] : state.adam.v[i];
        require(it->second->payload.size() == dst.size() * sizeof(T), ErrorCode::ChecksumMismatch,
                "optimizer moment size mismatch for '" + params[i].first + "'");
        std::memcpy(dst.data(), it->second->payload.data(), it->second->payload.size());
      }
    }
  }
}

}  // namespace gatedformer

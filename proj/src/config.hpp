#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "blocks.hpp"
#include "corpus.hpp"

namespace gatedformer {

enum class OptimizerKind { SgdAnneal, Adam };
enum class Precision { Single, Double };

// Textual layer-set syntax from ablation notation: `all`, `1-3`, `1,2,6`,
// with an optional `\ffn` suffix that clears the FFN placement.
struct GateLayerSpec {
  bool all = false;
  std::set<int> layers;
  bool clear_ffn = false;

  static GateLayerSpec parse(const std::string& text);
  std::string format() const;
  std::set<int> resolve(int n_layers) const;
};

// Fully resolved run configuration: defaults, then config file, then CLI
// overrides, later wins. `echo()` renders the canonical flat text that
// reproduces the run when fed back.
struct RunConfig {
  Variant variant = Variant::Vanilla;
  TokenLevel level = TokenLevel::Char;
  int n_layers = 2;
  int64_t dh = 64;
  int heads = 4;
  int64_t d_ffn = 256;
  int64_t vocab_size = 0;  // 0 = derive from the training split
  int64_t mem_len = 0;
  int64_t local_window = 4;
  RnnCellKind rnn_cell = RnnCellKind::Gru;
  double dropout_sublayer = 0.0;
  double dropout_embed = 0.0;
  GateKind gate = GateKind::None;
  GateLayerSpec gate_layers;
  bool gate_ffn = true;
  InitSpec init;
  bool init_explicit = false;
  Precision precision = Precision::Single;

  OptimizerKind optimizer = OptimizerKind::SgdAnneal;
  bool optimizer_explicit = false;
  double lr = 0.0;  // 0 = optimizer default
  double clip_norm = 0.15;
  double decay_factor = 0.25;
  int patience = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  int64_t batch_size = 8;
  int64_t seq_len = 32;
  int64_t max_steps = 200;
  int64_t epochs = 0;  // used when max_steps == 0
  int64_t eval_interval = 50;
  uint64_t seed = 42;
  bool timing_real = false;

  std::string train_path, valid_path, test_path;

  // Derived views.
  ModelConfig model_config() const;
  std::string echo() const;
};

using KeyValue = std::pair<std::string, std::string>;

// Parse `key = value` lines (blank lines and '#' comments allowed). Unknown
// keys are hard errors naming the key.
std::vector<KeyValue> parse_config_text(const std::string& text);
std::vector<KeyValue> read_config_file(const std::string& path);

RunConfig resolve_config(const std::vector<KeyValue>& file_values,
                         const std::vector<KeyValue>& overrides);

}  // namespace gatedformer

#include "config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace gatedformer {

namespace {

const std::vector<std::string>& known_keys() {
  // Canonical echo order.
  static const std::vector<std::string> keys = {
      "variant",       "level",         "n_layers",      "dh",
      "heads",         "d_ffn",         "vocab_size",    "mem_len",
      "local_window",  "rnn_cell",      "dropout_sublayer", "dropout_embed",
      "gate",          "gate_layers",   "gate_ffn",      "init",
      "precision",     "optimizer",     "lr",            "clip_norm",
      "decay_factor",  "patience",      "beta1",         "beta2",
      "eps",           "batch_size",    "seq_len",       "max_steps",
      "epochs",        "eval_interval", "seed",          "timing",
      "train_path",    "valid_path",    "test_path",
  };
  return keys;
}

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  size_t e = s.find_last_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value,
                            const std::string& expected) {
  fail(ErrorCode::ConfigError,
       "key " + key + ": invalid value '" + value + "' (expected " + expected + ")");
}

int64_t parse_int(const std::string& key, const std::string& value) {
  try {
    size_t pos = 0;
    const int64_t v = std::stoll(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    bad_value(key, value, "an integer");
  }
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    size_t pos = 0;
    const double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    bad_value(key, value, "a number");
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  bad_value(key, value, "true or false");
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

InitSpec parse_init(const std::string& value) {
  if (value == "paper-literal") return {InitSpec::Kind::Gaussian, 1.0};
  const size_t colon = value.find(':');
  if (colon != std::string::npos) {
    const std::string kind = value.substr(0, colon);
    const std::string param = value.substr(colon + 1);
    if (kind == "uniform") return {InitSpec::Kind::Uniform, parse_double("init", param)};
    if (kind == "gaussian") return {InitSpec::Kind::Gaussian, parse_double("init", param)};
  }
  bad_value("init", value, "uniform:A, gaussian:S, or paper-literal");
}

std::string format_init(const InitSpec& init) {
  return std::string(init.kind == InitSpec::Kind::Uniform ? "uniform:" : "gaussian:") +
         format_double(init.param);
}

}  // namespace

GateLayerSpec GateLayerSpec::parse(const std::string& text) {
  GateLayerSpec spec;
  std::string body = trim(text);
  for (const std::string suffix : {"\\ffn", "\\FFN"}) {
    if (body.size() >= suffix.size() && body.compare(body.size() - suffix.size(), suffix.size(), suffix) == 0) {
      spec.clear_ffn = true;
      body = trim(body.substr(0, body.size() - suffix.size()));
      break;
    }
  }
  if (body == "all") {
    spec.all = true;
    return spec;
  }
  require(!body.empty(), ErrorCode::ConfigError, "key gate_layers: empty layer set");
  std::stringstream ss(body);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    const size_t dash = item.find('-');
    if (dash != std::string::npos) {
      const int64_t lo = parse_int("gate_layers", trim(item.substr(0, dash)));
      const int64_t hi = parse_int("gate_layers", trim(item.substr(dash + 1)));
      require(lo >= 1 && hi >= lo, ErrorCode::ConfigError,
              "key gate_layers: bad range '" + item + "'");
      for (int64_t l = lo; l <= hi; ++l) spec.layers.insert(static_cast<int>(l));
    } else {
      const int64_t l = parse_int("gate_layers", item);
      require(l >= 1, ErrorCode::ConfigError, "key gate_layers: layer indices are 1-based");
      spec.layers.insert(static_cast<int>(l));
    }
  }
  require(!spec.layers.empty(), ErrorCode::ConfigError, "key gate_layers: empty layer set");
  return spec;
}

std::string GateLayerSpec::format() const {
  std::string out;
  if (all) {
    out = "all";
  } else {
    // Compress into sorted ranges.
    auto it = layers.begin();
    while (it != layers.end()) {
      int lo = *it, hi = *it;
      auto next = std::next(it);
      while (next != layers.end() && *next == hi + 1) {
        hi = *next;
        ++next;
      }
      if (!out.empty()) out += ',';
      out += std::to_string(lo);
      if (hi > lo) out += '-' + std::to_string(hi);
      it = next;
    }
  }
  if (clear_ffn) out += "\\ffn";
  return out;
}

std::set<int> GateLayerSpec::resolve(int n_layers) const {
  if (all) {
    std::set<int> s;
    for (int l = 1; l <= n_layers; ++l) s.insert(l);
    return s;
  }
  return layers;
}

std::vector<KeyValue> parse_config_text(const std::string& text) {
  std::vector<KeyValue> out;
  std::stringstream ss(text);
  std::string line;
  int line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    require(eq != std::string::npos, ErrorCode::ConfigError,
            "line " + std::to_string(line_no) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto& keys = known_keys();
    require(std::find(keys.begin(), keys.end(), key) != keys.end(), ErrorCode::ConfigError,
            "unknown key '" + key + "' on line " + std::to_string(line_no));
    out.emplace_back(key, value);
  }
  return out;
}

std::vector<KeyValue> read_config_file(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::IoError, "cannot open config file " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

RunConfig resolve_config(const std::vector<KeyValue>& file_values,
                         const std::vector<KeyValue>& overrides) {
  RunConfig cfg;
  bool gate_ffn_key = false;

  auto apply = [&](const std::string& key, const std::string& value) {
    if (key == "variant") {
      if (value == "vanilla") cfg.variant = Variant::Vanilla;
      else if (value == "xl") cfg.variant = Variant::XL;
      else if (value == "rt") cfg.variant = Variant::RT;
      else bad_value(key, value, "vanilla, xl, or rt");
    } else if (key == "level") {
      if (value == "char") cfg.level = TokenLevel::Char;
      else if (value == "word") cfg.level = TokenLevel::Word;
      else bad_value(key, value, "char or word");
    } else if (key == "n_layers") {
      cfg.n_layers = static_cast<int>(parse_int(key, value));
    } else if (key == "dh") {
      cfg.dh = parse_int(key, value);
    } else if (key == "heads") {
      cfg.heads = static_cast<int>(parse_int(key, value));
    } else if (key == "d_ffn") {
      cfg.d_ffn = parse_int(key, value);
    } else if (key == "vocab_size") {
      cfg.vocab_size = parse_int(key, value);
    } else if (key == "mem_len") {
      cfg.mem_len = parse_int(key, value);
    } else if (key == "local_window") {
      cfg.local_window = parse_int(key, value);
    } else if (key == "rnn_cell") {
      if (value == "gru") cfg.rnn_cell = RnnCellKind::Gru;
      else if (value == "lstm") cfg.rnn_cell = RnnCellKind::Lstm;
      else bad_value(key, value, "gru or lstm");
    } else if (key == "dropout_sublayer") {
      cfg.dropout_sublayer = parse_double(key, value);
    } else if (key == "dropout_embed") {
      cfg.dropout_embed = parse_double(key, value);
    } else if (key == "gate") {
      if (value == "none") cfg.gate = GateKind::None;
      else if (value == "sdu-sigmoid") cfg.gate = GateKind::SduSigmoid;
      else if (value == "sdu-tanh") cfg.gate = GateKind::SduTanh;
      else if (value == "highway") cfg.gate = GateKind::HighwayGate;
      else if (value == "gated-mhdpa") cfg.gate = GateKind::GatedMhdpa;
      else bad_value(key, value, "none, sdu-sigmoid, sdu-tanh, highway, or gated-mhdpa");
    } else if (key == "gate_layers") {
      cfg.gate_layers = GateLayerSpec::parse(value);
    } else if (key == "gate_ffn") {
      cfg.gate_ffn = parse_bool(key, value);
      gate_ffn_key = true;
    } else if (key == "init") {
      cfg.init = parse_init(value);
      cfg.init_explicit = true;
    } else if (key == "precision") {
      if (value == "single") cfg.precision = Precision::Single;
      else if (value == "double") cfg.precision = Precision::Double;
      else bad_value(key, value, "single or double");
    } else if (key == "optimizer") {
      if (value == "sgd") cfg.optimizer = OptimizerKind::SgdAnneal;
      else if (value == "adam") cfg.optimizer = OptimizerKind::Adam;
      else bad_value(key, value, "sgd or adam");
      cfg.optimizer_explicit = true;
    } else if (key == "lr") {
      cfg.lr = parse_double(key, value);
    } else if (key == "clip_norm") {
      cfg.clip_norm = parse_double(key, value);
    } else if (key == "decay_factor") {
      cfg.decay_factor = parse_double(key, value);
    } else if (key == "patience") {
      cfg.patience = static_cast<int>(parse_int(key, value));
    } else if (key == "beta1") {
      cfg.beta1 = parse_double(key, value);
    } else if (key == "beta2") {
      cfg.beta2 = parse_double(key, value);
    } else if (key == "eps") {
      cfg.adam_eps = parse_double(key, value);
    } else if (key == "batch_size") {
      cfg.batch_size = parse_int(key, value);
    } else if (key == "seq_len") {
      cfg.seq_len = parse_int(key, value);
    } else if (key == "max_steps") {
      cfg.max_steps = parse_int(key, value);
    } else if (key == "epochs") {
      cfg.epochs = parse_int(key, value);
    } else if (key == "eval_interval") {
      cfg.eval_interval = parse_int(key, value);
    } else if (key == "seed") {
      cfg.seed = static_cast<uint64_t>(parse_int(key, value));
    } else if (key == "timing") {
      if (value == "off") cfg.timing_real = false;
      else if (value == "real") cfg.timing_real = true;
      else bad_value(key, value, "off or real");
    } else if (key == "train_path") {
      cfg.train_path = value;
    } else if (key == "valid_path") {
      cfg.valid_path = value;
    } else if (key == "test_path") {
      cfg.test_path = value;
    } else {
      fail(ErrorCode::ConfigError, "unknown key '" + key + "'");
    }
  };

  for (const auto& [k, v] : file_values) apply(k, v);
  for (const auto& [k, v] : overrides) apply(k, v);

  // Variant-dependent defaults for anything not set explicitly.
  if (!cfg.optimizer_explicit)
    cfg.optimizer = cfg.variant == Variant::XL ? OptimizerKind::Adam : OptimizerKind::SgdAnneal;
  if (cfg.lr == 0.0) cfg.lr = cfg.optimizer == OptimizerKind::Adam ? 0.00025 : 2.0;
  if (!cfg.init_explicit) {
    if (cfg.variant == Variant::XL) {
      cfg.init = {InitSpec::Kind::Gaussian, 0.02};
    } else {
      cfg.init = {InitSpec::Kind::Uniform, cfg.level == TokenLevel::Word ? 0.01 : 0.1};
    }
    cfg.init_explicit = true;
  }
  if (cfg.gate != GateKind::None && !cfg.gate_layers.all && cfg.gate_layers.layers.empty())
    cfg.gate_layers.all = true;
  if (cfg.gate_layers.clear_ffn) {
    cfg.gate_ffn = false;
    cfg.gate_layers.clear_ffn = false;
  }
  (void)gate_ffn_key;
  return cfg;
}

ModelConfig RunConfig::model_config() const {
  ModelConfig mc;
  mc.variant = variant;
  mc.n_layers = n_layers;
  mc.dh = dh;
  mc.heads = heads;
  mc.d_ffn = d_ffn;
  mc.vocab_size = vocab_size;
  mc.mem_len = mem_len;
  mc.local_window = local_window;
  mc.rnn_cell = rnn_cell;
  mc.dropout_sublayer = dropout_sublayer;
  mc.dropout_embed = dropout_embed;
  mc.gate.kind = gate;
  mc.gate.layers = gate == GateKind::None ? std::set<int>{} : gate_layers.resolve(n_layers);
  mc.gate.include_ffn = gate_ffn;
  mc.init = init;
  return mc;
}

std::string RunConfig::echo() const {
  std::ostringstream os;
  auto line = [&](const std::string& key, const std::string& value) {
    os << key << " = " << value << '\n';
  };
  line("variant", variant_name(variant));
  line("level", token_level_name(level));
  line("n_layers", std::to_string(n_layers));
  line("dh", std::to_string(dh));
  line("heads", std::to_string(heads));
  line("d_ffn", std::to_string(d_ffn));
  line("vocab_size", std::to_string(vocab_size));
  line("mem_len", std::to_string(mem_len));
  line("local_window", std::to_string(local_window));
  line("rnn_cell", rnn_cell == RnnCellKind::Gru ? "gru" : "lstm");
  line("dropout_sublayer", format_double(dropout_sublayer));
  line("dropout_embed", format_double(dropout_embed));
  line("gate", gate_kind_name(gate));
  line("gate_layers", gate == GateKind::None ? "all" : gate_layers.format());
  line("gate_ffn", gate_ffn ? "true" : "false");
  line("init", format_init(init));
  line("precision", precision == Precision::Single ? "single" : "double");
  line("optimizer", optimizer == OptimizerKind::SgdAnneal ? "sgd" : "adam");
  line("lr", format_double(lr));
  line("clip_norm", format_double(clip_norm));
  line("decay_factor", format_double(decay_factor));
  line("patience", std::to_string(patience));
  line("beta1", format_double(beta1));
  line("beta2", format_double(beta2));
  line("eps", format_double(adam_eps));
  line("batch_size", std::to_string(batch_size));
  line("seq_len", std::to_string(seq_len));
  line("max_steps", std::to_string(max_steps));
  line("epochs", std::to_string(epochs));
  line("eval_interval", std::to_string(eval_interval));
  line("seed", std::to_string(seed));
  line("timing", timing_real ? "real" : "off");
  line("train_path", train_path);
  line("valid_path", valid_path);
  line("test_path", test_path);
  return os.str();
}

}  // namespace gatedformer

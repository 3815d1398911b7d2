// Command-line front end over the gatedformer C API.
//
// Exit codes: 0 success, 1 config/IO error, 2 diverged loss, 3 gradient
// check failure.

#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gatedformer/gatedformer.h"

namespace {

void print_line(const char* line, void*) { std::printf("%s\n", line); }

int exit_code_for(gf_status status) {
  if (status == GF_OK) return 0;
  if (status == GF_ERR_DIVERGED_LOSS) return 2;
  if (status == GF_ERR_GRADCHECK_FAILED) return 3;
  return 1;
}

int finish(gf_status status) {
  if (status != GF_OK) {
    std::fprintf(stderr, "error (%s): %s\n", gf_status_name(status), gf_last_error());
  }
  return exit_code_for(status);
}

struct ConfigHandle {
  gf_config* ptr = gf_config_create();
  ~ConfigHandle() { gf_config_destroy(ptr); }
};

// Flags shared by train and compare; applied as config overrides in flag
// order so the command line wins over the file.
struct ConfigFlags {
  std::string config_path;
  std::vector<std::string> sets;
  std::string seed, precision, gate, gate_layers, gate_ffn;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "run configuration file (key = value lines)");
    cmd->add_option("--set", sets, "override a config key, e.g. --set lr=0.5")->take_all();
    cmd->add_option("--seed", seed, "RNG seed");
    cmd->add_option("--precision", precision, "single or double");
    cmd->add_option("--gate", gate, "none, sdu-sigmoid, sdu-tanh, highway, or gated-mhdpa");
    cmd->add_option("--gate-layers", gate_layers, "layer set, e.g. all, 1-3, 1,2,6, 1-6\\ffn");
    cmd->add_option("--gate-ffn", gate_ffn, "true or false");
  }

  gf_status apply(gf_config* cfg) const {
    gf_status status = GF_OK;
    if (!config_path.empty()) {
      status = gf_config_load_file(cfg, config_path.c_str());
      if (status != GF_OK) return status;
    }
    auto set = [&](const char* key, const std::string& value) -> gf_status {
      return value.empty() ? GF_OK : gf_config_set(cfg, key, value.c_str());
    };
    for (const std::string& kv : sets) {
      const size_t eq = kv.find('=');
      if (eq == std::string::npos) {
        std::fprintf(stderr, "error: --set expects key=value, got '%s'\n", kv.c_str());
        return GF_ERR_CONFIG;
      }
      status = gf_config_set(cfg, kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str());
      if (status != GF_OK) return status;
    }
    if ((status = set("seed", seed)) != GF_OK) return status;
    if ((status = set("precision", precision)) != GF_OK) return status;
    if ((status = set("gate", gate)) != GF_OK) return status;
    if ((status = set("gate_layers", gate_layers)) != GF_OK) return status;
    if ((status = set("gate_ffn", gate_ffn)) != GF_OK) return status;
    return GF_OK;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gating-augmented transformer language-model workbench"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "train a model and write metrics/checkpoints");
  ConfigFlags train_flags;
  train_flags.attach(train);
  std::string train_out = "runs/train";
  train->add_option("--out", train_out, "output directory");

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split file");
  std::string eval_ckpt, eval_split, eval_split_name = "test";
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--split", eval_split, "split text file")->required();
  eval->add_option("--split-name", eval_split_name, "split label for the CSV row");

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every op and model");
  double tolerance = 1e-4;
  bool inject_defect = false;
  gradcheck->add_option("--tolerance", tolerance, "max relative error allowed");
  gradcheck->add_flag("--inject-backward-defect", inject_defect,
                      "add a corrupted-backward fixture (detector sanity)");

  // compare
  auto* compare = app.add_subcommand("compare", "train gate variants under one base config");
  ConfigFlags compare_flags;
  compare_flags.attach(compare);
  std::string compare_variants = "none,sdu-sigmoid,sdu-tanh";
  std::string compare_out = "runs/compare";
  std::string compare_steps;
  compare->add_option("--variants", compare_variants, "comma-separated gate kinds");
  compare->add_option("--steps", compare_steps, "training steps per variant");
  compare->add_option("--out", compare_out, "output directory");

  // export-gates
  auto* export_gates = app.add_subcommand("export-gates", "write gate biases as TSV");
  std::string export_ckpt, export_out = "gate_biases.tsv";
  export_gates->add_option("--checkpoint", export_ckpt, "checkpoint file")->required();
  export_gates->add_option("--out", export_out, "output TSV path");

  CLI11_PARSE(app, argc, argv);

  if (train->parsed()) {
    ConfigHandle cfg;
    gf_status status = train_flags.apply(cfg.ptr);
    if (status != GF_OK) return finish(status);
    return finish(gf_train(cfg.ptr, train_out.c_str(), print_line, nullptr));
  }
  if (eval->parsed()) {
    return finish(gf_evaluate(eval_ckpt.c_str(), eval_split.c_str(), eval_split_name.c_str(),
                              print_line, nullptr, nullptr, nullptr, nullptr));
  }
  if (gradcheck->parsed()) {
    double worst = 0.0;
    gf_status status = gf_gradcheck(tolerance, inject_defect ? 1 : 0, print_line, nullptr, &worst);
    std::printf("max rel err over all cases: %.3e (tolerance %.3e)\n", worst, tolerance);
    return finish(status);
  }
  if (compare->parsed()) {
    ConfigHandle cfg;
    gf_status status = compare_flags.apply(cfg.ptr);
    if (status == GF_OK && !compare_steps.empty())
      status = gf_config_set(cfg.ptr, "max_steps", compare_steps.c_str());
    if (status != GF_OK) return finish(status);
    return finish(gf_compare(cfg.ptr, compare_variants.c_str(), compare_out.c_str(), print_line,
                             nullptr));
  }
  if (export_gates->parsed()) {
    return finish(gf_export_gate_biases(export_ckpt.c_str(), export_out.c_str()));
  }
  return 1;
}

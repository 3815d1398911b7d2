#pragma once

#include <functional>
#include <string>
#include <vector>

#include "config.hpp"

namespace gatedformer {

// Line-oriented output channel shared by the C API and the CLI.
using LineSink = std::function<void(const std::string&)>;

// Train per the resolved config, writing metrics.csv, resolved.cfg and
// checkpoints into out_dir.
void run_train(const RunConfig& cfg, const std::string& out_dir, const LineSink& sink);

// Evaluate a checkpoint on a split file; emits one metrics CSV row.
struct EvalOutput {
  double loss = 0.0, ppl = 0.0, bpc = 0.0;
  std::string csv_row;
};
EvalOutput run_eval(const std::string& checkpoint_path, const std::string& split_path,
                    const std::string& split_name, const LineSink& sink);

// Finite-difference report over every op and every variant x gate model.
// Returns true when all cases pass the tolerance.
bool run_gradcheck(double tolerance, bool inject_defect, const LineSink& sink,
                   double* max_rel_err_out = nullptr);

// Train one model per gate variant under a shared base config, seed, and
// data order; writes compare.csv and prints the final-step ranking.
void run_compare(const RunConfig& base, const std::vector<std::string>& gate_variants,
                 const std::string& out_dir, const LineSink& sink);

// Write the gate-bias TSV of a checkpointed model.
void run_export_gates(const std::string& checkpoint_path, const std::string& out_path);

}  // namespace gatedformer

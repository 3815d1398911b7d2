#include "runner.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "checkpoint.hpp"
#include "gate_export.hpp"
#include "gradcheck_suite.hpp"
#include "metrics.hpp"
#include "trainer.hpp"

namespace gatedformer {

namespace {

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorCode::IoError, "cannot open " + path + " for writing");
  out << content;
  require(out.good(), ErrorCode::IoError, "write failed for " + path);
}

struct LoadedData {
  Corpus train;
  std::vector<int32_t> valid;
};

LoadedData load_training_data(RunConfig& cfg) {
  require(!cfg.train_path.empty(), ErrorCode::ConfigError, "key train_path: not set");
  require(!cfg.valid_path.empty(), ErrorCode::ConfigError, "key valid_path: not set");
  LoadedData data;
  data.train = load_corpus(cfg.train_path, cfg.level);
  data.valid = tokenize_with_vocab(cfg.valid_path, data.train.vocab);
  const int64_t derived = data.train.vocab.size();
  if (cfg.vocab_size == 0) {
    cfg.vocab_size = derived;
  } else {
    require(cfg.vocab_size == derived, ErrorCode::ConfigError,
            "key vocab_size: config says " + std::to_string(cfg.vocab_size) +
                " but the training split yields " + std::to_string(derived));
  }
  return data;
}

template <class T>
void train_with_outputs(RunConfig cfg, const std::string& out_dir, const LineSink& sink) {
  LoadedData data = load_training_data(cfg);
  std::filesystem::create_directories(out_dir);
  write_text_file(out_dir + "/resolved.cfg", cfg.echo());

  Model<T> model = build_model<T>(cfg.model_config(), cfg.seed);
  TrainerState<T> state;

  std::ofstream csv(out_dir + "/metrics.csv", std::ios::binary | std::ios::trunc);
  require(csv.good(), ErrorCode::IoError, "cannot open " + out_dir + "/metrics.csv");
  csv << kMetricsCsvHeader << '\n';

  TrainHooks<T> hooks;
  hooks.on_record = [&](const MetricsRecord& r) {
    const std::string row = format_csv_row(r);
    csv << row << '\n';
    csv.flush();
    if (sink) sink(row);
  };
  hooks.on_checkpoint = [&](const Model<T>& m, const TrainerState<T>& s) {
    write_checkpoint_file(out_dir + "/model.ckpt", make_checkpoint(m, s, cfg));
  };

  train_model(model, data.train.ids, data.valid, cfg, state, hooks);
  write_checkpoint_file(out_dir + "/model.ckpt", make_checkpoint(model, state, cfg));
}

struct LoadedCheckpoint {
  RawCheckpoint raw;
  RunConfig cfg;
};

LoadedCheckpoint load_checkpoint_config(const std::string& path) {
  LoadedCheckpoint out;
  out.raw = read_checkpoint_file(path);
  const CheckpointText text = split_checkpoint_text(out.raw.text);
  out.cfg = resolve_config(parse_config_text(text.config_text), {});
  return out;
}

template <class T>
EvalOutput eval_with_model(const LoadedCheckpoint& loaded, const std::string& split_path,
                           const std::string& split_name) {
  RunConfig cfg = loaded.cfg;
  // The vocabulary is rebuilt deterministically from the training split the
  // checkpoint was produced with.
  Corpus train = load_corpus(cfg.train_path, cfg.level);
  require(train.vocab.size() == cfg.vocab_size, ErrorCode::ConfigError,
          "training split at " + cfg.train_path + " no longer matches the checkpoint vocabulary");
  const std::vector<int32_t> ids = tokenize_with_vocab(split_path, train.vocab);

  Model<T> model = build_model<T>(cfg.model_config(), cfg.seed);
  TrainerState<T> state;
  restore_checkpoint(loaded.raw, model, state);

  const EvalMetrics m = evaluate_split(model, ids, cfg.seq_len, cfg.mem_len);
  const CheckpointText text = split_checkpoint_text(loaded.raw.text);
  const int64_t step = std::stoll(text.state.at("step"));
  MetricsRecord record = MetricsRecord::from_loss(step, 0, split_name, m.loss,
                                                  std::stod(text.state.at("sgd_lr")), 0.0);
  return {m.loss, m.ppl, m.bpc, format_csv_row(record)};
}

}  // namespace

void run_train(const RunConfig& cfg, const std::string& out_dir, const LineSink& sink) {
  if (cfg.precision == Precision::Double) {
    train_with_outputs<double>(cfg, out_dir, sink);
  } else {
    train_with_outputs<float>(cfg, out_dir, sink);
  }
}

EvalOutput run_eval(const std::string& checkpoint_path, const std::string& split_path,
                    const std::string& split_name, const LineSink& sink) {
  const LoadedCheckpoint loaded = load_checkpoint_config(checkpoint_path);
  EvalOutput out = loaded.cfg.precision == Precision::Double
                       ? eval_with_model<double>(loaded, split_path, split_name)
                       : eval_with_model<float>(loaded, split_path, split_name);
  if (sink) sink(out.csv_row);
  return out;
}

bool run_gradcheck(double tolerance, bool inject_defect, const LineSink& sink,
                   double* max_rel_err_out) {
  const std::vector<GradcheckCase> cases = run_gradcheck_suite(inject_defect);
  bool all_pass = true;
  double worst = 0.0;
  for (const GradcheckCase& c : cases) {
    const bool pass = c.max_rel_err <= tolerance;
    all_pass = all_pass && pass;
    worst = std::max(worst, c.max_rel_err);
    if (sink) {
      char buf[256];
      std::snprintf(buf, sizeof(buf), "%-44s max_rel_err=%.3e  %s", c.name.c_str(), c.max_rel_err,
                    pass ? "ok" : "FAIL");
      sink(buf);
    }
  }
  if (max_rel_err_out) *max_rel_err_out = worst;
  return all_pass;
}

void run_compare(const RunConfig& base, const std::vector<std::string>& gate_variants,
                 const std::string& out_dir, const LineSink& sink) {
  require(!gate_variants.empty(), ErrorCode::InvalidArgument, "compare: no gate variants given");
  std::filesystem::create_directories(out_dir);

  struct VariantResult {
    std::string name;
    bool diverged = false;
    int64_t diverged_step = 0;
    double final_train_loss = 0.0;
    double final_valid_loss = 0.0;
    double final_valid_bpc = 0.0;
  };
  std::vector<VariantResult> results;
  std::string csv = "variant,step,train_loss,valid_loss,valid_bpc\n";

  for (const std::string& variant : gate_variants) {
    RunConfig cfg = base;
    std::vector<KeyValue> overrides{{"gate", variant}};
    cfg = resolve_config(parse_config_text(base.echo()), overrides);

    VariantResult result;
    result.name = variant;
    try {
      LoadedData data = load_training_data(cfg);
      std::vector<MetricsRecord> records;
      auto run_one = [&](auto precision_tag) {
        using T = decltype(precision_tag);
        Model<T> model = build_model<T>(cfg.model_config(), cfg.seed);
        TrainerState<T> state;
        return train_model(model, data.train.ids, data.valid, cfg, state, {});
      };
      records = cfg.precision == Precision::Double ? run_one(double{}) : run_one(float{});

      double train_loss = 0.0;
      for (const MetricsRecord& r : records) {
        if (r.split == "train") {
          train_loss = r.loss;
          char buf[256];
          std::snprintf(buf, sizeof(buf), "%s,%lld,%.6g", variant.c_str(),
                        static_cast<long long>(r.step), r.loss);
          std::string row = buf;
          // Pair with the valid record emitted at the same step, if any.
          const MetricsRecord* valid = nullptr;
          for (const MetricsRecord& v : records) {
            if (v.split == "valid" && v.step == r.step) valid = &v;
          }
          if (valid) {
            std::snprintf(buf, sizeof(buf), ",%.6g,%.6g", valid->loss, valid->bpc);
            row += buf;
            result.final_valid_loss = valid->loss;
            result.final_valid_bpc = valid->bpc;
          } else {
            row += ",,";
          }
          csv += row + "\n";
        }
      }
      result.final_train_loss = train_loss;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::DivergedLoss) throw;
      result.diverged = true;
      csv += variant + ",,diverged,,\n";
    }
    results.push_back(result);
  }

  write_text_file(out_dir + "/compare.csv", csv);

  std::vector<const VariantResult*> ranked;
  for (const auto& r : results) ranked.push_back(&r);
  std::stable_sort(ranked.begin(), ranked.end(), [](const VariantResult* a, const VariantResult* b) {
    if (a->diverged != b->diverged) return !a->diverged;
    return a->final_train_loss < b->final_train_loss;
  });
  if (sink) {
    sink("final-step ranking (by train loss):");
    int rank = 1;
    for (const VariantResult* r : ranked) {
      char buf[256];
      if (r->diverged) {
        std::snprintf(buf, sizeof(buf), "%d. %-14s diverged", rank, r->name.c_str());
      } else {
        std::snprintf(buf, sizeof(buf), "%d. %-14s train_loss=%.6g valid_loss=%.6g valid_bpc=%.6g",
                      rank, r->name.c_str(), r->final_train_loss, r->final_valid_loss,
                      r->final_valid_bpc);
      }
      sink(buf);
      ++rank;
    }
  }
}

void run_export_gates(const std::string& checkpoint_path, const std::string& out_path) {
  const LoadedCheckpoint loaded = load_checkpoint_config(checkpoint_path);
  std::string tsv;
  if (loaded.cfg.precision == Precision::Double) {
    Model<double> model = build_model<double>(loaded.cfg.model_config(), loaded.cfg.seed);
    TrainerState<double> state;
    restore_checkpoint(loaded.raw, model, state);
    tsv = gate_bias_tsv(model);
  } else {
    Model<float> model = build_model<float>(loaded.cfg.model_config(), loaded.cfg.seed);
    TrainerState<float> state;
    restore_checkpoint(loaded.raw, model, state);
    tsv = gate_bias_tsv(model);
  }
  write_text_file(out_path, tsv);
}

}  // namespace gatedformer

#include "gatedformer/gatedformer.h"

#include <cstring>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "config.hpp"
#include "runner.hpp"

using namespace gatedformer;

namespace {

thread_local std::string t_last_error;

gf_status status_from_code(ErrorCode code) { return static_cast<gf_status>(code); }

template <class Fn>
gf_status guarded(Fn&& fn) {
  try {
    t_last_error.clear();
    return fn();
  } catch (const Error& e) {
    t_last_error = e.what();
    return status_from_code(e.code());
  } catch (const std::exception& e) {
    t_last_error = e.what();
    return GF_ERR_INTERNAL;
  }
}

LineSink make_sink(gf_line_cb cb, void* user) {
  if (!cb) return {};
  return [cb, user](const std::string& line) { cb(line.c_str(), user); };
}

}  // namespace

struct gf_config {
  std::vector<KeyValue> file_values;
  std::vector<KeyValue> overrides;

  RunConfig resolve() const { return resolve_config(file_values, overrides); }
};

struct gf_model {
  RunConfig cfg;
  uint64_t total_params = 0;
};

extern "C" {

const char* gf_version(void) { return "1.0.0"; }

const char* gf_last_error(void) { return t_last_error.c_str(); }

const char* gf_status_name(gf_status status) {
  if (status == GF_OK) return "ok";
  if (status == GF_ERR_GRADCHECK_FAILED) return "GradcheckFailed";
  if (status == GF_ERR_INTERNAL) return "InternalError";
  return error_code_name(static_cast<ErrorCode>(status));
}

gf_config* gf_config_create(void) { return new gf_config(); }

void gf_config_destroy(gf_config* config) { delete config; }

gf_status gf_config_load_file(gf_config* config, const char* path) {
  return guarded([&]() -> gf_status {
    require(config && path, ErrorCode::InvalidArgument, "null argument");
    auto values = read_config_file(path);
    config->file_values.insert(config->file_values.end(), values.begin(), values.end());
    return GF_OK;
  });
}

gf_status gf_config_set(gf_config* config, const char* key, const char* value) {
  return guarded([&]() -> gf_status {
    require(config && key && value, ErrorCode::InvalidArgument, "null argument");
    // Validate the key/value pair eagerly so errors surface at set time.
    std::vector<KeyValue> probe = config->file_values;
    probe.insert(probe.end(), config->overrides.begin(), config->overrides.end());
    probe.emplace_back(key, value);
    resolve_config({}, probe);
    config->overrides.emplace_back(key, value);
    return GF_OK;
  });
}

gf_status gf_config_render(const gf_config* config, char* buf, size_t cap, size_t* len_out) {
  return guarded([&]() -> gf_status {
    require(config && buf && cap > 0, ErrorCode::InvalidArgument, "null argument");
    const std::string text = config->resolve().echo();
    if (len_out) *len_out = text.size();
    const size_t n = std::min(cap - 1, text.size());
    std::memcpy(buf, text.data(), n);
    buf[n] = '\0';
    return GF_OK;
  });
}

gf_status gf_train(const gf_config* config, const char* out_dir, gf_line_cb line_cb, void* user) {
  return guarded([&]() -> gf_status {
    require(config && out_dir, ErrorCode::InvalidArgument, "null argument");
    run_train(config->resolve(), out_dir, make_sink(line_cb, user));
    return GF_OK;
  });
}

gf_status gf_evaluate(const char* checkpoint_path, const char* split_path, const char* split_name,
                      gf_line_cb line_cb, void* user, double* loss_out, double* ppl_out,
                      double* bpc_out) {
  return guarded([&]() -> gf_status {
    require(checkpoint_path && split_path, ErrorCode::InvalidArgument, "null argument");
    const EvalOutput out = run_eval(checkpoint_path, split_path,
                                    split_name ? split_name : "test", make_sink(line_cb, user));
    if (loss_out) *loss_out = out.loss;
    if (ppl_out) *ppl_out = out.ppl;
    if (bpc_out) *bpc_out = out.bpc;
    return GF_OK;
  });
}

gf_status gf_gradcheck(double tolerance, int inject_defect, gf_line_cb line_cb, void* user,
                       double* max_rel_err_out) {
  return guarded([&]() -> gf_status {
    double worst = 0.0;
    const bool ok = run_gradcheck(tolerance, inject_defect != 0, make_sink(line_cb, user), &worst);
    if (max_rel_err_out) *max_rel_err_out = worst;
    if (!ok) {
      t_last_error = "gradient check exceeded the tolerance";
      return GF_ERR_GRADCHECK_FAILED;
    }
    return GF_OK;
  });
}

gf_status gf_compare(const gf_config* config, const char* gate_variants, const char* out_dir,
                     gf_line_cb line_cb, void* user) {
  return guarded([&]() -> gf_status {
    require(config && gate_variants && out_dir, ErrorCode::InvalidArgument, "null argument");
    std::vector<std::string> variants;
    std::stringstream ss(gate_variants);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (!item.empty()) variants.push_back(item);
    }
    run_compare(config->resolve(), variants, out_dir, make_sink(line_cb, user));
    return GF_OK;
  });
}

gf_status gf_export_gate_biases(const char* checkpoint_path, const char* out_path) {
  return guarded([&]() -> gf_status {
    require(checkpoint_path && out_path, ErrorCode::InvalidArgument, "null argument");
    run_export_gates(checkpoint_path, out_path);
    return GF_OK;
  });
}

gf_status gf_model_load(const char* checkpoint_path, gf_model** model_out) {
  return guarded([&]() -> gf_status {
    require(checkpoint_path && model_out, ErrorCode::InvalidArgument, "null argument");
    const RawCheckpoint raw = read_checkpoint_file(checkpoint_path);
    const CheckpointText text = split_checkpoint_text(raw.text);
    auto model = std::make_unique<gf_model>();
    model->cfg = resolve_config(parse_config_text(text.config_text), {});
    if (model->cfg.precision == Precision::Double) {
      Model<double> m = build_model<double>(model->cfg.model_config(), model->cfg.seed);
      TrainerState<double> state;
      restore_checkpoint(raw, m, state);
      model->total_params = static_cast<uint64_t>(count_parameters(m).total);
    } else {
      Model<float> m = build_model<float>(model->cfg.model_config(), model->cfg.seed);
      TrainerState<float> state;
      restore_checkpoint(raw, m, state);
      model->total_params = static_cast<uint64_t>(count_parameters(m).total);
    }
    *model_out = model.release();
    return GF_OK;
  });
}

void gf_model_destroy(gf_model* model) { delete model; }

gf_status gf_model_total_params(const gf_model* model, uint64_t* count_out) {
  return guarded([&]() -> gf_status {
    require(model && count_out, ErrorCode::InvalidArgument, "null argument");
    *count_out = model->total_params;
    return GF_OK;
  });
}

}  // extern "C"

/* Public C API of the gatedformer shared library.
 *
 * All entry points return a gf_status; GF_OK is 0 and anything else is an
 * error whose message can be fetched with gf_last_error() (thread-local).
 * Objects are opaque handles created and destroyed through this API.
 */
#ifndef GATEDFORMER_H
#define GATEDFORMER_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define GF_API __declspec(dllexport)
#else
#define GF_API __attribute__((visibility("default")))
#endif

typedef int32_t gf_status;

enum {
  GF_OK = 0,
  GF_ERR_SHAPE_MISMATCH = 1,
  GF_ERR_ALL_MASKED = 2,
  GF_ERR_NOT_SCALAR = 3,
  GF_ERR_NONDETERMINISTIC_FUNCTION = 4,
  GF_ERR_ODD_DIMENSION = 5,
  GF_ERR_INDIVISIBLE_HEADS = 6,
  GF_ERR_INVALID_PLACEMENT = 7,
  GF_ERR_OUT_OF_VOCAB = 8,
  GF_ERR_CONFIG = 9,
  GF_ERR_IO = 10,
  GF_ERR_EMPTY_CORPUS = 11,
  GF_ERR_CORPUS_TOO_SMALL = 12,
  GF_ERR_DIVERGED_LOSS = 13,
  GF_ERR_VERSION_MISMATCH = 14,
  GF_ERR_CHECKSUM_MISMATCH = 15,
  GF_ERR_NO_GATES = 16,
  GF_ERR_EMPTY_TENSOR = 17,
  GF_ERR_NON_FINITE = 18,
  GF_ERR_INVALID_ARGUMENT = 19,
  GF_ERR_GRADCHECK_FAILED = 20,
  GF_ERR_INTERNAL = 21
};

GF_API const char* gf_version(void);

/* Message of the most recent error on this thread ("" if none). */
GF_API const char* gf_last_error(void);

GF_API const char* gf_status_name(gf_status status);

/* ---- run configuration ------------------------------------------------ */

typedef struct gf_config gf_config;

GF_API gf_config* gf_config_create(void);
GF_API void gf_config_destroy(gf_config* config);

/* Load `key = value` lines from a file; unknown keys are errors. */
GF_API gf_status gf_config_load_file(gf_config* config, const char* path);

/* Set one key (applied after any file values; later wins). */
GF_API gf_status gf_config_set(gf_config* config, const char* key, const char* value);

/* Render the fully resolved configuration into `buf` (NUL-terminated,
 * truncated to `cap`). Returns the full length through `len_out` if given. */
GF_API gf_status gf_config_render(const gf_config* config, char* buf, size_t cap, size_t* len_out);

/* ---- commands ----------------------------------------------------------
 * `line_cb`, when non-NULL, receives progress/output lines. */

typedef void (*gf_line_cb)(const char* line, void* user);

/* Train; writes metrics.csv, resolved.cfg and model.ckpt under out_dir. */
GF_API gf_status gf_train(const gf_config* config, const char* out_dir, gf_line_cb line_cb,
                          void* user);

/* Evaluate a checkpoint on a split file; emits one metrics CSV row and
 * optionally stores loss/ppl/bpc. */
GF_API gf_status gf_evaluate(const char* checkpoint_path, const char* split_path,
                             const char* split_name, gf_line_cb line_cb, void* user,
                             double* loss_out, double* ppl_out, double* bpc_out);

/* Finite-difference gradient report over every op and model combination.
 * Returns GF_OK when all cases pass `tolerance`, GF_ERR_GRADCHECK_FAILED
 * otherwise. `inject_defect` adds a deliberately-corrupted-backward fixture
 * (detector sanity check). */
GF_API gf_status gf_gradcheck(double tolerance, int inject_defect, gf_line_cb line_cb, void* user,
                              double* max_rel_err_out);

/* Train one model per comma-separated gate variant under a shared base
 * config and seed; writes compare.csv under out_dir. */
GF_API gf_status gf_compare(const gf_config* config, const char* gate_variants,
                            const char* out_dir, gf_line_cb line_cb, void* user);

/* Write the gate-bias TSV of a checkpointed model. */
GF_API gf_status gf_export_gate_biases(const char* checkpoint_path, const char* out_path);

/* ---- model handles ------------------------------------------------------
 * Enough surface to load a checkpoint and inspect parameter counts. */

typedef struct gf_model gf_model;

GF_API gf_status gf_model_load(const char* checkpoint_path, gf_model** model_out);
GF_API void gf_model_destroy(gf_model* model);
GF_API gf_status gf_model_total_params(const gf_model* model, uint64_t* count_out);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* GATEDFORMER_H */

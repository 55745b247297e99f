#ifndef DEEPFLOW_H
#define DEEPFLOW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum DfStatus {
  DF_STATUS_OK = 0,
  DF_STATUS_NULL_POINTER = 1,
  DF_STATUS_INVALID_ARGUMENT = 2,
  DF_STATUS_CONFIG = 3,
  DF_STATUS_CHECKPOINT = 4,
  DF_STATUS_IO = 5,
  DF_STATUS_NUMERIC = 6,
  DF_STATUS_BUFFER_TOO_SMALL = 7,
  DF_STATUS_PANIC = 8,
} DfStatus;

typedef enum DfSamplerKind {
  DF_SAMPLER_KIND_ODE = 0,
  DF_SAMPLER_KIND_SDE = 1,
} DfSamplerKind;

// A loaded checkpoint: model and EMA weights.
typedef struct DfModel DfModel;

// Sampler settings; fill with `df_model_sampler_options` to start from the
// checkpoint's own configuration.
typedef struct DfSamplerOptions {
  enum DfSamplerKind kind;
  uint32_t steps;
  double cfg_scale;
  uint64_t seed;
} DfSamplerOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *df_version(void);

// Copy the calling thread's last error message into `buf` (NUL-terminated,
// truncated to `len`). Returns the full message length without the NUL.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t df_last_error(char *buf, size_t len);

// Train a run described by a JSON configuration. Outputs go to `out_dir`
// when given, otherwise to the configuration's `out_dir`.
//
// # Safety
// `config_json` must be a NUL-terminated string; `out_dir` may be null.
enum DfStatus df_train(const char *config_json, const char *out_dir);

// Load a checkpoint. On success `*out` owns a handle to release with
// `df_model_free`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum DfStatus df_model_load(const char *path, struct DfModel **out);

// Release a handle from `df_model_load`. Null is ignored.
//
// # Safety
// `model` must be null or a handle not yet freed.
void df_model_free(struct DfModel *model);

// Number of values in one sample (2 for planar points, C·H·W for images).
// Returns 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t df_model_sample_numel(const struct DfModel *model);

// Number of classes, 0 for an unconditional model or a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t df_model_num_classes(const struct DfModel *model);

// Number of branches k, 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t df_model_branches(const struct DfModel *model);

// The sampler settings stored with the checkpoint.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum DfStatus df_model_sampler_options(const struct DfModel *model, struct DfSamplerOptions *out);

// Draw `n` samples into `out`, row-major, `n * df_model_sample_numel`
// values. `classes` holds `n` class ids for a conditional model and must be
// null for an unconditional one; null on a conditional model samples the
// classes in rotation.
//
// # Safety
// `model` must be a live handle, `options` valid, `classes` null or `n`
// readable values, and `out` `out_len` writable values.
enum DfStatus df_sample(const struct DfModel *model,
                        const struct DfSamplerOptions *options,
                        size_t n,
                        const uint32_t *classes,
                        double *out,
                        size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEEPFLOW_H */

#ifndef WAVETRUNK_H
#define WAVETRUNK_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum WtStatus {
  WT_STATUS_OK = 0,
  // A required pointer argument was null.
  WT_STATUS_NULL_POINTER = 1,
  WT_STATUS_INVALID_ARGUMENT = 2,
  WT_STATUS_IO = 3,
  // Malformed audio or manifest data.
  WT_STATUS_FORMAT = 4,
  // Corrupt, truncated or incompatible checkpoint.
  WT_STATUS_CHECKPOINT = 5,
  // The output buffer is smaller than the value written to `written`.
  WT_STATUS_BUFFER_TOO_SMALL = 6,
  // Internal error; the handle involved must not be used again.
  WT_STATUS_PANIC = 7,
} WtStatus;

// Trunk plus task heads.
typedef struct WtModel WtModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version, a static NUL-terminated string.
const char *wt_version(void);

// `1 + blocks * (2^layers - 1)`, or 0 when `blocks` is 0 or `layers` is
// outside 1..=24.
size_t wt_receptive_field(size_t blocks, size_t layers);

// Freshly initialised model from a JSON run configuration (the same
// document the command-line tool reads). Only `trunk` and `tasks` are
// used; `tasks` may be empty for an embedding-only model.
//
// # Safety
// `config_json` must be a NUL-terminated string and `out` writable.
enum WtStatus wt_model_new(const char *config_json, uint64_t seed, struct WtModel **out);

// Model stored in a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum WtStatus wt_model_load(const char *path, struct WtModel **out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void wt_model_free(struct WtModel *model);

// Number of trunk channels.
//
// # Safety
// `model` must be a live handle and `out` writable.
enum WtStatus wt_model_channels(const struct WtModel *model, size_t *out);

// Trunk embedding of `len` samples, channel-major `[channels][len]`.
// `*written` receives the number of floats required even when the
// buffer is too small.
//
// # Safety
// `samples` must hold `len` floats, `out` `out_len` floats, and
// `written` must be writable.
enum WtStatus wt_model_embed(const struct WtModel *model,
                             const float *samples,
                             size_t len,
                             float *out,
                             size_t out_len,
                             size_t *written);

// Eval-mode output of task `task`: one score per class for
// classification heads, one value per sample for the others.
//
// # Safety
// As for [`wt_model_embed`]; `task` must be a NUL-terminated string.
enum WtStatus wt_model_predict(const struct WtModel *model,
                               const char *task,
                               const float *samples,
                               size_t len,
                               float *out,
                               size_t out_len,
                               size_t *written);

// Copies the calling thread's last error message, NUL-terminated and
// truncated to `len` bytes, into `buf`. Returns the full message length
// plus one, or 0 if the last call succeeded. `buf` may be null to query
// the length.
//
// # Safety
// `buf` must be null or hold `len` bytes.
size_t wt_last_error_message(char *buf, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WAVETRUNK_H */

#ifndef KVPFORMER_H
#define KVPFORMER_H

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum KvpStatus {
  KVP_STATUS_OK = 0,
  KVP_STATUS_NULL_POINTER = 1,
  KVP_STATUS_INVALID_UTF8 = 2,
  KVP_STATUS_IO = 3,
  KVP_STATUS_PARSE = 4,
  KVP_STATUS_CHECKPOINT = 5,
  KVP_STATUS_MODEL = 6,
  KVP_STATUS_INVALID_ARGUMENT = 7,
  KVP_STATUS_PANIC = 8,
} KvpStatus;

/**
 * A loaded model. Opaque to C.
 */
typedef struct KvpModel KvpModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until
 * the next call into this library on the same thread.
 */
const char *kvp_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *kvp_version(void);

/**
 * Loads a checkpoint written by `kvpformer train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer. On
 * success `*out` receives a model to release with [`kvp_model_free`].
 */
enum KvpStatus kvp_model_load(const char *path, struct KvpModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`kvp_model_load`] and not be used afterwards.
 */
void kvp_model_free(struct KvpModel *model);

/**
 * Predicts pairs for one document in the annotation JSON schema.
 *
 * `*out_json` receives `{"pairs": [[key_id, value_id], ...], "labels":
 * {"<entity id>": "<label>", ...}}`, to release with [`kvp_string_free`].
 *
 * # Safety
 * `model` must be a live model; `doc_id` and `annotation_json` must be
 * NUL-terminated strings; `out_json` must be a valid pointer.
 */
enum KvpStatus kvp_model_predict(const struct KvpModel *model,
                                 const char *doc_id,
                                 const char *annotation_json,
                                 char **out_json);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void kvp_string_free(char *s);

/**
 * Writes the 18-value spatial compatibility feature of two boxes given as
 * `[x1, y1, x2, y2]` on the 0..1000 grid. Coordinates are reordered and
 * clamped the same way the model does.
 *
 * # Safety
 * `a` and `b` must point to 4 readable `int32_t`, `out` to 18 writable
 * doubles.
 */
enum KvpStatus kvp_spatial_compatibility(const int32_t *a, const int32_t *b, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KVPFORMER_H */

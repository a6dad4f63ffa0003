#ifndef FUSIONETTE_H
#define FUSIONETTE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call. Codes 2-7 match the CLI exit codes.
typedef enum FusionetteStatus {
  FUSIONETTE_STATUS_OK = 0,
  // Null pointer, non-UTF-8 string or wrong buffer length.
  FUSIONETTE_STATUS_INVALID_ARGUMENT = 1,
  FUSIONETTE_STATUS_INVALID_CONFIG = 2,
  FUSIONETTE_STATUS_UNKNOWN_VARIANT = 3,
  FUSIONETTE_STATUS_FORMAT = 4,
  FUSIONETTE_STATUS_DIMENSION = 5,
  FUSIONETTE_STATUS_TRAINING = 6,
  FUSIONETTE_STATUS_IO = 7,
  // A Rust panic was caught at the boundary.
  FUSIONETTE_STATUS_INTERNAL = 10,
} FusionetteStatus;

// Opaque trained or freshly initialized model.
typedef struct FusionetteModel FusionetteModel;

// Opaque dataset split read from an MMEB file.
typedef struct FusionetteSplit FusionetteSplit;

// Headline metrics of an evaluation.
typedef struct FusionetteMetrics {
  double accuracy;
  double macro_f1;
  double weighted_f1;
  uint64_t n_samples;
} FusionetteMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *fusionette_version(void);

// Message of the last failed call on this thread, or an empty string. The
// pointer stays valid until the next fusionette call on the same thread.
const char *fusionette_last_error(void);

// Creates a freshly initialized model for `variant` with default
// architecture settings.
//
// # Safety
// `variant` must be a NUL-terminated string; `out` must be writable.
enum FusionetteStatus fusionette_model_init(const char *variant,
                                            size_t dim_image,
                                            size_t dim_text,
                                            size_t num_classes,
                                            uint64_t seed,
                                            struct FusionetteModel **out);

// Loads a model file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum FusionetteStatus fusionette_model_load(const char *path, struct FusionetteModel **out);

// Writes `model` to `path`.
//
// # Safety
// `model` must be a live handle; `path` a NUL-terminated string.
enum FusionetteStatus fusionette_model_save(const struct FusionetteModel *model, const char *path);

// Releases a model handle. Null is ignored.
//
// # Safety
// `model` must be null or a handle not yet freed.
void fusionette_model_free(struct FusionetteModel *model);

// Image width, text width and class count of `model`.
//
// # Safety
// `model` must be a live handle; each output pointer may be null.
enum FusionetteStatus fusionette_model_dims(const struct FusionetteModel *model,
                                            size_t *dim_image,
                                            size_t *dim_text,
                                            size_t *num_classes);

// Predicts one record. `probs` receives `probs_len` class probabilities
// (`probs_len` must equal the class count); `class_out` the argmax.
//
// # Safety
// Input arrays must hold the stated number of `double`s; `probs` must be
// writable for `probs_len` values; `class_out` may be null.
enum FusionetteStatus fusionette_model_predict(const struct FusionetteModel *model,
                                               const double *image,
                                               size_t image_len,
                                               const double *text,
                                               size_t text_len,
                                               double *probs,
                                               size_t probs_len,
                                               size_t *class_out);

// Reads an MMEB split file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum FusionetteStatus fusionette_split_read(const char *path, struct FusionetteSplit **out);

// Releases a split handle. Null is ignored.
//
// # Safety
// `split` must be null or a handle not yet freed.
void fusionette_split_free(struct FusionetteSplit *split);

// Number of records in `split`, or 0 for a null handle.
//
// # Safety
// `split` must be null or a live handle.
size_t fusionette_split_len(const struct FusionetteSplit *split);

// Class count of `split`, or 0 for a null handle.
//
// # Safety
// `split` must be null or a live handle.
size_t fusionette_split_num_classes(const struct FusionetteSplit *split);

// Scores `model` on every record of `split`.
//
// # Safety
// Both handles must be live; `out` must be writable.
enum FusionetteStatus fusionette_evaluate(const struct FusionetteModel *model,
                                          const struct FusionetteSplit *split,
                                          struct FusionetteMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FUSIONETTE_H */

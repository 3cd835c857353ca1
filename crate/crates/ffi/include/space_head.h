#ifndef SPACE_HEAD_H
#define SPACE_HEAD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/*
 Result code of every fallible call.
 */
typedef enum SmhStatus {
  SMH_STATUS_OK = 0,
  SMH_STATUS_NULL_POINTER = 1,
  SMH_STATUS_INVALID_ARGUMENT = 2,
  SMH_STATUS_IO = 3,
  SMH_STATUS_FORMAT = 4,
  SMH_STATUS_SHAPE = 5,
  SMH_STATUS_NUMERIC = 6,
  SMH_STATUS_PANIC = 7,
} SmhStatus;

/*
 Head kind reported by [`smh_model_info`].
 */
typedef enum SmhHeadKind {
  SMH_HEAD_KIND_SPACE = 0,
  /*
   First-token head with a ReLU pre-classifier.
   */
  SMH_HEAD_KIND_BASELINE = 1,
  /*
   First-token single linear layer.
   */
  SMH_HEAD_KIND_LINEAR = 2,
} SmhHeadKind;

/*
 Opaque embedding bundle.
 */
typedef struct SmhBundle SmhBundle;

/*
 Opaque trained head.
 */
typedef struct SmhModel SmhModel;

/*
 Shape summary of a loaded model. `latent_dim` and `n_spaces` are zero
 for first-token heads.
 */
typedef struct SmhModelInfo {
  enum SmhHeadKind kind;
  size_t embed_dim;
  size_t latent_dim;
  size_t n_spaces;
  size_t n_classes;
  size_t parameter_count;
} SmhModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Text of the most recent failure on this thread, or null if the last call
 succeeded. Valid until the next call into this library on the same thread.
 */
const char *smh_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *smh_version(void);

/*
 Trainable parameters of a space head; zero if any dimension is zero.
 */
size_t smh_parameter_count(size_t embed_dim, size_t latent_dim, size_t n_spaces, size_t n_classes);

/*
 Trainable parameters of a first-token head, with or without the `d × d` pre-layer.
 */
size_t smh_baseline_parameter_count(size_t embed_dim, size_t n_classes, bool pre_layer);

/*
 Loads an `SMH1` or `SBH1` model file. On success `*out` owns a handle
 that must be released with [`smh_model_free`].

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SmhStatus smh_model_load(const char *path, struct SmhModel **out);

/*
 Releases a model handle. Null is ignored.

 # Safety
 `model` must come from [`smh_model_load`] and not be freed twice.
 */
void smh_model_free(struct SmhModel *model);

/*
 # Safety
 `model` must be a live handle and `out` a valid pointer.
 */
enum SmhStatus smh_model_info(const struct SmhModel *model, struct SmhModelInfo *out);

/*
 Class logits for one example. `embeddings` is row-major `seq_len ×
 embed_dim`, `mask` has `seq_len` bytes, and `logits` must hold exactly
 `n_classes` doubles.

 # Safety
 All pointers must be valid for the stated lengths.
 */
enum SmhStatus smh_model_forward(const struct SmhModel *model,
                                 const float *embeddings,
                                 size_t seq_len,
                                 size_t embed_dim,
                                 const uint8_t *mask,
                                 double *logits,
                                 size_t logits_len);

/*
 Concatenated per-space centroids of one example (`n_spaces · latent_dim`
 doubles, each strictly inside (-1, 1)). Space heads only.

 # Safety
 All pointers must be valid for the stated lengths.
 */
enum SmhStatus smh_model_centroids(const struct SmhModel *model,
                                   const float *embeddings,
                                   size_t seq_len,
                                   size_t embed_dim,
                                   const uint8_t *mask,
                                   double *out,
                                   size_t out_len);

/*
 Predicted class (argmax of the logits, lowest index on ties).

 # Safety
 All pointers must be valid for the stated lengths.
 */
enum SmhStatus smh_model_predict(const struct SmhModel *model,
                                 const float *embeddings,
                                 size_t seq_len,
                                 size_t embed_dim,
                                 const uint8_t *mask,
                                 size_t *class_out);

/*
 Reads a `CEB1` bundle. Release with [`smh_bundle_free`].

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SmhStatus smh_bundle_read(const char *path, struct SmhBundle **out);

/*
 Releases a bundle handle. Null is ignored.

 # Safety
 `bundle` must come from [`smh_bundle_read`] and not be freed twice.
 */
void smh_bundle_free(struct SmhBundle *bundle);

/*
 Number of examples; zero for a null handle.

 # Safety
 `bundle` must be null or a live handle.
 */
size_t smh_bundle_len(const struct SmhBundle *bundle);

/*
 Predicted class of every example into `classes` (length `smh_bundle_len`).

 # Safety
 Handles must be live and `classes` valid for `classes_len` elements.
 */
enum SmhStatus smh_model_predict_bundle(const struct SmhModel *model,
                                        const struct SmhBundle *bundle,
                                        size_t *classes,
                                        size_t classes_len);

/*
 Accuracy and macro F1 of the model on a labeled bundle.

 # Safety
 Handles must be live; output pointers valid.
 */
enum SmhStatus smh_model_evaluate_bundle(const struct SmhModel *model,
                                         const struct SmhBundle *bundle,
                                         double *accuracy,
                                         double *f1_macro);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPACE_HEAD_H */

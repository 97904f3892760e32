#ifndef ICL_LENS_H
#define ICL_LENS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  ICL_METRIC_ACAR = 0,
  ICL_METRIC_IEAR = 1,
  ICL_METRIC_VCAR = 2,
} IclMetric;

typedef enum {
  ICL_STATUS_OK = 0,
  ICL_STATUS_NULL_POINTER = 1,
  ICL_STATUS_INVALID_UTF8 = 2,
  ICL_STATUS_IO = 3,
  ICL_STATUS_FORMAT = 4,
  ICL_STATUS_CONSISTENCY = 5,
  ICL_STATUS_DATA = 6,
  ICL_STATUS_DOMAIN = 7,
  ICL_STATUS_CONFIG = 8,
  ICL_STATUS_BUFFER_TOO_SMALL = 9,
  ICL_STATUS_PANIC = 10,
} IclStatus;

/**
 * Loaded and validated run directory.
 */
typedef struct IclRun IclRun;

/**
 * Loaded tensor file.
 */
typedef struct IclTensor IclTensor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length
 * excluding the terminator. `buf` may be null to query the length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t icl_last_error_message(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *icl_version(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
IclStatus icl_tensor_read(const char *path, IclTensor **out);

/**
 * Writes a tensor file. `dtype` is the on-disk code: 1 = f32, 2 = f16,
 * 3 = u8.
 *
 * # Safety
 * `shape` must hold `rank` extents and `data` `len` floats.
 */
IclStatus icl_tensor_write(const char *path,
                           uint8_t dtype,
                           const uint64_t *shape,
                           size_t rank,
                           const float *data,
                           size_t len);

/**
 * # Safety
 * `t` must be null or a handle from [`icl_tensor_read`] not yet freed.
 */
void icl_tensor_free(IclTensor *t);

/**
 * On-disk dtype code of the tensor, 0 for a null handle.
 *
 * # Safety
 * `t` must be null or a live tensor handle.
 */
uint8_t icl_tensor_dtype(const IclTensor *t);

/**
 * # Safety
 * `t` must be null or a live tensor handle.
 */
size_t icl_tensor_rank(const IclTensor *t);

/**
 * Number of scalars.
 *
 * # Safety
 * `t` must be null or a live tensor handle.
 */
size_t icl_tensor_len(const IclTensor *t);

/**
 * Copies the extents into `out` (capacity `cap`).
 *
 * # Safety
 * `t` must be a live tensor handle; `out` must hold `cap` u64 values.
 */
IclStatus icl_tensor_shape(const IclTensor *t, uint64_t *out, size_t cap);

/**
 * Row-major data widened to f32, valid until the handle is freed.
 *
 * # Safety
 * `t` must be null or a live tensor handle.
 */
const float *icl_tensor_data(const IclTensor *t);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
IclStatus icl_run_load(const char *path, IclRun **out);

/**
 * # Safety
 * `r` must be null or a handle from [`icl_run_load`] not yet freed.
 */
void icl_run_free(IclRun *r);

/**
 * # Safety
 * `r` must be null or a live run handle.
 */
size_t icl_run_sample_count(const IclRun *r);

/**
 * # Safety
 * `r` must be null or a live run handle.
 */
size_t icl_run_layer_count(const IclRun *r);

/**
 * # Safety
 * `r` must be null or a live run handle.
 */
size_t icl_run_warning_count(const IclRun *r);

/**
 * One metric at one layer of sample `sample` (by position). A zero
 * denominator yields +infinity.
 *
 * # Safety
 * `r` must be a live run handle; `out` must be writable.
 */
IclStatus icl_run_metric(const IclRun *r,
                         size_t sample,
                         IclMetric metric,
                         size_t layer,
                         double *out);

/**
 * Per-layer values (into `values`, capacity `cap`) and their mean over
 * non-sentinel layers.
 *
 * # Safety
 * `r` must be a live run handle; `values` must hold `cap` doubles and
 * `mean` must be writable.
 */
IclStatus icl_run_profile(const IclRun *r,
                          size_t sample,
                          IclMetric metric,
                          double *values,
                          size_t cap,
                          double *mean);

/**
 * KV-cache bytes of a prune plan. Pass `start_layer == n_layers` for no
 * pruning; otherwise `start_layer < prediction_layer <= n_layers`.
 *
 * # Safety
 * `out_bytes` and `out_savings` must be writable.
 */
IclStatus icl_kv_estimate(size_t n_layers,
                          size_t n_heads,
                          size_t head_dim,
                          size_t kv_bytes_per_element,
                          size_t full_len,
                          size_t kept_len,
                          size_t start_layer,
                          size_t prediction_layer,
                          bool recover,
                          uint64_t *out_bytes,
                          double *out_savings);

/**
 * CIDEr-D of `candidate` against `refs`. The document-frequency corpus is
 * `corpus` split into consecutive documents of `doc_sizes[i]` captions.
 *
 * # Safety
 * All pointers must be valid for the given counts; strings NUL-terminated.
 */
IclStatus icl_cider(const char *candidate,
                    const char *const *refs,
                    size_t n_refs,
                    const char *const *corpus,
                    const size_t *doc_sizes,
                    size_t n_docs,
                    double *out);

/**
 * Short-cut CIDEr of `generated` against the first four of `ice_captions`.
 *
 * # Safety
 * `ice_captions` must hold `n` NUL-terminated strings.
 */
IclStatus icl_shortcut_cider(const char *generated,
                             const char *const *ice_captions,
                             size_t n,
                             double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ICL_LENS_H */

/* C interface of the scanprop gradient scan library. */

#ifndef SCANPROP_H
#define SCANPROP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Scan executor selector for [`scanprop_chain_backward`].
typedef enum ScanpropExecutor {
  // Serial left-to-right fold.
  SCANPROP_EXECUTOR_LINEAR = 0,
  // Work-efficient two-phase tree scan.
  SCANPROP_EXECUTOR_BLELLOCH = 1,
  // Truncated tree with a serial bridge; reads the level arguments.
  SCANPROP_EXECUTOR_HYBRID = 2,
} ScanpropExecutor;

// Result of every fallible call.
typedef enum ScanpropStatus {
  // The call succeeded.
  SCANPROP_STATUS_OK = 0,
  // A required pointer argument was null.
  SCANPROP_STATUS_NULL_ARGUMENT = 1,
  // An argument failed validation; see [`scanprop_last_error`].
  SCANPROP_STATUS_INVALID_ARGUMENT = 2,
  // Buffer or operand sizes do not line up.
  SCANPROP_STATUS_SHAPE_MISMATCH = 3,
  // A file could not be written.
  SCANPROP_STATUS_IO_ERROR = 4,
  // The library panicked; this is a bug in scanprop.
  SCANPROP_STATUS_INTERNAL = 5,
} ScanpropStatus;

// Sparse matrix in compressed sparse row form, named by the transposed
// Jacobians it stores. Create with the `scanprop_*_tjac` builders or
// [`scanprop_csr_new`]; release with [`scanprop_csr_free`].
typedef struct ScanpropCsr ScanpropCsr;

// Gradients produced by one backward scan, plus its operation counters.
// Release with [`scanprop_scan_result_free`].
typedef struct ScanpropScanResult ScanpropScanResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *scanprop_version(void);

// Copies the current thread's most recent error message into `buf`.
//
// Returns the full message length including the trailing NUL, or 0 when no
// call has failed yet. When `buf` is non-null, up to `cap` bytes are
// written and the output is always NUL-terminated; pass a null `buf` to
// query the required size.
uint64_t scanprop_last_error(char *buf, uint64_t cap);

// Builds a CSR matrix from raw parts.
//
// `indptr` holds `rows + 1` ascending offsets into `indices`/`data`, both
// of length `nnz`; column indices must stay below `cols` and ascend within
// each row. The arrays are copied, so the caller keeps ownership of its
// buffers.
enum ScanpropStatus scanprop_csr_new(uint64_t rows,
                                     uint64_t cols,
                                     const uint64_t *indptr,
                                     uint64_t indptr_len,
                                     const uint32_t *indices,
                                     const double *data,
                                     uint64_t nnz,
                                     struct ScanpropCsr **out);

// Releases a CSR handle. A null pointer is ignored.
void scanprop_csr_free(struct ScanpropCsr *csr);

// Row count of the matrix; 0 when `csr` is null.
uint64_t scanprop_csr_rows(const struct ScanpropCsr *csr);

// Column count of the matrix; 0 when `csr` is null.
uint64_t scanprop_csr_cols(const struct ScanpropCsr *csr);

// Stored entry count of the matrix; 0 when `csr` is null.
uint64_t scanprop_csr_nnz(const struct ScanpropCsr *csr);

// Dense-matrix-times-vector product `y = M x`.
//
// `x` must hold `cols` values and `y` must have room for `rows`. For a
// transposed Jacobian this is exactly one backward gradient step.
enum ScanpropStatus scanprop_csr_spmv(const struct ScanpropCsr *csr,
                                      const double *x,
                                      uint64_t x_len,
                                      double *y,
                                      uint64_t y_len);

// Transposed Jacobian of a 3x3 same-padding convolution.
//
// `weights` holds `out_channels * in_channels * 9` values in
// `(out, in, ky, kx)` row-major order. The result is
// `(in_channels * height * width) x (out_channels * height * width)`.
// Requires `height >= 3` and `width >= 3`.
enum ScanpropStatus scanprop_conv3x3_tjac(uint64_t in_channels,
                                          uint64_t out_channels,
                                          uint64_t height,
                                          uint64_t width,
                                          const double *weights,
                                          uint64_t weights_len,
                                          struct ScanpropCsr **out);

// Transposed Jacobian of elementwise ReLU at the pre-activation `x`: a
// `len x len` diagonal of zeros and ones.
enum ScanpropStatus scanprop_relu_tjac(const double *x, uint64_t len, struct ScanpropCsr **out);

// Transposed Jacobian of non-overlapping max pooling over `input`.
//
// `input` holds `channels * in_h * in_w` values; window dims must divide
// the image dims. When `pooled` is non-null it receives the forward
// output, `channels * (in_h / win_h) * (in_w / win_w)` values.
enum ScanpropStatus scanprop_maxpool_tjac(const double *input,
                                          uint64_t channels,
                                          uint64_t in_h,
                                          uint64_t in_w,
                                          uint64_t win_h,
                                          uint64_t win_w,
                                          double *pooled,
                                          uint64_t pooled_len,
                                          struct ScanpropCsr **out);

// Runs one backward pass as an exclusive scan over a Jacobian chain.
//
// `jacobians` lists `count` transposed Jacobians in scan order, the last
// network layer's first, so `jacobians[0]` composes directly with `grad`
// (the loss gradient, `grad_len == scanprop_csr_cols(jacobians[0])`).
// `up_levels`/`down_levels` are read only by the hybrid executor and
// `workers` caps tree-level parallelism; pass 1 for serial execution.
//
// On success the result holds `count + 1` scan outputs: position 0 is the
// symbolic identity (dimension 0), and position `k` of `1..=count` is the
// gradient propagated through the first `k - 1` Jacobians, so position 1
// echoes `grad`. The handles in `jacobians` stay owned by the caller.
enum ScanpropStatus scanprop_chain_backward(const struct ScanpropCsr *const *jacobians,
                                            uint64_t count,
                                            const double *grad,
                                            uint64_t grad_len,
                                            enum ScanpropExecutor executor,
                                            uint64_t up_levels,
                                            uint64_t down_levels,
                                            uint64_t workers,
                                            struct ScanpropScanResult **out);

// Releases a scan result. A null pointer is ignored.
void scanprop_scan_result_free(struct ScanpropScanResult *result);

// Number of scan outputs (chain length plus one); 0 when `result` is null.
uint64_t scanprop_scan_result_count(const struct ScanpropScanResult *result);

// Length of output `index`; 0 for the identity at position 0, for an
// out-of-range index, or for a null `result`.
uint64_t scanprop_scan_result_dim(const struct ScanpropScanResult *result, uint64_t index);

// Copies output `index` into `buf`, which must hold at least its
// dimension. Position 0 is the symbolic identity and cannot be copied.
enum ScanpropStatus scanprop_scan_result_copy(const struct ScanpropScanResult *result,
                                              uint64_t index,
                                              double *buf,
                                              uint64_t cap);

// Total `diamond` applications the scan performed; 0 when null.
uint64_t scanprop_scan_result_diamond_ops(const struct ScanpropScanResult *result);

// Barrier-separated levels the scan executed; 0 when null.
uint64_t scanprop_scan_result_levels(const struct ScanpropScanResult *result);

// Synthesizes `n` bitstreams of `t` steps and writes them to `path` in the
// BPDS format. Deterministic in `seed`.
enum ScanpropStatus scanprop_gen_bits(uint64_t t, uint64_t n, uint64_t seed, const char *path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCANPROP_H */

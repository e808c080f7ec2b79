#ifndef EFFIPERC_H
#define EFFIPERC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum EpStatus {
  EP_STATUS_OK = 0,
  EP_STATUS_NULL_POINTER = 1,
  EP_STATUS_RANGE = 2,
  EP_STATUS_ALIGNMENT = 3,
  EP_STATUS_SHAPE = 4,
  EP_STATUS_CONFIG = 5,
  EP_STATUS_NUMERIC = 6,
  EP_STATUS_STATE = 7,
  EP_STATUS_FORMAT = 8,
  EP_STATUS_IO = 9,
  /**
   * The caller's buffer is too small; the required length was written.
   */
  EP_STATUS_BUFFER_TOO_SMALL = 10,
  EP_STATUS_PANIC = 11,
} EpStatus;

typedef enum EpOptimizerKind {
  EP_OPTIMIZER_KIND_FP32 = 0,
  EP_OPTIMIZER_KIND_EIGHT_BIT = 1,
} EpOptimizerKind;

typedef struct EpOptimizer EpOptimizer;

typedef struct EpSparseConv EpSparseConv;

/**
 * Sparse `float` tensor over a `(D, H, W)` grid.
 */
typedef struct EpSparseTensor EpSparseTensor;

/**
 * Non-empty voxels of one point cloud.
 */
typedef struct EpVoxelBatch EpVoxelBatch;

/**
 * Voxel grid. Axis arrays are ordered `(x, y, z)`.
 */
typedef struct EpVoxelConfig {
  double range_min[3];
  double range_max[3];
  double voxel_size[3];
  size_t max_points;
  uint64_t seed;
} EpVoxelConfig;

typedef struct EpVoxelStats {
  size_t total;
  size_t retained;
  size_t dropped;
  size_t out_of_range;
} EpVoxelStats;

typedef struct EpOptimConfig {
  double lr;
  double beta1;
  double beta2;
  double eps;
  size_t block_size;
} EpOptimConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failing call on this thread; never null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *ep_last_error_message(void);

/**
 * Library version as a NUL-terminated static string.
 */
const char *ep_version(void);

/**
 * The KITTI detection grid with 0.16 m voxels.
 */
struct EpVoxelConfig ep_voxel_config_kitti(void);

/**
 * Voxelizes `n_points` records of four floats `(x, y, z, intensity)`.
 *
 * # Safety
 * `xyzi` must point to `4 * n_points` floats; `config` and `out` must be
 * valid pointers.
 */
enum EpStatus ep_voxelize(const float *xyzi,
                          size_t n_points,
                          const struct EpVoxelConfig *config,
                          struct EpVoxelBatch **out);

/**
 * Number of non-empty voxels; 0 for a null handle.
 *
 * # Safety
 * `vb` must be null or a live handle.
 */
size_t ep_voxel_batch_len(const struct EpVoxelBatch *vb);

/**
 * # Safety
 * `vb` must be a live handle and `out` writable.
 */
enum EpStatus ep_voxel_batch_stats(const struct EpVoxelBatch *vb, struct EpVoxelStats *out);

/**
 * Writes `4 * len` coordinates `(b, z, y, x)`.
 *
 * # Safety
 * `vb` must be a live handle and `out` must hold `capacity` elements.
 */
enum EpStatus ep_voxel_batch_coords(const struct EpVoxelBatch *vb, uint32_t *out, size_t capacity);

/**
 * Writes the retained point count of every voxel.
 *
 * # Safety
 * `vb` must be a live handle and `out` must hold `capacity` elements.
 */
enum EpStatus ep_voxel_batch_point_counts(const struct EpVoxelBatch *vb,
                                          size_t *out,
                                          size_t capacity);

/**
 * # Safety
 * `vb` must be null or a handle not yet freed.
 */
void ep_voxel_batch_free(struct EpVoxelBatch *vb);

/**
 * Builds a tensor from `n` coordinates and `n * channels` features. Rows
 * are stored in canonical `(b, z, y, x)` order, which may differ from the
 * input order.
 *
 * # Safety
 * `coords` must hold `4 * n` values, `features` `n * channels` values.
 */
enum EpStatus ep_sparse_tensor_new(size_t depth,
                                   size_t height,
                                   size_t width,
                                   size_t batch,
                                   size_t channels,
                                   const uint32_t *coords,
                                   size_t n,
                                   const float *features,
                                   struct EpSparseTensor **out);

/**
 * Number of active sites; 0 for a null handle.
 *
 * # Safety
 * `t` must be null or a live handle.
 */
size_t ep_sparse_tensor_len(const struct EpSparseTensor *t);

/**
 * Feature width; 0 for a null handle.
 *
 * # Safety
 * `t` must be null or a live handle.
 */
size_t ep_sparse_tensor_channels(const struct EpSparseTensor *t);

/**
 * Writes the grid extent as `(D, H, W)`.
 *
 * # Safety
 * `t` must be a live handle and `out` must hold three values.
 */
enum EpStatus ep_sparse_tensor_extent(const struct EpSparseTensor *t, size_t *out);

/**
 * # Safety
 * `t` must be a live handle and `out` must hold `capacity` elements.
 */
enum EpStatus ep_sparse_tensor_coords(const struct EpSparseTensor *t,
                                      uint32_t *out,
                                      size_t capacity);

/**
 * # Safety
 * `t` must be a live handle and `out` must hold `capacity` elements.
 */
enum EpStatus ep_sparse_tensor_features(const struct EpSparseTensor *t,
                                        float *out,
                                        size_t capacity);

/**
 * # Safety
 * `t` must be null or a handle not yet freed.
 */
void ep_sparse_tensor_free(struct EpSparseTensor *t);

/**
 * A cubic sparse convolution with weights drawn from `seed`. A non-zero
 * `submanifold` keeps the input sites (stride 1, padding `kernel / 2`);
 * otherwise `stride` and `padding` apply.
 *
 * # Safety
 * `out` must be writable.
 */
enum EpStatus ep_sparse_conv_new(size_t in_channels,
                                 size_t out_channels,
                                 size_t kernel,
                                 size_t stride,
                                 size_t padding,
                                 int32_t submanifold,
                                 uint64_t seed,
                                 struct EpSparseConv **out);

/**
 * Replaces the weights (`k^3 * in * out`, offset-major then input then
 * output channel) and the bias (`out`).
 *
 * # Safety
 * `weight` and `bias` must hold the stated number of values.
 */
enum EpStatus ep_sparse_conv_set_weights(struct EpSparseConv *layer,
                                         const float *weight,
                                         size_t weight_len,
                                         const float *bias,
                                         size_t bias_len);

/**
 * # Safety
 * `layer` and `x` must be live handles and `out` writable.
 */
enum EpStatus ep_sparse_conv_forward(const struct EpSparseConv *layer,
                                     const struct EpSparseTensor *x,
                                     struct EpSparseTensor **out);

/**
 * # Safety
 * `layer` must be null or a handle not yet freed.
 */
void ep_sparse_conv_free(struct EpSparseConv *layer);

/**
 * lr 1e-4, betas (0.9, 0.999), eps 1e-8, blocks of 256.
 */
struct EpOptimConfig ep_optim_config_default(void);

/**
 * Adam over `n_tensors` parameter tensors with the given lengths.
 *
 * # Safety
 * `config` must be valid, `sizes` must hold `n_tensors` values, `out`
 * writable.
 */
enum EpStatus ep_optimizer_new(enum EpOptimizerKind kind,
                               const struct EpOptimConfig *config,
                               const size_t *sizes,
                               size_t n_tensors,
                               struct EpOptimizer **out);

/**
 * One Adam step. `params[i]` is updated in place from `grads[i]`; both
 * hold the length given at construction. A null gradient counts as zero.
 * Nothing is written when any input is rejected.
 *
 * # Safety
 * `params` and `grads` must hold `n_tensors` pointers to buffers of the
 * registered lengths.
 */
enum EpStatus ep_optimizer_step(struct EpOptimizer *opt,
                                float *const *params,
                                const float *const *grads,
                                size_t n_tensors);

/**
 * Bytes of optimizer state; 0 for a null handle.
 *
 * # Safety
 * `opt` must be null or a live handle.
 */
size_t ep_optimizer_state_bytes(const struct EpOptimizer *opt);

/**
 * Steps taken; 0 for a null handle.
 *
 * # Safety
 * `opt` must be null or a live handle.
 */
uint64_t ep_optimizer_step_count(const struct EpOptimizer *opt);

/**
 * Serializes the 8-bit state. `*written` always receives the checkpoint
 * size; pass a null `buf` to query it, in which case the call returns
 * `EP_STATUS_BUFFER_TOO_SMALL`.
 *
 * # Safety
 * `buf` must be null or hold `capacity` bytes; `written` must be writable.
 */
enum EpStatus ep_optimizer_checkpoint(const struct EpOptimizer *opt,
                                      uint8_t *buf,
                                      size_t capacity,
                                      size_t *written);

/**
 * # Safety
 * `bytes` must hold `len` bytes.
 */
enum EpStatus ep_optimizer_restore(struct EpOptimizer *opt, const uint8_t *bytes, size_t len);

/**
 * # Safety
 * `opt` must be null or a handle not yet freed.
 */
void ep_optimizer_free(struct EpOptimizer *opt);

/**
 * Blockwise absmax int8 quantization of `n` values. `scales` receives
 * `ceil(n / block_size)` values.
 *
 * # Safety
 * `x` and `codes` must hold `n` elements, `scales` the block count.
 */
enum EpStatus ep_quantize_block(const float *x,
                                size_t n,
                                size_t block_size,
                                int8_t *codes,
                                float *scales);

/**
 * Inverse of [`ep_quantize_block`]: `out[i] = codes[i] / 127 * scale`.
 *
 * # Safety
 * `codes` and `out` must hold `n` elements, `scales` the block count.
 */
enum EpStatus ep_dequantize_block(const int8_t *codes,
                                  size_t n,
                                  const float *scales,
                                  size_t block_size,
                                  float *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EFFIPERC_H */

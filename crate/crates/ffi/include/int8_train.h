#ifndef INT8_TRAIN_H
#define INT8_TRAIN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Zero is success.
 */
typedef enum I8tStatus {
  I8T_STATUS_OK = 0,
  I8T_STATUS_NULL_POINTER = 1,
  I8T_STATUS_INVALID_ARGUMENT = 2,
  I8T_STATUS_SHAPE = 3,
  I8T_STATUS_NETWORK = 4,
  I8T_STATUS_CONFIG = 5,
  I8T_STATUS_FORMAT = 6,
  I8T_STATUS_VERSION = 7,
  I8T_STATUS_IO = 8,
  I8T_STATUS_PANIC = 9,
} I8tStatus;

typedef enum I8tInit {
  I8T_INIT_UNIFORM = 0,
  I8T_INIT_NORMAL = 1,
} I8tInit;

typedef enum I8tRounding {
  I8T_ROUNDING_NEAREST = 0,
  I8T_ROUNDING_STOCHASTIC = 1,
  I8T_ROUNDING_PSEUDO_STOCHASTIC = 2,
} I8tRounding;

/**
 * Opaque network handle.
 */
typedef struct I8tNetwork I8tNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *i8t_version(void);

/**
 * Message of the last failure on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *i8t_last_error(void);

/**
 * Creates a preset network with freshly initialized weights. Training
 * batches may hold at most `max_batch` samples.
 *
 * # Safety
 * `arch` must be a NUL-terminated string and `out` a valid pointer.
 */
enum I8tStatus i8t_network_create(const char *arch,
                                  uint64_t seed,
                                  enum I8tInit init,
                                  size_t max_batch,
                                  struct I8tNetwork **out);

/**
 * Opens a checkpoint written by the trainer or by [`i8t_network_save`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum I8tStatus i8t_network_load(const char *path, size_t max_batch, struct I8tNetwork **out);

/**
 * # Safety
 * `net` must come from this library; `path` must be a NUL-terminated string.
 */
enum I8tStatus i8t_network_save(struct I8tNetwork *net, const char *path);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `net` must come from this library and must not be used afterwards.
 */
void i8t_network_free(struct I8tNetwork *net);

/**
 * Bytes per input image, or 0 for a null handle.
 *
 * # Safety
 * `net` must be null or come from this library.
 */
size_t i8t_network_input_size(const struct I8tNetwork *net);

/**
 * # Safety
 * `net` must be null or come from this library.
 */
size_t i8t_network_num_classes(const struct I8tNetwork *net);

/**
 * # Safety
 * `net` must come from this library.
 */
enum I8tStatus i8t_network_set_rounding(struct I8tNetwork *net,
                                        enum I8tRounding activations,
                                        enum I8tRounding gradients,
                                        enum I8tRounding loss);

/**
 * One training step on `batch` images with class labels. Writes the number
 * of correctly classified samples (before the update) to `correct` if it
 * is non-null.
 *
 * # Safety
 * `pixels` must hold `batch * input_size` bytes and `labels` `batch` bytes.
 */
enum I8tStatus i8t_network_train_step(struct I8tNetwork *net,
                                      const uint8_t *pixels,
                                      const uint8_t *labels,
                                      size_t batch,
                                      uint32_t m_u,
                                      size_t *correct);

/**
 * Predicted class of each image, written to `out[0..batch]`.
 *
 * # Safety
 * `pixels` must hold `batch * input_size` bytes and `out` `batch` bytes.
 */
enum I8tStatus i8t_network_predict(struct I8tNetwork *net,
                                   const uint8_t *pixels,
                                   size_t batch,
                                   uint8_t *out);

/**
 * Evaluation-mode int8 logits, `batch * num_classes` values, and their
 * shared scale exponent.
 *
 * # Safety
 * `pixels` must hold `batch * input_size` bytes, `out` room for
 * `batch * num_classes` values, and `scale` must be valid.
 */
enum I8tStatus i8t_network_logits(struct I8tNetwork *net,
                                  const uint8_t *pixels,
                                  size_t batch,
                                  int8_t *out,
                                  int8_t *scale);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* INT8_TRAIN_H */

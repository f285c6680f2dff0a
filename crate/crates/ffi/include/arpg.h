#ifndef ARPG_H
#define ARPG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ArpgOrder {
  ARPG_ORDER_RANDOM = 0,
  ARPG_ORDER_RASTER = 1,
  ARPG_ORDER_SPIRAL_IN = 2,
  ARPG_ORDER_SPIRAL_OUT = 3,
  ARPG_ORDER_Z_CURVE = 4,
  ARPG_ORDER_ALTERNATE = 5,
} ArpgOrder;

typedef enum ArpgPattern {
  ARPG_PATTERN_CAUSAL = 0,
  ARPG_PATTERN_BLOCK_CAUSAL = 1,
} ArpgPattern;

typedef enum ArpgSchedule {
  ARPG_SCHEDULE_ARCCOS = 0,
  ARPG_SCHEDULE_COSINE = 1,
  ARPG_SCHEDULE_UNIFORM = 2,
} ArpgSchedule;

/**
 * Result of every fallible call.
 */
typedef enum ArpgStatus {
  ARPG_STATUS_OK = 0,
  ARPG_STATUS_NULL_POINTER = 1,
  ARPG_STATUS_INVALID_ARGUMENT = 2,
  ARPG_STATUS_CONFIG = 3,
  ARPG_STATUS_IO = 4,
  ARPG_STATUS_FORMAT = 5,
  ARPG_STATUS_DIMENSION = 6,
  ARPG_STATUS_CONTRACT = 7,
  ARPG_STATUS_BUFFER_TOO_SMALL = 8,
  ARPG_STATUS_RUNTIME = 9,
  ARPG_STATUS_PANIC = 10,
} ArpgStatus;

/**
 * Opaque model handle.
 */
typedef struct ArpgHandle ArpgHandle;

/**
 * Shape of a loaded model.
 */
typedef struct ArpgModelInfo {
  size_t vocab_size;
  size_t num_classes;
  size_t grid_height;
  size_t grid_width;
  size_t hidden;
  size_t num_parameters;
} ArpgModelInfo;

/**
 * Decode options; fill with [`arpg_decode_options_default`] first.
 */
typedef struct ArpgDecodeOptions {
  size_t steps;
  enum ArpgSchedule schedule;
  enum ArpgPattern pattern;
  enum ArpgOrder order;
  /**
   * Terminal guidance scale; 1 disables guidance.
   */
  double cfg_scale;
  /**
   * Nonzero keeps the scale constant instead of ramping it linearly.
   */
  uint8_t cfg_constant;
  /**
   * 0 selects greedy decoding.
   */
  double temperature;
  /**
   * 0 disables top-k filtering.
   */
  size_t top_k;
  double top_p;
  uint64_t seed;
} ArpgDecodeOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *arpg_last_error(void);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum ArpgStatus arpg_model_load(const char *path, struct ArpgHandle **out);

/**
 * Creates a randomly initialised model from a JSON model configuration
 * (missing keys take their defaults; `"{}"` is the default model).
 *
 * # Safety
 * `config_json` must be a NUL-terminated string and `out` writable.
 */
enum ArpgStatus arpg_model_init(const char *config_json, uint64_t seed, struct ArpgHandle **out);

/**
 * Writes the model to a checkpoint file.
 *
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum ArpgStatus arpg_model_save(const struct ArpgHandle *model, const char *path);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void arpg_model_free(struct ArpgHandle *model);

/**
 * # Safety
 * `model` must come from this library; `out` must be writable.
 */
enum ArpgStatus arpg_model_info(const struct ArpgHandle *model, struct ArpgModelInfo *out);

/**
 * Default decode options.
 *
 * # Safety
 * `out` must be writable.
 */
enum ArpgStatus arpg_decode_options_default(struct ArpgDecodeOptions *out);

/**
 * Generates one grid per class id into `out_tokens`
 * (`batch × height × width` entries). A class id equal to the number of
 * classes selects the null condition.
 *
 * # Safety
 * Pointers must be valid for the given lengths.
 */
enum ArpgStatus arpg_generate(const struct ArpgHandle *model,
                              const uint32_t *classes,
                              size_t batch,
                              const struct ArpgDecodeOptions *options,
                              uint32_t *out_tokens,
                              size_t out_len);

/**
 * Fills the cells of a `height × width` grid whose `known` flag is 0;
 * known cells are copied unchanged.
 *
 * # Safety
 * `tokens`, `known` and `out_tokens` must hold `len` entries.
 */
enum ArpgStatus arpg_inpaint(const struct ArpgHandle *model,
                             const uint32_t *tokens,
                             const uint8_t *known,
                             size_t len,
                             uint32_t class_id,
                             const struct ArpgDecodeOptions *options,
                             uint32_t *out_tokens);

/**
 * Tokens decoded per step for `total` tokens over `steps` steps.
 *
 * # Safety
 * `out` must hold `out_len ≥ steps` entries.
 */
enum ArpgStatus arpg_schedule_counts(enum ArpgSchedule schedule,
                                     size_t steps,
                                     size_t total,
                                     size_t *out,
                                     size_t out_len);

/**
 * Parameter count of a JSON model configuration with a shared or
 * per-layer key/value projection.
 *
 * # Safety
 * `config_json` must be NUL-terminated; `out` writable.
 */
enum ArpgStatus arpg_param_count(const char *config_json, uint8_t shared_kv, uint64_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ARPG_H */

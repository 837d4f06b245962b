#ifndef ACTBIT_H
#define ACTBIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum ActbitStatus {
  ACTBIT_STATUS_OK = 0,
  ACTBIT_STATUS_NULL_POINTER = 1,
  ACTBIT_STATUS_INVALID_UTF8 = 2,
  ACTBIT_STATUS_INVALID_ARGUMENT = 3,
  ACTBIT_STATUS_INVALID_MODEL = 4,
  ACTBIT_STATUS_SHAPE_MISMATCH = 5,
  ACTBIT_STATUS_IO = 6,
  ACTBIT_STATUS_PARSE = 7,
  ACTBIT_STATUS_BUDGET_INFEASIBLE = 8,
  ACTBIT_STATUS_MISSING_ENTRY = 9,
  ACTBIT_STATUS_INTERNAL = 10,
  ACTBIT_STATUS_PANIC = 11,
} ActbitStatus;

/**
 * Opaque per-channel bit allocation.
 */
typedef struct ActbitAllocation ActbitAllocation;

/**
 * Opaque policy network.
 */
typedef struct ActbitModel ActbitModel;

/**
 * Opaque sensitivity table.
 */
typedef struct ActbitTable ActbitTable;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *actbit_version(void);

/**
 * Copy of the calling thread's last error message, or NULL if the last
 * call succeeded. Release with [`actbit_string_free`].
 */
char *actbit_last_error_message(void);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library that has not been
 * freed yet.
 */
void actbit_string_free(char *s);

/**
 * Loads a model JSON file.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a writable pointer.
 */
enum ActbitStatus actbit_model_load(const char *path, struct ActbitModel **out);

/**
 * Parses a model from a JSON string.
 *
 * # Safety
 * `json` must be a valid NUL-terminated string and `out` a writable pointer.
 */
enum ActbitStatus actbit_model_from_json(const char *json, struct ActbitModel **out);

/**
 * Model serialized as JSON. Release with [`actbit_string_free`].
 *
 * # Safety
 * `model` must be a live handle and `out` a writable pointer.
 */
enum ActbitStatus actbit_model_to_json(const struct ActbitModel *model, char **out);

/**
 * # Safety
 * `model` must be NULL or a handle from this library not yet freed.
 */
void actbit_model_free(struct ActbitModel *model);

/**
 * Observation width; 0 for a NULL handle.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t actbit_model_input_dim(const struct ActbitModel *model);

/**
 * Action width; 0 for a NULL handle.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t actbit_model_output_dim(const struct ActbitModel *model);

/**
 * Number of output channels across all layers; 0 for a NULL handle.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t actbit_model_num_channels(const struct ActbitModel *model);

/**
 * Runs the policy on one observation.
 *
 * # Safety
 * `obs` must point to `obs_len` doubles and `action` to `action_len`
 * writable doubles.
 */
enum ActbitStatus actbit_model_act(const struct ActbitModel *model,
                                   const double *obs,
                                   size_t obs_len,
                                   double *action,
                                   size_t action_len);

/**
 * Loads a sensitivity CSV file.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a writable pointer.
 */
enum ActbitStatus actbit_table_load(const char *path, struct ActbitTable **out);

/**
 * # Safety
 * `table` must be NULL or a handle from this library not yet freed.
 */
void actbit_table_free(struct ActbitTable *table);

/**
 * Number of `(channel, bits)` entries; 0 for a NULL handle.
 *
 * # Safety
 * `table` must be NULL or a live handle.
 */
size_t actbit_table_len(const struct ActbitTable *table);

/**
 * Score of one channel at one bit-width.
 *
 * # Safety
 * `table` must be a live handle and `score` a writable pointer.
 */
enum ActbitStatus actbit_table_score(const struct ActbitTable *table,
                                     size_t layer,
                                     size_t channel,
                                     uint32_t bits,
                                     double *score);

/**
 * Greedy allocation over the model's vision and backbone channels under an
 * average-bit budget, with the default pruning guard.
 *
 * # Safety
 * `model` and `table` must be live handles and `out` a writable pointer.
 */
enum ActbitStatus actbit_allocate(const struct ActbitModel *model,
                                  const struct ActbitTable *table,
                                  double budget,
                                  struct ActbitAllocation **out);

/**
 * # Safety
 * `alloc` must be NULL or a handle from this library not yet freed.
 */
void actbit_allocation_free(struct ActbitAllocation *alloc);

/**
 * Mean bits over the designated channels.
 *
 * # Safety
 * `alloc` must be a live handle and `avg` a writable pointer.
 */
enum ActbitStatus actbit_allocation_average_bits(const struct ActbitAllocation *alloc, double *avg);

/**
 * Bit-width assigned to one channel; 16 for channels outside the
 * designated set.
 *
 * # Safety
 * `alloc` must be a live handle and `bits` a writable pointer.
 */
enum ActbitStatus actbit_allocation_bits(const struct ActbitAllocation *alloc,
                                         size_t layer,
                                         size_t channel,
                                         uint32_t *bits);

/**
 * Writes the bit-map JSON for `alloc` applied to `model`.
 *
 * # Safety
 * `model` and `alloc` must be live handles and `path` a valid
 * NUL-terminated string.
 */
enum ActbitStatus actbit_allocation_save_bitmap(const struct ActbitModel *model,
                                                const struct ActbitAllocation *alloc,
                                                uint32_t act_bits,
                                                const char *path);

/**
 * Symmetric per-channel quantize/dequantize of one weight row.
 *
 * `deq` receives the dequantized row; `scale` (optional) the step size.
 *
 * # Safety
 * `row` and `deq` must point to `len` doubles; `scale` may be NULL.
 */
enum ActbitStatus actbit_quantize_row(const double *row,
                                      size_t len,
                                      uint32_t bits,
                                      double *deq,
                                      double *scale);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ACTBIT_H */

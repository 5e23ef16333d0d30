/* C interface for the lapnet pruning toolkit. Generated; do not edit. */

#ifndef LAPNET_H
#define LAPNET_H



#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every C-ABI call. Nonzero codes group like the CLI exit codes,
 * with extra codes for boundary misuse.
 */
typedef enum LapStatus {
  LAP_STATUS_OK = 0,
  /**
   * Invalid arguments or configuration.
   */
  LAP_STATUS_INVALID = 1,
  /**
   * Missing or malformed files and data.
   */
  LAP_STATUS_DATA = 2,
  /**
   * A verification oracle failed.
   */
  LAP_STATUS_VERIFY = 3,
  /**
   * A required pointer was null.
   */
  LAP_STATUS_NULL_ARG = 4,
  /**
   * A string argument was not valid UTF-8.
   */
  LAP_STATUS_UTF8 = 5,
  /**
   * An internal panic was caught at the boundary.
   */
  LAP_STATUS_PANIC = 6,
} LapStatus;

/**
 * Opaque dataset handle.
 */
typedef struct LapDataset LapDataset;

/**
 * Opaque network handle.
 */
typedef struct LapModel LapModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread; never free it.
 */
const char *lap_last_error(void);

/**
 * Crate version as a static NUL-terminated string.
 */
const char *lap_version(void);

/**
 * Initialize a fresh network of the named architecture.
 *
 * `arch_tag` is one of `linear-1000`, `fcn-paper`, `fcn-small`,
 * `conv6-small`; `input_shape` points at `rank` dimensions.
 *
 * # Safety
 * `arch_tag` must be NUL-terminated, `input_shape` must point at `rank`
 * readable values, and `out` must be a valid destination pointer.
 */
enum LapStatus lap_model_build(const char *arch_tag,
                               const uintptr_t *input_shape,
                               uintptr_t rank,
                               uintptr_t classes,
                               uint64_t seed,
                               struct LapModel **out);

/**
 * Load a model (weights and masks) from a container file.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` a valid destination pointer.
 */
enum LapStatus lap_model_load(const char *path, struct LapModel **out);

/**
 * Save a model (weights and masks) to a container file.
 *
 * # Safety
 * `model` must be a live handle and `path` NUL-terminated.
 */
enum LapStatus lap_model_save(const struct LapModel *model, const char *path);

/**
 * Release a model handle. A null pointer is a no-op.
 *
 * # Safety
 * `model` must have come from this library and not been freed before.
 */
void lap_model_free(struct LapModel *model);

/**
 * Fraction of prunable weights still alive in the model's masks.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid destination pointer.
 */
enum LapStatus lap_model_surviving_fraction(const struct LapModel *model, double *out);

/**
 * Total number of prunable weights in the model.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid destination pointer.
 */
enum LapStatus lap_model_weight_count(const struct LapModel *model, uintptr_t *out);

/**
 * Run one example through the network in inference mode. `input_len` must
 * equal the product of the model's input shape and `logits_len` its class
 * count.
 *
 * # Safety
 * `input` must point at `input_len` readable values and `logits` at
 * `logits_len` writable values.
 */
enum LapStatus lap_model_forward(const struct LapModel *model,
                                 const double *input,
                                 uintptr_t input_len,
                                 double *logits,
                                 uintptr_t logits_len);

/**
 * Build a deterministic synthetic-blobs dataset.
 *
 * # Safety
 * `out` must be a valid destination pointer.
 */
enum LapStatus lap_dataset_blobs(uintptr_t classes,
                                 uintptr_t dim,
                                 uintptr_t count,
                                 uint64_t seed,
                                 struct LapDataset **out);

/**
 * Load an MNIST split from the directory named by the data-dir env var
 * (or the built-in default). Nonzero `train_split` loads the train split.
 *
 * # Safety
 * `out` must be a valid destination pointer.
 */
enum LapStatus lap_dataset_mnist(int32_t train_split, struct LapDataset **out);

/**
 * Number of examples in the dataset.
 *
 * # Safety
 * `dataset` must be a live handle and `out` a valid destination pointer.
 */
enum LapStatus lap_dataset_len(const struct LapDataset *dataset, uintptr_t *out);

/**
 * Release a dataset handle. A null pointer is a no-op.
 *
 * # Safety
 * `dataset` must have come from this library and not been freed before.
 */
void lap_dataset_free(struct LapDataset *dataset);

/**
 * Train the model in place with Adam for `steps` minibatch steps,
 * respecting any masks already attached.
 *
 * # Safety
 * `model` must be a live, exclusively held handle and `dataset` a live
 * handle.
 */
enum LapStatus lap_train(struct LapModel *model,
                         const struct LapDataset *dataset,
                         uintptr_t steps,
                         double learning_rate,
                         uintptr_t batch_size,
                         uint64_t seed);

/**
 * Classification error of the model on the dataset, in [0, 1].
 *
 * # Safety
 * `model` and `dataset` must be live handles and `out` a valid
 * destination pointer.
 */
enum LapStatus lap_evaluate(const struct LapModel *model,
                            const struct LapDataset *dataset,
                            double *out);

/**
 * Prune the model in place: score with the named criterion, keep the
 * schedule's fraction per layer (conv `p^tau`, dense `q^tau`, final dense
 * `((1+q)/2)^tau`), and attach the masks. `dataset` may be null unless the
 * criterion needs data-driven statistics (`lap-act`, `obd`, `obd-lap`).
 *
 * # Safety
 * `model` must be a live, exclusively held handle; `criterion_tag` must be
 * NUL-terminated; `dataset`, when non-null, must be a live handle.
 */
enum LapStatus lap_prune(struct LapModel *model,
                         const char *criterion_tag,
                         double p,
                         double q,
                         uint32_t tau,
                         const struct LapDataset *dataset);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LAPNET_H */

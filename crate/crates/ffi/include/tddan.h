#ifndef TDDAN_H
#define TDDAN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by all functions.
 */
typedef enum TddanStatus {
  TDDAN_STATUS_OK = 0,
  TDDAN_STATUS_NULL_POINTER = 1,
  TDDAN_STATUS_INVALID_ARGUMENT = 2,
  TDDAN_STATUS_INVALID_CONFIGURATION = 3,
  TDDAN_STATUS_DEGENERATE_SOURCE = 4,
  TDDAN_STATUS_NUMERICAL_FAILURE = 5,
  TDDAN_STATUS_EMPTY_SPEAKER = 6,
  TDDAN_STATUS_INVALID_STATE = 7,
  TDDAN_STATUS_UNSUPPORTED = 8,
  TDDAN_STATUS_PARSE = 9,
  TDDAN_STATUS_IO = 10,
  TDDAN_STATUS_PANIC = 11,
} TddanStatus;

/**
 * A loaded model.
 */
typedef struct TddanModel TddanModel;

/**
 * Separated waveforms, one per speaker, all as long as the input mixture.
 */
typedef struct TddanSeparation TddanSeparation;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *tddan_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *tddan_version(void);

/**
 * Loads a checkpoint written by the `tddan train` command.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum TddanStatus tddan_model_load(const char *path, struct TddanModel **out);

/**
 * # Safety
 * `model` must come from [`tddan_model_load`] and not be used afterwards.
 */
void tddan_model_free(struct TddanModel *model);

/**
 * Audio sample rate the model was trained at, or 0 for a NULL handle.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
uint32_t tddan_model_sample_rate(const struct TddanModel *model);

/**
 * Separates `mixture` into `num_speakers` waveforms.
 *
 * Attractor models cluster their embeddings with k-means seeded by `seed`.
 * Conv-TasNet produces its fixed number of outputs and rejects any other
 * `num_speakers`.
 *
 * # Safety
 * `model` must be a live handle, `mixture` must point to `len` samples and
 * `out` must be a valid pointer.
 */
enum TddanStatus tddan_model_separate(const struct TddanModel *model,
                                      const double *mixture,
                                      size_t len,
                                      size_t num_speakers,
                                      uint64_t seed,
                                      struct TddanSeparation **out);

/**
 * Number of separated waveforms, or 0 for a NULL handle.
 *
 * # Safety
 * `sep` must be NULL or a live handle.
 */
size_t tddan_separation_count(const struct TddanSeparation *sep);

/**
 * Samples of waveform `index`, writing its length to `len`. Returns NULL
 * when the index is out of range. The data lives as long as the handle.
 *
 * # Safety
 * `sep` must be a live handle and `len` NULL or a valid pointer.
 */
const double *tddan_separation_source(const struct TddanSeparation *sep, size_t index, size_t *len);

/**
 * # Safety
 * `sep` must come from [`tddan_model_separate`] and not be used afterwards.
 */
void tddan_separation_free(struct TddanSeparation *sep);

/**
 * Scale-invariant SDR in dB of `estimate` against `reference`.
 *
 * # Safety
 * Both buffers must hold `len` samples and `out` must be valid.
 */
enum TddanStatus tddan_si_sdr(const double *estimate,
                              const double *reference,
                              size_t len,
                              double *out);

/**
 * SDR in dB allowing a `filter_len`-tap distortion filter on the reference.
 *
 * # Safety
 * Both buffers must hold `len` samples and `out` must be valid.
 */
enum TddanStatus tddan_sdr(const double *estimate,
                           const double *reference,
                           size_t len,
                           size_t filter_len,
                           double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TDDAN_H */

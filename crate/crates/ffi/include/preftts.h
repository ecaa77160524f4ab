#ifndef PREFTTS_H
#define PREFTTS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Marks a preference-stream slot with no token (disabled stream).
 */
#define PT_NO_TOKEN UINT32_MAX

typedef enum {
  PT_STATUS_OK = 0,
  PT_STATUS_NULL_ARGUMENT = 1,
  PT_STATUS_INVALID_ARGUMENT = 2,
  PT_STATUS_CONFIG = 3,
  PT_STATUS_DATA = 4,
  PT_STATUS_RUNTIME = 5,
  PT_STATUS_BUFFER_TOO_SMALL = 6,
  PT_STATUS_PANIC = 7,
} PtStatus;

/**
 * Trained codec used to turn speech tokens into content and prompt tokens.
 */
typedef struct PtCodec PtCodec;

/**
 * Trained language model.
 */
typedef struct PtLm PtLm;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failing call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *pt_last_error(void);

void pt_clear_error(void);

/**
 * Number of codes of an FSQ codebook with `n` per-dimension levels.
 *
 * # Safety
 * `levels` must point to `n` readable values; `out` must be writable.
 */
PtStatus pt_fsq_codebook_size(const uint32_t *levels_ptr, size_t n, uint64_t *out);

/**
 * Writes the `n` code digits of `index` to `code_out`.
 *
 * # Safety
 * `levels` and `code_out` must each point to `n` values.
 */
PtStatus pt_fsq_index_to_code(const uint32_t *levels_ptr,
                              size_t n,
                              uint64_t index,
                              uint32_t *code_out);

/**
 * Inverse of [`pt_fsq_index_to_code`].
 *
 * # Safety
 * `levels` and `code` must each point to `n` values; `out` must be writable.
 */
PtStatus pt_fsq_code_to_index(const uint32_t *levels_ptr,
                              size_t n,
                              const uint32_t *code,
                              uint64_t *out);

/**
 * Loads a codec checkpoint into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
PtStatus pt_codec_load(const char *path, PtCodec **out);

/**
 * # Safety
 * `codec` must come from [`pt_codec_load`] and not be used afterwards.
 */
void pt_codec_free(PtCodec *codec);

/**
 * Speech vocabulary size accepted by [`pt_codec_encode`].
 *
 * # Safety
 * `codec` must be a live handle; `out` must be writable.
 */
PtStatus pt_codec_speech_vocab(const PtCodec *codec, size_t *out);

/**
 * Copies the NUL-terminated hex fingerprint into `buf`. `*len` receives
 * the fingerprint length, also when the buffer is too small.
 *
 * # Safety
 * `buf` must hold `cap` bytes; `len` must be writable.
 */
PtStatus pt_codec_fingerprint(const PtCodec *codec, char *buf, size_t cap, size_t *len);

/**
 * Encodes `len` speech tokens into one content and one prompt token per
 * frame, written to `content_out` and `prompt_out` (each `len` long).
 *
 * # Safety
 * `speech`, `content_out` and `prompt_out` must each hold `len` values.
 */
PtStatus pt_codec_encode(const PtCodec *codec,
                         const uint32_t *speech,
                         size_t len,
                         uint32_t *content_out,
                         uint32_t *prompt_out);

/**
 * Loads a language-model checkpoint into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
PtStatus pt_lm_load(const char *path, PtLm **out);

/**
 * # Safety
 * `lm` must come from [`pt_lm_load`] and not be used afterwards.
 */
void pt_lm_free(PtLm *lm);

/**
 * Fails with `PT_STATUS_DATA` unless `lm` was trained on tokens of `codec`.
 *
 * # Safety
 * Both handles must be live.
 */
PtStatus pt_lm_check_pairing(const PtLm *lm, const PtCodec *codec);

/**
 * Greedy generation of at most `max_len` speech tokens for an instruction
 * and content text. `*out_len` receives the number of speech tokens written
 * to `speech_out`. When non-null, `content_out` and `prompt_out` receive the
 * preference tokens of each emitted speech token, or `PT_NO_TOKEN` for a
 * disabled stream. All output buffers must hold `max_len` values.
 *
 * # Safety
 * Strings must be NUL-terminated; non-null buffers must hold `max_len` values.
 */
PtStatus pt_lm_generate(const PtLm *lm,
                        const char *instruction,
                        const char *text,
                        size_t max_len,
                        uint32_t *speech_out,
                        uint32_t *content_out,
                        uint32_t *prompt_out,
                        size_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PREFTTS_H */

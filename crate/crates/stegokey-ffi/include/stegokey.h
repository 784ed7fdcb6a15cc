#ifndef STEGOKEY_H
#define STEGOKEY_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Non-zero means failure; call `sk_last_error_message`.
 */
enum SkStatus
#ifdef __cplusplus
  : int32_t
#endif // __cplusplus
 {
  SkStatus_Ok = 0,
  SkStatus_NullArgument = 1,
  SkStatus_InvalidArgument = 2,
  SkStatus_IoError = 3,
  SkStatus_FormatError = 4,
  SkStatus_InternalError = 5,
};
#ifndef __cplusplus
typedef int32_t SkStatus;
#endif // __cplusplus

/**
 * Opaque model handle (a loaded checkpoint).
 */
typedef struct SkModel SkModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message (NUL-terminated) into
 * `buf` and returns the full message length in bytes (excluding the NUL).
 * A zero-length message means the last call succeeded.
 *
 * # Safety
 * `buf` must point to at least `cap` writable bytes, or be null (then only
 * the length is returned).
 */
size_t sk_last_error_message(char *buf, size_t cap);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sk_version(void);

/**
 * Loads a checkpoint file into a model handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 * The returned handle must be released with [`sk_model_free`].
 */
SkStatus sk_model_load(const char *path, SkModel **out);

/**
 * Releases a handle returned by [`sk_model_load`]. Null is a no-op.
 *
 * # Safety
 * `model` must be a pointer from `sk_model_load` that has not been freed.
 */
void sk_model_free(SkModel *model);

/**
 * Square image side the model expects, or 0 for a null handle.
 *
 * # Safety
 * `model` must be a live handle or null.
 */
size_t sk_model_side(const SkModel *model);

/**
 * Embeds `secret` into `cover` under `key`, writing the stego image.
 * All buffers are `side * side * 3` RGB bytes.
 *
 * # Safety
 * Buffers must be valid for `side * side * 3` bytes, `out` writable.
 */
SkStatus sk_embed(const SkModel *model,
                  uint64_t key,
                  const uint8_t *secret,
                  const uint8_t *cover,
                  uint8_t *out);

/**
 * Recovers a secret from a stego image under `key`.
 *
 * # Safety
 * Buffers must be valid for `side * side * 3` bytes, `out` writable.
 */
SkStatus sk_recover(const SkModel *model, uint64_t key, const uint8_t *stego, uint8_t *out);

/**
 * Runs the purification (denoising) task. No key involved.
 *
 * # Safety
 * Buffers must be valid for `side * side * 3` bytes, `out` writable.
 */
SkStatus sk_purify(const SkModel *model, const uint8_t *noisy, uint8_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STEGOKEY_H */

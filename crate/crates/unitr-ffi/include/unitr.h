#ifndef UNITR_H
#define UNITR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code of every FFI call.
 */
typedef enum UnitrStatus {
  UNITR_STATUS_OK = 0,
  UNITR_STATUS_NULL_POINTER = 1,
  UNITR_STATUS_INVALID_UTF8 = 2,
  UNITR_STATUS_INVALID_CONFIG = 3,
  UNITR_STATUS_RUN_FAILED = 4,
  UNITR_STATUS_BUFFER_TOO_SMALL = 5,
} UnitrStatus;

/**
 * Opaque engine: parsed config, camera rig, weights, and the cached
 * pseudo depth table when the block sequence needs one.
 */
typedef struct UnitrEngine UnitrEngine;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *unitr_last_error_message(void);

/**
 * Create an engine. `config_json` may be NULL for the default
 * configuration. On success writes the handle to `out_engine`.
 *
 * # Safety
 * `config_json`, when non-NULL, must point to a NUL-terminated string;
 * `out_engine` must point to writable memory for one pointer.
 */
enum UnitrStatus unitr_engine_create(const char *config_json,
                                     uint64_t seed,
                                     struct UnitrEngine **out_engine);

/**
 * Destroy an engine created by [`unitr_engine_create`]. NULL is a no-op.
 *
 * # Safety
 * `engine` must be a pointer returned by `unitr_engine_create` that has
 * not been destroyed yet.
 */
void unitr_engine_destroy(struct UnitrEngine *engine);

/**
 * BEV grid dimensions: grid x, grid y, channels.
 *
 * # Safety
 * All pointers must be valid for writes of one `usize` each.
 */
enum UnitrStatus unitr_engine_bev_dims(const struct UnitrEngine *engine,
                                       uintptr_t *out_x,
                                       uintptr_t *out_y,
                                       uintptr_t *out_channels);

/**
 * Run the backbone on the engine's synthetic scene for `scene_seed` and
 * copy the BEV features (row-major x, y, channel) into `out_features`.
 * `len` must be at least x*y*channels. Optionally reports the attention
 * dispatch count.
 *
 * # Safety
 * `out_features` must point to `len` writable f32 values;
 * `out_dispatches`, when non-NULL, must be writable.
 */
enum UnitrStatus unitr_engine_run(const struct UnitrEngine *engine,
                                  uint64_t scene_seed,
                                  bool serial,
                                  float *out_features,
                                  uintptr_t len,
                                  uint64_t *out_dispatches);

/**
 * Seed the engine was created with (weights seed).
 *
 * # Safety
 * `engine` must be a live engine pointer.
 */
uint64_t unitr_engine_seed(const struct UnitrEngine *engine);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UNITR_H */

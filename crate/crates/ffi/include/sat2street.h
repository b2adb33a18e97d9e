/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef SAT2STREET_H
#define SAT2STREET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define S2S_OUTPUT_BRANCH1_SQUARE 0

#define S2S_OUTPUT_BRANCH1_PANO 1

#define S2S_OUTPUT_BRANCH2_PANO 2

#define S2S_OUTPUT_FUSED 3

typedef enum {
  S2S_STATUS_OK = 0,
  S2S_STATUS_NULL_POINTER = 1,
  S2S_STATUS_INVALID_ARGUMENT = 2,
  S2S_STATUS_CONFIG = 3,
  S2S_STATUS_DATA = 4,
  S2S_STATUS_CHECKPOINT = 5,
  S2S_STATUS_NUMERICAL = 6,
  S2S_STATUS_IO = 7,
  S2S_STATUS_PANIC = 8,
} S2sStatus;

/**
 * Pipeline configuration.
 */
typedef struct S2sConfig S2sConfig;

/**
 * An owned image, 8-bit RGB, row-major, channels interleaved.
 */
typedef struct S2sImage S2sImage;

/**
 * Panorama outputs of one inference call.
 */
typedef struct S2sOutputs S2sOutputs;

/**
 * A loaded pipeline ready for inference.
 */
typedef struct S2sPipeline S2sPipeline;

typedef struct {
  double ssim;
  double psnr;
  double fid;
  double lpips;
  size_t n_pairs;
} S2sMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success. Valid until the next call.
 */
const char *s2s_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *s2s_version(void);

/**
 * New configuration with default values.
 */
S2sConfig *s2s_config_new(void);

/**
 * Loads a `key=value` config file into a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
S2sStatus s2s_config_load(const char *path, S2sConfig **out);

/**
 * Sets one dotted config key.
 *
 * # Safety
 * `cfg` must come from this library; `key` and `value` must be NUL-terminated strings.
 */
S2sStatus s2s_config_set(S2sConfig *cfg, const char *key, const char *value);

/**
 * Checks every config constraint.
 *
 * # Safety
 * `cfg` must come from this library.
 */
S2sStatus s2s_config_validate(const S2sConfig *cfg);

/**
 * # Safety
 * `cfg` must come from this library or be null; it must not be used afterwards.
 */
void s2s_config_free(S2sConfig *cfg);

/**
 * Writes a procedural dataset into `dest`, or `data.root` when `dest` is null.
 *
 * # Safety
 * `cfg` must come from this library; `dest` must be null or a NUL-terminated string.
 */
S2sStatus s2s_make_synthetic(const S2sConfig *cfg, const char *dest, size_t train, size_t test);

/**
 * Trains stage 1-4 into `out_dir`; stage 0 runs all four in order.
 *
 * # Safety
 * `cfg` must come from this library; `out_dir` must be a NUL-terminated string.
 */
S2sStatus s2s_train(const S2sConfig *cfg, const char *out_dir, uint32_t stage, bool resume);

/**
 * Loads a full checkpoint. `cache_dir` may be null to disable caching of branch-1 samples.
 *
 * # Safety
 * `cfg` must come from this library; string arguments must be NUL-terminated or null where allowed.
 */
S2sStatus s2s_pipeline_open(const S2sConfig *cfg,
                            const char *ckpt_path,
                            const char *cache_dir,
                            S2sPipeline **out);

/**
 * # Safety
 * `pipe` must come from this library or be null; it must not be used afterwards.
 */
void s2s_pipeline_free(S2sPipeline *pipe);

/**
 * Runs one satellite image, given as `height * width * 3` interleaved RGB bytes.
 *
 * `id` seeds the diffusion branch; `caption` null uses the configured prompt text.
 *
 * # Safety
 * `pixels` must point to `height * width * 3` bytes; strings must be NUL-terminated or null where allowed.
 */
S2sStatus s2s_pipeline_run(const S2sPipeline *pipe,
                           const char *id,
                           const uint8_t *pixels,
                           size_t height,
                           size_t width,
                           const char *caption,
                           S2sOutputs **out);

/**
 * Borrowed view of one output (`S2S_OUTPUT_*`); null for an unknown index. Owned by `outputs`.
 *
 * # Safety
 * `outputs` must come from this library or be null.
 */
const S2sImage *s2s_outputs_get(const S2sOutputs *outputs, uint32_t which);

/**
 * # Safety
 * `outputs` must come from this library or be null; it must not be used afterwards.
 */
void s2s_outputs_free(S2sOutputs *outputs);

/**
 * # Safety
 * `img` must be a live image pointer or null (returns 0).
 */
size_t s2s_image_width(const S2sImage *img);

/**
 * # Safety
 * `img` must be a live image pointer or null (returns 0).
 */
size_t s2s_image_height(const S2sImage *img);

/**
 * Interleaved RGB bytes, `height * width * 3` long; null for a null image.
 *
 * # Safety
 * `img` must be a live image pointer or null.
 */
const uint8_t *s2s_image_data(const S2sImage *img);

/**
 * Scores a split (`"train"` or `"test"`) and writes the report files into `out_dir`.
 *
 * # Safety
 * `pipe` must come from this library; strings must be NUL-terminated; `out` must be valid.
 */
S2sStatus s2s_evaluate(const S2sPipeline *pipe,
                       const char *split,
                       const char *out_dir,
                       S2sMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAT2STREET_H */

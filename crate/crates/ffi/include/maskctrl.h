/* C interface of the maskctrl customization engine.
 * Generated by cbindgen; do not edit by hand. */

#ifndef MASKCTRL_H
#define MASKCTRL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes, aligned with the CLI exit codes.
 */
typedef enum McStatus {
  McStatus_Ok = 0,
  /**
   * Invalid arguments or configuration.
   */
  McStatus_Config = 2,
  /**
   * Subject localization failed.
   */
  McStatus_Localization = 3,
  /**
   * Any other runtime failure.
   */
  McStatus_Runtime = 4,
  /**
   * A required pointer argument was null.
   */
  McStatus_NullArgument = 5,
  /**
   * A string argument was not valid UTF-8.
   */
  McStatus_InvalidUtf8 = 6,
} McStatus;

/**
 * Opaque engine: a loaded denoiser plus its noise schedule.
 */
typedef struct McEngine McEngine;

/**
 * Plain-data control schedule (step windows and layer thresholds).
 */
typedef struct McSchedule {
  uint32_t s_gi;
  uint32_t e_gi;
  uint32_t s_lq;
  uint32_t e_lq;
  uint32_t layer_gi;
  uint32_t layer_lq;
  uint32_t total_steps;
} McSchedule;

/**
 * Per-run metrics; fields that do not apply are NaN.
 */
typedef struct McMetrics {
  double bg_mse;
  double fg_hist_subject;
  double fg_hist_original;
} McMetrics;

/**
 * Sampler settings for task runs.
 */
typedef struct McSampler {
  uint32_t steps;
  double guidance;
  double inversion_guidance;
  uint64_t seed;
} McSampler;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent error on this thread. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *mc_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *mc_version(void);

/**
 * Loads trained weights and prepares the default noise schedule.
 * On success writes a handle to `out`; release it with [`mc_engine_free`].
 *
 * # Safety
 * `weights_path` must be a valid NUL-terminated string and `out` a valid
 * pointer.
 */
enum McStatus mc_engine_load(const char *weights_path, struct McEngine **out);

/**
 * Releases an engine handle. Null is ignored.
 *
 * # Safety
 * `engine` must be a pointer returned by [`mc_engine_load`], not yet freed.
 */
void mc_engine_free(struct McEngine *engine);

/**
 * Number of trainable parameters of the loaded model.
 *
 * # Safety
 * `engine` must be a live handle or null.
 */
uint64_t mc_engine_param_count(const struct McEngine *engine);

/**
 * Fills `out` with a named preset ("swap-uniform" or "gen-uniform") scaled
 * to `total_steps`.
 *
 * # Safety
 * `name` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum McStatus mc_schedule_preset(const char *name, uint32_t total_steps, struct McSchedule *out);

/**
 * Validates the default schedule layout. On violation returns `Config` and
 * stores every violated clause in the error message.
 *
 * # Safety
 * `schedule` must be a valid pointer.
 */
enum McStatus mc_schedule_validate(const struct McSchedule *schedule);

/**
 * Runs a task described by a plain-text `key=value` config file (the same
 * format the CLI accepts). The engine's loaded model is used regardless of
 * the weights named in the file.
 *
 * # Safety
 * Pointer arguments must be valid; `metrics_out` may be null.
 */
enum McStatus mc_run_task_file(const struct McEngine *engine,
                               const char *config_path,
                               struct McMetrics *metrics_out);

/**
 * Replaces the object matching `edit_query` in the condition image with the
 * subject. `schedule` may be null for the swap preset. Output files are
 * written under `out_dir` with the `id` prefix.
 *
 * # Safety
 * Pointer arguments must be valid; `schedule` and `metrics_out` may be null.
 */
enum McStatus mc_run_swap(const struct McEngine *engine,
                          const char *subject_png,
                          const char *subject_query,
                          const char *condition_png,
                          const char *edit_query,
                          const char *out_dir,
                          const char *id,
                          const struct McSchedule *schedule,
                          struct McSampler sampler,
                          struct McMetrics *metrics_out);

/**
 * Generates the subject under a text prompt.
 *
 * # Safety
 * Pointer arguments must be valid; `schedule` and `metrics_out` may be null.
 */
enum McStatus mc_run_generate(const struct McEngine *engine,
                              const char *subject_png,
                              const char *subject_query,
                              const char *prompt,
                              const char *out_dir,
                              const char *id,
                              const struct McSchedule *schedule,
                              struct McSampler sampler,
                              struct McMetrics *metrics_out);

/**
 * Adds the subject into the region (file with an inclusive `x0 y0 x1 y1`
 * box) of the condition image.
 *
 * # Safety
 * Pointer arguments must be valid; `schedule` and `metrics_out` may be null.
 */
enum McStatus mc_run_add(const struct McEngine *engine,
                         const char *subject_png,
                         const char *subject_query,
                         const char *condition_png,
                         const char *region_file,
                         const char *out_dir,
                         const char *id,
                         const struct McSchedule *schedule,
                         struct McSampler sampler,
                         struct McMetrics *metrics_out);

/**
 * Morphologically dilates a binary mask PNG with the 3x3 kernel.
 *
 * # Safety
 * Path arguments must be valid NUL-terminated strings.
 */
enum McStatus mc_mask_dilate_png(const char *input_png,
                                 const char *output_png,
                                 uint32_t iterations);

/**
 * Writes a synthetic benchmark (images, ground-truth masks, manifest) to
 * `out_dir`.
 *
 * # Safety
 * `out_dir` must be a valid NUL-terminated string.
 */
enum McStatus mc_synth_benchmark(const char *out_dir,
                                 uint32_t subjects,
                                 uint32_t conditions_per_subject,
                                 uint32_t prompts_per_subject,
                                 uint32_t complex_per_category,
                                 uint64_t seed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MASKCTRL_H */

#ifndef APKAM_H
#define APKAM_H

#include <stddef.h>

typedef enum ApkamMode {
  APKAM_MODE_PRACTICAL = 0,
  APKAM_MODE_PAPER = 1,
} ApkamMode;

typedef enum ApkamStatus {
  APKAM_STATUS_OK = 0,
  APKAM_STATUS_NULL_ARGUMENT = 1,
  APKAM_STATUS_INVALID = 2,
  APKAM_STATUS_NUMERICAL = 3,
  APKAM_STATUS_PANIC = 4,
} ApkamStatus;

/**
 * An invariant curve found by the KAM iteration.
 */
typedef struct ApkamCurve ApkamCurve;

/**
 * A twist map in standard form with its frequency context.
 */
typedef struct ApkamMap ApkamMap;

/**
 * Options of [`apkam_kam_run`]. Fill with [`apkam_kam_options_default`].
 */
typedef struct ApkamKamOptions {
  enum ApkamMode mode;
  /**
   * Conjugacy tolerance, practical mode only.
   */
  double tol;
  double r0;
  /**
   * Non-positive means the map window.
   */
  double s0;
  /**
   * Non-positive means the measured perturbation size.
   */
  double eps0;
  size_t max_stage;
  size_t samples;
} ApkamKamOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call on the same thread.
 */
const char *apkam_last_error(void);

/**
 * Library version as a static string.
 */
const char *apkam_version(void);

/**
 * Parses a map document with an embedded context and brings it to
 * standard form.
 *
 * # Safety
 * `json` must be a nul-terminated string and `out_map` writable.
 */
enum ApkamStatus apkam_map_from_json(const char *json, struct ApkamMap **out_map);

/**
 * # Safety
 * `map` must come from [`apkam_map_from_json`] and not be used afterwards.
 */
void apkam_map_free(struct ApkamMap *map);

/**
 * # Safety
 * `map` must be a live handle and `alpha` writable.
 */
enum ApkamStatus apkam_map_alpha(const struct ApkamMap *map, double *alpha);

/**
 * One step of the map.
 *
 * # Safety
 * `map` must be a live handle, `x_out` and `y_out` writable.
 */
enum ApkamStatus apkam_map_apply(const struct ApkamMap *map,
                                 double x,
                                 double y,
                                 double *x_out,
                                 double *y_out);

/**
 * # Safety
 * `opts` must be writable.
 */
enum ApkamStatus apkam_kam_options_default(struct ApkamKamOptions *opts);

/**
 * Runs the KAM iteration. `opts` may be null for the defaults.
 *
 * # Safety
 * `map` must be a live handle, `opts` null or readable, `out_curve`
 * writable.
 */
enum ApkamStatus apkam_kam_run(const struct ApkamMap *map,
                               const struct ApkamKamOptions *opts,
                               struct ApkamCurve **out_curve);

/**
 * # Safety
 * `curve` must come from [`apkam_kam_run`] and not be used afterwards.
 */
void apkam_curve_free(struct ApkamCurve *curve);

/**
 * Conjugacy residual recorded by the iteration.
 *
 * # Safety
 * `curve` must be a live handle and `residual` writable.
 */
enum ApkamStatus apkam_curve_residual(const struct ApkamCurve *curve, double *residual);

/**
 * # Safety
 * `curve` must be a live handle and `stages` writable.
 */
enum ApkamStatus apkam_curve_stages(const struct ApkamCurve *curve, size_t *stages);

/**
 * The curve point `(xi + u(xi), v(xi))`.
 *
 * # Safety
 * `curve` must be a live handle, `x` and `y` writable.
 */
enum ApkamStatus apkam_curve_point(const struct ApkamCurve *curve, double xi, double *x, double *y);

/**
 * Recomputes the largest conjugacy defect over `samples` points.
 *
 * # Safety
 * Both handles must be live and `residual` writable.
 */
enum ApkamStatus apkam_verify(const struct ApkamCurve *curve,
                              const struct ApkamMap *map,
                              size_t samples,
                              double *residual);

/**
 * Serializes the curve. Release the string with [`apkam_string_free`].
 *
 * # Safety
 * `curve` must be a live handle and `out_json` writable.
 */
enum ApkamStatus apkam_curve_to_json(const struct ApkamCurve *curve, char **out_json);

/**
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void apkam_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* APKAM_H */

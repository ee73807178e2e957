#ifndef SUNRISE_H
#define SUNRISE_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  SUNRISE_STATUS_OK = 0,
  SUNRISE_STATUS_NULL_ARGUMENT = 1,
  SUNRISE_STATUS_INVALID_UTF8 = 2,
  SUNRISE_STATUS_SYNTAX = 3,
  SUNRISE_STATUS_SCHEMA = 4,
  SUNRISE_STATUS_UNKNOWN_PARAMETER = 5,
  SUNRISE_STATUS_KIND_MISMATCH = 6,
  SUNRISE_STATUS_FILE_PARAM_INLINE_VALUE = 7,
  SUNRISE_STATUS_MISSING_UPLOAD = 8,
  SUNRISE_STATUS_SYSTEM_MISMATCH = 9,
  SUNRISE_STATUS_INVALID_ARGUMENT = 10,
  SUNRISE_STATUS_ILLEGAL_TRANSITION = 11,
  SUNRISE_STATUS_EMPTY_INPUT = 12,
  SUNRISE_STATUS_NON_POSITIVE = 13,
  SUNRISE_STATUS_PANIC = 14,
} SunriseStatus;

typedef enum {
  SUNRISE_PHASE_BUILD = 0,
  SUNRISE_PHASE_RUN = 1,
} SunrisePhase;

typedef enum {
  SUNRISE_PARAM_KIND_TEXT = 0,
  SUNRISE_PARAM_KIND_NUMBER = 1,
  SUNRISE_PARAM_KIND_FLAG = 2,
  SUNRISE_PARAM_KIND_FILE = 3,
} SunriseParamKind;

typedef enum {
  SUNRISE_STATE_CREATED = 0,
  SUNRISE_STATE_BUILDING = 1,
  SUNRISE_STATE_BUILT = 2,
  SUNRISE_STATE_BUILD_FAILED = 3,
  SUNRISE_STATE_RUNNING = 4,
  SUNRISE_STATE_COMPLETED = 5,
  SUNRISE_STATE_RUN_FAILED = 6,
  SUNRISE_STATE_ARCHIVED = 7,
} SunriseState;

typedef enum {
  SUNRISE_EVENT_BUILD_REQUESTED = 0,
  SUNRISE_EVENT_BUILD_SUCCEEDED = 1,
  SUNRISE_EVENT_BUILD_FAILED = 2,
  SUNRISE_EVENT_RUN_REQUESTED = 3,
  SUNRISE_EVENT_RUN_SUCCEEDED = 4,
  SUNRISE_EVENT_RUN_FAILED = 5,
  SUNRISE_EVENT_BUILD_PARAMS_CHANGED = 6,
  SUNRISE_EVENT_RUN_PARAMS_CHANGED = 7,
  SUNRISE_EVENT_ARCHIVE_REQUESTED = 8,
} SunriseEvent;

/**
 * Concrete parameter assignment.
 */
typedef struct SunriseSysCfg SunriseSysCfg;

/**
 * Parsed system definition.
 */
typedef struct SunriseSysDef SunriseSysDef;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *sunrise_last_error(void);

/**
 * Static, lowercase name of a status code.
 */
const char *sunrise_status_name(SunriseStatus status);

/**
 * Releases a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void sunrise_string_free(char *s);

/**
 * Parses a SysDef document.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
SunriseStatus sunrise_sysdef_parse(const char *json, SunriseSysDef **out);

/**
 * # Safety
 * `def` must come from [`sunrise_sysdef_parse`] and not be freed twice.
 */
void sunrise_sysdef_free(SunriseSysDef *def);

/**
 * Canonical JSON text of the definition.
 *
 * # Safety
 * `def` must be a live handle; `out` must be writable.
 */
SunriseStatus sunrise_sysdef_to_json(const SunriseSysDef *def, char **out);

/**
 * Checks the definition's invariants. `*out` receives a JSON array of
 * `{"field", "rule"}` objects, empty when the definition is valid.
 *
 * # Safety
 * `def` must be a live handle; `out` must be writable.
 */
SunriseStatus sunrise_sysdef_validate(const SunriseSysDef *def, char **out);

/**
 * Phase and kind of a declared parameter.
 *
 * # Safety
 * `def` must be a live handle; `name` NUL-terminated; outputs writable.
 */
SunriseStatus sunrise_sysdef_classify(const SunriseSysDef *def,
                                      const char *name,
                                      SunrisePhase *phase,
                                      SunriseParamKind *kind);

/**
 * Default configuration of a definition.
 *
 * # Safety
 * `def` must be a live handle; `out` must be writable.
 */
SunriseStatus sunrise_syscfg_derive(const SunriseSysDef *def, SunriseSysCfg **out);

/**
 * Parses a SysCfg document.
 *
 * # Safety
 * `json` must be NUL-terminated; `out` must be writable.
 */
SunriseStatus sunrise_syscfg_parse(const char *json, SunriseSysCfg **out);

/**
 * # Safety
 * `cfg` must come from this library and not be freed twice.
 */
void sunrise_syscfg_free(SunriseSysCfg *cfg);

/**
 * Canonical JSON text of the configuration.
 *
 * # Safety
 * `cfg` must be a live handle; `out` must be writable.
 */
SunriseStatus sunrise_syscfg_to_json(const SunriseSysCfg *cfg, char **out);

/**
 * Lists disagreements between `cfg` and `def` as a JSON array.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
SunriseStatus sunrise_syscfg_check(const SunriseSysCfg *cfg, const SunriseSysDef *def, char **out);

/**
 * Applies a flat JSON object of overrides, all or nothing. The input
 * handle is left untouched; `*out` receives a new configuration.
 *
 * # Safety
 * Handles must be live; `overrides_json` NUL-terminated; `out` writable.
 */
SunriseStatus sunrise_syscfg_apply_overrides(const SunriseSysCfg *cfg,
                                             const SunriseSysDef *def,
                                             const char *overrides_json,
                                             SunriseSysCfg **out);

/**
 * Renders `syscfg.json` with file parameters rewritten to the paths in
 * `staged_json`, a JSON object of parameter name to workspace path.
 *
 * # Safety
 * `cfg` must be live; `staged_json` NUL-terminated or NULL for none;
 * `out` writable.
 */
SunriseStatus sunrise_syscfg_materialize(const SunriseSysCfg *cfg,
                                         const char *staged_json,
                                         char **out);

/**
 * Looks up the state table. Illegal pairs return
 * `SUNRISE_STATUS_ILLEGAL_TRANSITION` and leave `*next` unchanged.
 *
 * # Safety
 * `next` must be writable.
 */
SunriseStatus sunrise_transition(SunriseState state, SunriseEvent event, SunriseState *next);

/**
 * Geometric mean of `len` positive finite metrics.
 *
 * # Safety
 * `metrics` must point to `len` readable doubles; `out` must be writable.
 */
SunriseStatus sunrise_aggregate_score(const double *metrics, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SUNRISE_H */

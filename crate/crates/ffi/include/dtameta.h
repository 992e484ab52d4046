#ifndef DTAMETA_H
#define DTAMETA_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code of every fallible call.
 */
typedef enum DtaStatus {
  DTA_STATUS_OK = 0,
  DTA_STATUS_NULL_POINTER = 1,
  DTA_STATUS_INVALID_UTF8 = 2,
  DTA_STATUS_INVALID_DATA = 3,
  DTA_STATUS_INVALID_CONFIG = 4,
  DTA_STATUS_RUNTIME = 5,
  DTA_STATUS_NOT_FOUND = 6,
  DTA_STATUS_PANIC = 7,
} DtaStatus;

/**
 * A parsed study table.
 */
typedef struct DtaDataset DtaDataset;

/**
 * A completed analysis.
 */
typedef struct DtaResult DtaResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or NULL. Valid until the next
 * call into the library from the same thread.
 */
const char *dta_last_error(void);

/**
 * Library version as a static string.
 */
const char *dta_version(void);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library.
 */
void dta_string_free(char *s);

/**
 * Parses CSV text into a dataset handle.
 *
 * # Safety
 * `csv` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DtaStatus dta_dataset_parse(const char *csv, struct DtaDataset **out);

/**
 * Number of studies, or 0 for NULL.
 *
 * # Safety
 * `ds` must be NULL or a live dataset handle.
 */
size_t dta_dataset_len(const struct DtaDataset *ds);

/**
 * # Safety
 * `ds` must be NULL or a handle from `dta_dataset_parse`, freed once.
 */
void dta_dataset_free(struct DtaDataset *ds);

/**
 * Runs an analysis described by a JSON configuration. Blocks until done.
 *
 * # Safety
 * `ds` must be a live dataset handle, `config_json` a NUL-terminated string
 * and `out` a valid pointer.
 */
enum DtaStatus dta_analysis_run(const struct DtaDataset *ds,
                                const char *config_json,
                                struct DtaResult **out);

/**
 * Loads a result from its JSON form.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DtaStatus dta_result_parse(const char *json, struct DtaResult **out);

/**
 * Result as JSON, identical to the CLI and service output.
 *
 * # Safety
 * `res` must be a live result handle and `out` a valid pointer.
 */
enum DtaStatus dta_result_json(const struct DtaResult *res, char **out);

/**
 * Posterior median of a named quantity. `group` selects a subgroup fit and
 * may be NULL.
 *
 * # Safety
 * `res` must be a live result handle, `name` a NUL-terminated string, `group`
 * NULL or a NUL-terminated string, and `out` a valid pointer.
 */
enum DtaStatus dta_result_median(const struct DtaResult *res,
                                 const char *group,
                                 const char *name,
                                 double *out);

/**
 * 1 when every convergence gate passed, 0 otherwise (or for NULL).
 *
 * # Safety
 * `res` must be NULL or a live result handle.
 */
int32_t dta_result_passes(const struct DtaResult *res);

/**
 * # Safety
 * `res` must be NULL or a handle from this library, freed once.
 */
void dta_result_free(struct DtaResult *res);

/**
 * Renders a plot with default options. `kind` is "sroc" or "forest";
 * `format` is "svg" or "json". `res` may be NULL for "forest".
 *
 * # Safety
 * `ds` must be a live dataset handle, `res` NULL or a live result handle,
 * `kind` and `format` NUL-terminated strings and `out` a valid pointer.
 */
enum DtaStatus dta_render(const struct DtaDataset *ds,
                          const struct DtaResult *res,
                          const char *kind,
                          const char *format,
                          char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DTAMETA_H */

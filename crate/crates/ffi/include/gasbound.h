#ifndef GASBOUND_H
#define GASBOUND_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum GbStatus {
  GB_STATUS_OK = 0,
  GB_STATUS_NULL_POINTER = 1,
  GB_STATUS_INVALID_INPUT = 2,
  GB_STATUS_INVALID_UTF8 = 3,
  GB_STATUS_OUT_OF_RANGE = 4,
  GB_STATUS_INTERNAL = 5,
} GbStatus;

/**
 * Analysis settings.
 */
typedef struct GbAnalyzer GbAnalyzer;

/**
 * Result of analyzing one contract.
 */
typedef struct GbReport GbReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a
 * successful one. Valid until the next call on the same thread.
 */
const char *gb_last_error_message(void);

/**
 * Library version, static.
 */
const char *gb_version(void);

/**
 * New analyzer with the default schedule and a 60 s timeout. Free with
 * [`gb_analyzer_free`].
 */
struct GbAnalyzer *gb_analyzer_new(void);

/**
 * # Safety
 * `a` must come from [`gb_analyzer_new`] and not be used afterwards.
 */
void gb_analyzer_free(struct GbAnalyzer *a);

/**
 * Timeout per function and per bound, in seconds.
 *
 * # Safety
 * `a` must be a live analyzer.
 */
enum GbStatus gb_analyzer_set_timeout(struct GbAnalyzer *a, uint64_t seconds);

/**
 * Analyzes hex bytecode (an optional `0x` prefix and whitespace are
 * allowed). On success `*out` holds a report to free with
 * [`gb_report_free`].
 *
 * # Safety
 * `a` must be a live analyzer, `hex` a NUL-terminated string and `out`
 * writable.
 */
enum GbStatus gb_analyze_hex(const struct GbAnalyzer *a, const char *hex, struct GbReport **out);

/**
 * Analyzes raw bytecode.
 *
 * # Safety
 * `data` must point to `len` readable bytes (or be null with `len` 0).
 */
enum GbStatus gb_analyze_bytes(const struct GbAnalyzer *a,
                               const uint8_t *data,
                               uintptr_t len,
                               struct GbReport **out);

/**
 * # Safety
 * `r` must come from an analyze call and not be used afterwards.
 */
void gb_report_free(struct GbReport *r);

/**
 * # Safety
 * `r` must be a live report and `out` writable.
 */
enum GbStatus gb_report_function_count(const struct GbReport *r, uintptr_t *out);

/**
 * Whether every function got both bounds.
 *
 * # Safety
 * `r` must be a live report and `out` writable.
 */
enum GbStatus gb_report_all_bounded(const struct GbReport *r, bool *out);

/**
 * Function label: `0x` + selector, `fallback` or `contract`.
 *
 * # Safety
 * `r` must be a live report and `out` writable.
 */
enum GbStatus gb_report_function_label(const struct GbReport *r, uintptr_t i, char **out);

/**
 * Outcome class of the opcode (`memory` false) or memory bound, such as
 * `constant`, `parametric` or `termination_unknown`.
 *
 * # Safety
 * `r` must be a live report and `out` writable.
 */
enum GbStatus gb_report_outcome_class(const struct GbReport *r,
                                      uintptr_t i,
                                      bool memory,
                                      char **out);

/**
 * The bound rendered as text, or a description of why there is none.
 *
 * # Safety
 * `r` must be a live report and `out` writable.
 */
enum GbStatus gb_report_bound_text(const struct GbReport *r, uintptr_t i, bool memory, char **out);

/**
 * Evaluates a bound with parameters `names[k] = values[k]`; missing
 * parameters are 0. The result is rounded up. Fails with
 * `InvalidInput` when the function has no bound and `OutOfRange` when
 * the value does not fit.
 *
 * # Safety
 * `names` and `values` must each hold `n` entries (or be null with `n`
 * 0); each name is NUL-terminated.
 */
enum GbStatus gb_report_eval_bound(const struct GbReport *r,
                                   uintptr_t i,
                                   bool memory,
                                   const char *const *names,
                                   const uint64_t *values,
                                   uintptr_t n,
                                   uint64_t *out);

/**
 * The report as a JSON document with timings zeroed.
 *
 * # Safety
 * `r` must be a live report and `out` writable.
 */
enum GbStatus gb_report_json(const struct GbReport *r, char **out);

/**
 * # Safety
 * `s` must come from this library, or be null.
 */
void gb_string_free(char *s);

/**
 * Memory expansion cost of `words` active words.
 *
 * # Safety
 * `out` must be writable.
 */
enum GbStatus gb_mem_cost(uint64_t words, uint64_t *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* GASBOUND_H */

#ifndef TEECHAIN_H
#define TEECHAIN_H

/* Generated by cbindgen from crates/ffi. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes. Zero is success.
 */
typedef enum TcStatus {
  TC_STATUS_OK = 0,
  TC_STATUS_NULL_POINTER = 1,
  TC_STATUS_INVALID_UTF8 = 2,
  TC_STATUS_SCENARIO_INVALID = 3,
  TC_STATUS_ORACLE_DIVERGENCE = 4,
  TC_STATUS_PROTOCOL = 5,
  TC_STATUS_PARAM_OUT_OF_RANGE = 6,
  TC_STATUS_UNKNOWN_SCHEME = 7,
  TC_STATUS_INDEX_OUT_OF_RANGE = 8,
} TcStatus;

/**
 * Result of one scenario run.
 */
typedef struct TcRun TcRun;

/**
 * Final balances of one user. `name` is owned by the run handle.
 */
typedef struct TcUserOutcome {
  const char *name;
  bool honest;
  uint64_t ledger;
  uint64_t ideal;
  int64_t perceived;
} TcUserOutcome;

/**
 * Formula parameters; see `tc_cost_params_default`.
 */
typedef struct TcCostParams {
  int64_t d;
  int64_t i;
  int64_t p;
  int64_t n;
  int64_t n1;
  int64_t n2;
  int64_t m1;
  int64_t m2;
} TcCostParams;

/**
 * An exact rational `num / den` with `den > 0`.
 */
typedef struct TcRational {
  int64_t num;
  int64_t den;
} TcRational;

/**
 * Per-channel transactions and cost of a bilateral and a unilateral close.
 */
typedef struct TcCostRow {
  struct TcRational bilateral_txs;
  struct TcRational bilateral_cost;
  struct TcRational unilateral_txs;
  struct TcRational unilateral_cost;
} TcCostRow;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or an empty string. Valid
 * until the next failing call on the same thread.
 */
const char *tc_last_error(void);

/**
 * Runs a JSON scenario. On success `*out` receives a handle even when the
 * differential check failed; query it with `tc_run_passed`.
 *
 * # Safety
 * `scenario_json` is a valid nul-terminated string and `out` is writable.
 */
enum TcStatus tc_run_scenario(const char *scenario_json, struct TcRun **out);

/**
 * Releases a run handle. Null is ignored.
 *
 * # Safety
 * `run` is null or a handle from `tc_run_scenario` not yet freed.
 */
void tc_run_free(struct TcRun *run);

/**
 * Whether every honest user ended with at least what the oracle owed it.
 *
 * # Safety
 * `run` is null or a live handle.
 */
bool tc_run_passed(const struct TcRun *run);

/**
 * Event trace as JSON lines, or null for a null handle.
 *
 * # Safety
 * `run` is null or a live handle.
 */
const char *tc_run_events(const struct TcRun *run);

/**
 * Ledger confirmations as JSON lines, or null for a null handle.
 *
 * # Safety
 * `run` is null or a live handle.
 */
const char *tc_run_ledger(const struct TcRun *run);

/**
 * Per-channel cost report as CSV, or null for a null handle.
 *
 * # Safety
 * `run` is null or a live handle.
 */
const char *tc_run_cost_csv(const struct TcRun *run);

/**
 * Number of users in the run, or zero for a null handle.
 *
 * # Safety
 * `run` is null or a live handle.
 */
size_t tc_run_user_count(const struct TcRun *run);

/**
 * Copies the outcome of user `index` into `*out`.
 *
 * # Safety
 * `run` is null or a live handle and `out` is writable.
 */
enum TcStatus tc_run_user(const struct TcRun *run, size_t index, struct TcUserOutcome *out);

struct TcCostParams tc_cost_params_default(void);

/**
 * Evaluates the closed-form cost row of `scheme` ("ln", "dmc", "sfmc" or
 * "teechain") at `params`.
 *
 * # Safety
 * `scheme` is a valid nul-terminated string; `params` is readable and
 * `out` writable.
 */
enum TcStatus tc_cost_formula(const char *scheme,
                              const struct TcCostParams *params,
                              struct TcCostRow *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TEECHAIN_H */

#ifndef BUBBLESCOPE_H
#define BUBBLESCOPE_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Synthetic market with ground truth.
 */
typedef struct bs_market bs_market;

/**
 * Pipeline bound to a configuration and an artifacts directory.
 */
typedef struct bs_pipeline bs_pipeline;

typedef int32_t BsStatus;

/**
 * First-digit test result.
 */
typedef struct bs_benford_result {
  double observed[9];
  double expected[9];
  double chi2;
  double p_value;
  size_t n;
} bs_benford_result;

#define BS_OK 0

#define BS_ERR_NULL -1

#define BS_ERR_UTF8 -2

#define BS_ERR_CONFIG -3

#define BS_ERR_IO -4

#define BS_ERR_INVALID -5

#define BS_ERR_MISSING_STAGE -6

#define BS_ERR_INFEASIBLE -7

#define BS_ERR_NUMERIC -8

#define BS_ERR_STAGE -9

#define BS_ERR_PANIC -99

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last error on this thread, or null. Valid until the next
 * failing call on the same thread.
 */
const char *bs_last_error(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *bs_version(void);

/**
 * Generates a synthetic market. `config_toml` may be null for defaults.
 *
 * # Safety
 * `config_toml` must be null or a nul-terminated string; `out` must be a
 * valid pointer.
 */
BsStatus bs_market_generate(const char *config_toml, struct bs_market **out);

/**
 * Writes trades, funding, categories, wallet transactions and ground truth.
 *
 * # Safety
 * `market` must come from [`bs_market_generate`]; `dir` must be a
 * nul-terminated string.
 */
BsStatus bs_market_write(const struct bs_market *market, const char *dir);

/**
 * Number of raw transfers, or 0 for a null handle.
 *
 * # Safety
 * `market` must be null or come from [`bs_market_generate`].
 */
size_t bs_market_transfer_count(const struct bs_market *market);

/**
 * Number of planted run-up events, or 0 for a null handle.
 *
 * # Safety
 * `market` must be null or come from [`bs_market_generate`].
 */
size_t bs_market_event_count(const struct bs_market *market);

/**
 * # Safety
 * `market` must be null or come from [`bs_market_generate`] and not be
 * freed twice.
 */
void bs_market_free(struct bs_market *market);

/**
 * Creates a pipeline. `config_toml` may be null for defaults.
 *
 * # Safety
 * String arguments must be null or nul-terminated; `out` must be valid.
 */
BsStatus bs_pipeline_new(const char *config_toml, const char *out_dir, struct bs_pipeline **out);

/**
 * Runs one stage by name (`ingest`, `panel`, `detect`, `wash`, `agents`,
 * `regress`, `backtest`).
 *
 * # Safety
 * `pipeline` must come from [`bs_pipeline_new`]; `stage` must be a
 * nul-terminated string.
 */
BsStatus bs_pipeline_run_stage(struct bs_pipeline *pipeline, const char *stage);

/**
 * Runs every configured stage and writes `manifest.json`.
 *
 * # Safety
 * `pipeline` must come from [`bs_pipeline_new`].
 */
BsStatus bs_pipeline_run(struct bs_pipeline *pipeline);

/**
 * # Safety
 * `pipeline` must be null or come from [`bs_pipeline_new`] and not be freed
 * twice.
 */
void bs_pipeline_free(struct bs_pipeline *pipeline);

/**
 * Benford first-digit test on `n` values.
 *
 * # Safety
 * `values` must point to `n` doubles; `out` must be valid.
 */
BsStatus bs_benford(const double *values, size_t n, struct bs_benford_result *out);

/**
 * Hill power-law density exponent over the top `tail_fraction` of values.
 *
 * # Safety
 * `values` must point to `n` doubles; `alpha` must be valid.
 */
BsStatus bs_powerlaw_alpha(const double *values, size_t n, double tail_fraction, double *alpha);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BUBBLESCOPE_H */

#ifndef POLYBUBBLE_H
#define POLYBUBBLE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum PbStatus {
  PB_STATUS_OK = 0,
  PB_STATUS_NULL_POINTER = 1,
  PB_STATUS_INVALID_INPUT = 2,
  PB_STATUS_CONFIG = 3,
  PB_STATUS_DOMAIN = 4,
  PB_STATUS_HALF_BUBBLE = 5,
  PB_STATUS_QUADRATURE = 6,
  PB_STATUS_ILL_CONDITIONED = 7,
  PB_STATUS_SOLVER = 8,
  PB_STATUS_DEGREE = 9,
  PB_STATUS_IO = 10,
  PB_STATUS_BUFFER_TOO_SMALL = 11,
  PB_STATUS_PANIC = 12,
} PbStatus;

/**
 * Residual decomposition selector.
 */
typedef enum PbResidualMode {
  PB_RESIDUAL_MODE_CANONICAL = 0,
  PB_RESIDUAL_MODE_PRINTED = 1,
  PB_RESIDUAL_MODE_CORRECTED = 2,
} PbResidualMode;

/**
 * Polygonal ansatz built from a configuration.
 */
typedef struct PbAnsatz PbAnsatz;

/**
 * Parsed and validated run configuration.
 */
typedef struct PbConfig PbConfig;

/**
 * Synchronized coupling data (beta, kappa, s).
 */
typedef struct PbCoupling PbCoupling;

/**
 * Bubble constants for one dimension.
 */
typedef struct PbConstants {
  double b_w;
  double c_w;
  double b_rel_error;
  double c_rel_error;
  double b_u;
  double b_v;
} PbConstants;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *pb_version(void);

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated).
 * Writes the required size including the NUL to `needed` when non-null.
 *
 * # Safety
 * `buf` must point to `len` writable bytes or be null with `len == 0`.
 */
enum PbStatus pb_last_error(char *buf, size_t len, size_t *needed);

/**
 * Coupling with an explicit kappa root.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum PbStatus pb_coupling_new(uint32_t n, double beta, double kappa, struct PbCoupling **out);

/**
 * Coupling on the symmetric root kappa = 1.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum PbStatus pb_coupling_symmetric(uint32_t n, double beta, struct PbCoupling **out);

/**
 * Reads kappa and s of a coupling.
 *
 * # Safety
 * `c` must be a live handle; `kappa` and `s` must be valid or null.
 */
enum PbStatus pb_coupling_get(const struct PbCoupling *c, double *kappa, double *s);

/**
 * # Safety
 * `c` must be null or a handle from `pb_coupling_new`/`pb_coupling_symmetric`, not yet freed.
 */
void pb_coupling_free(struct PbCoupling *c);

/**
 * Positive kappa roots in [lo, hi]. Writes at most `cap` roots and the total to `count`.
 *
 * # Safety
 * `roots` must point to `cap` writable doubles (or be null with `cap == 0`); `count` must be valid.
 */
enum PbStatus pb_solve_kappa(uint32_t n,
                             double beta,
                             double lo,
                             double hi,
                             double *roots,
                             size_t cap,
                             size_t *count);

/**
 * Closed-form and quadrature bubble constants for a coupling.
 *
 * # Safety
 * `c` must be a live handle and `out` valid.
 */
enum PbStatus pb_constants(const struct PbCoupling *c, struct PbConstants *out);

/**
 * Closed-form interaction sum lambda^{N-1} sum_j |x_1 - x_j|^{2-N}.
 *
 * # Safety
 * `out` must be valid.
 */
enum PbStatus pb_interaction_sum(uint32_t k, double rbar, double lambda, uint32_t n, double *out);

/**
 * Parses a JSON run configuration.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid handle slot.
 */
enum PbStatus pb_config_from_json(const char *json, struct PbConfig **out);

/**
 * Writes the 64-character configuration hash plus NUL into `buf` (65 bytes).
 *
 * # Safety
 * `cfg` must be a live handle and `buf` must point to `len` writable bytes.
 */
enum PbStatus pb_config_hash(const struct PbConfig *cfg, char *buf, size_t len);

/**
 * # Safety
 * `cfg` must be null or a handle from `pb_config_from_json`, not yet freed.
 */
void pb_config_free(struct PbConfig *cfg);

/**
 * Runs a CLI command ("constants", "residual-scaling", "reduce", "correct",
 * "pohozaev", "full-audit") and writes its reports into `out_dir`. The CLI
 * exit code is stored in `exit_code`.
 *
 * # Safety
 * `cfg` must be a live handle; `command` and `out_dir` NUL-terminated strings; `exit_code` valid.
 */
enum PbStatus pb_run_command(const struct PbConfig *cfg,
                             const char *command,
                             const char *out_dir,
                             int32_t *exit_code);

/**
 * Ansatz with k bubbles at concentration lambda, using the configuration's
 * coupling, potential, center and cutoff. lambda <= 0 selects the canonical
 * window t k^{(N-2)/(N-4)} with t from the configuration.
 *
 * # Safety
 * `cfg` must be a live handle and `out` a valid handle slot.
 */
enum PbStatus pb_ansatz_new(const struct PbConfig *cfg,
                            uint32_t k,
                            double lambda,
                            struct PbAnsatz **out);

/**
 * Ansatz W_1 at a point y of length N.
 *
 * # Safety
 * `a` must be a live handle, `y` must point to `len` doubles, `out` valid.
 */
enum PbStatus pb_ansatz_eval(const struct PbAnsatz *a, const double *y, size_t len, double *out);

/**
 * Residual pair (R_1, R_2) of the ansatz at y.
 *
 * # Safety
 * `a` must be a live handle, `y` must point to `len` doubles, `r1` and `r2` valid.
 */
enum PbStatus pb_ansatz_residual(const struct PbAnsatz *a,
                                 const double *y,
                                 size_t len,
                                 enum PbResidualMode mode,
                                 double *r1,
                                 double *r2);

/**
 * # Safety
 * `a` must be null or a handle from `pb_ansatz_new`, not yet freed.
 */
void pb_ansatz_free(struct PbAnsatz *a);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POLYBUBBLE_H */

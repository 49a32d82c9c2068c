#ifndef MPEM_H
#define MPEM_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Return code of every fallible call.
typedef enum MpemStatus {
  MPEM_STATUS_OK = 0,
  MPEM_STATUS_NULL_POINTER = 1,
  MPEM_STATUS_DIMENSION = 2,
  MPEM_STATUS_INVALID_ARGUMENT = 3,
  MPEM_STATUS_NUMERICAL = 4,
  MPEM_STATUS_IO = 5,
  MPEM_STATUS_PANIC = 6,
} MpemStatus;

// Values of the `kind` argument of [`mpem_operator_generate`].
typedef enum MpemMatrixKind {
  MPEM_MATRIX_KIND_WHITE = 0,
  MPEM_MATRIX_KIND_ROW_CORRELATED = 1,
  MPEM_MATRIX_KIND_COL_CORRELATED = 2,
  MPEM_MATRIX_KIND_STRUCTURALLY_RANDOM = 3,
} MpemMatrixKind;

typedef struct MpemOperator MpemOperator;

typedef struct MpemResult MpemResult;

typedef struct MpemTree MpemTree;

// Prior tuning constants.
typedef struct MpemParams {
  double gamma2;
  double eps2;
  double p_root;
  double p_high;
  double p_low;
} MpemParams;

// EM stopping rule and variance grid.
typedef struct MpemEmConfig {
  double delta;
  size_t max_iters;
  size_t grid_k;
  double grid_d;
  size_t refine_steps;
} MpemEmConfig;

// Summary of one evaluated variance.
typedef struct MpemGridPoint {
  double sigma2;
  double log_marginal;
  size_t iterations;
  bool converged;
} MpemGridPoint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *mpem_version(void);

// Copies the calling thread's last error message into `buf` (truncated and
// NUL-terminated) and returns the full message length plus one. Returns 0
// when the last call succeeded.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t mpem_last_error_message(char *buf, size_t len);

// Reconstruction defaults `gamma2 = 1000, eps2 = 0.1, p_root = p_high = 0.2, p_low = 1e-5`.
struct MpemParams mpem_params_default(void);

// Small-scale defaults: `delta = 1e-10`, 16 grid points with ratio 2.
struct MpemEmConfig mpem_em_config_default(void);

// # Safety
// `params` and `out` must be valid pointers.
enum MpemStatus mpem_expected_high_fraction(const struct MpemParams *params,
                                            size_t levels,
                                            double *out);

// Wavelet tree of a `rows x cols` coefficient grid with `levels` levels.
//
// # Safety
// `out` must be a valid pointer; the handle is released with [`mpem_tree_free`].
enum MpemStatus mpem_tree_new(size_t rows, size_t cols, size_t levels, struct MpemTree **out);

// Number of coefficients, 0 for a null handle.
//
// # Safety
// `tree` must be null or a live handle.
size_t mpem_tree_len(const struct MpemTree *tree);

// # Safety
// `tree` must be null or a handle not yet freed.
void mpem_tree_free(struct MpemTree *tree);

// Wraps the row-major `n x p` matrix `h` divided by its spectral norm,
// which is written to `norm` (measurements must be divided by it too).
//
// # Safety
// `h` must hold `n * p` values; `norm` may be null; `out` must be valid.
enum MpemStatus mpem_operator_from_matrix(const double *h,
                                          size_t n,
                                          size_t p,
                                          double *norm,
                                          struct MpemOperator **out);

// Random sensing operator with unit spectral norm; `kind` is an [`MpemMatrixKind`] value.
// `corr` is used by the correlated kinds; the structurally random kind
// synthesizes through the `levels`-level Haar transform, the Gaussian kinds
// act on coefficients directly.
//
// # Safety
// `out` must be a valid pointer.
enum MpemStatus mpem_operator_generate(uint32_t kind,
                                       double corr,
                                       size_t rows,
                                       size_t cols,
                                       size_t levels,
                                       size_t n,
                                       uint64_t seed,
                                       struct MpemOperator **out);

// # Safety
// `op` must be a live handle; `n` and `p` may be null.
enum MpemStatus mpem_operator_dims(const struct MpemOperator *op, size_t *n, size_t *p);

// `y = H x`.
//
// # Safety
// `x` must hold `p` values and `y` room for `n` values.
enum MpemStatus mpem_operator_forward(const struct MpemOperator *op,
                                      const double *x,
                                      size_t p,
                                      double *y,
                                      size_t n);

// `x = H^T y`.
//
// # Safety
// `y` must hold `n` values and `x` room for `p` values.
enum MpemStatus mpem_operator_adjoint(const struct MpemOperator *op,
                                      const double *y,
                                      size_t n,
                                      double *x,
                                      size_t p);

// # Safety
// `op` must be null or a handle not yet freed.
void mpem_operator_free(struct MpemOperator *op);

// Draws states and coefficients from the prior; `q` receives 0/1 bytes.
//
// # Safety
// `s` and `q` must have room for `p` entries.
enum MpemStatus mpem_sample_prior(const struct MpemTree *tree,
                                  const struct MpemParams *params,
                                  double sigma2,
                                  uint64_t seed,
                                  double *s,
                                  uint8_t *q,
                                  size_t p);

// `y = H s + w` with `w ~ N(0, sigma2 I)`.
//
// # Safety
// `s` must hold `p` values and `y` room for `n` values.
enum MpemStatus mpem_simulate_measurements(const struct MpemOperator *op,
                                           const double *s,
                                           size_t p,
                                           double sigma2,
                                           uint64_t seed,
                                           double *y,
                                           size_t n);

// EM over the variance grid, selecting by marginal posterior.
//
// # Safety
// Handles and parameter pointers must be valid, `y` must hold `n` values;
// the result is released with [`mpem_result_free`].
enum MpemStatus mpem_grid_search(const struct MpemOperator *op,
                                 const struct MpemTree *tree,
                                 const double *y,
                                 size_t n,
                                 const struct MpemParams *params,
                                 const struct MpemEmConfig *config,
                                 struct MpemResult **out);

// A single EM run at fixed `sigma2` from zero, packaged as a one-point result.
//
// # Safety
// As [`mpem_grid_search`].
enum MpemStatus mpem_run_em(const struct MpemOperator *op,
                            const struct MpemTree *tree,
                            const double *y,
                            size_t n,
                            double sigma2,
                            const struct MpemParams *params,
                            const struct MpemEmConfig *config,
                            struct MpemResult **out);

// Number of evaluated variances, 0 for a null handle.
//
// # Safety
// `res` must be null or a live handle.
size_t mpem_result_num_points(const struct MpemResult *res);

// Index of the selected variance.
//
// # Safety
// `res` must be a live handle and `out` valid.
enum MpemStatus mpem_result_selected(const struct MpemResult *res, size_t *out);

// # Safety
// `res` must be a live handle and `out` valid.
enum MpemStatus mpem_result_point(const struct MpemResult *res,
                                  size_t index,
                                  struct MpemGridPoint *out);

// Copies the selected coefficient estimate into `s` (`p` values).
//
// # Safety
// `s` must have room for `p` values.
enum MpemStatus mpem_result_coefficients(const struct MpemResult *res, double *s, size_t p);

// Copies the selected states into `q` as 0/1 bytes.
//
// # Safety
// `q` must have room for `p` bytes.
enum MpemStatus mpem_result_states(const struct MpemResult *res, uint8_t *q, size_t p);

// # Safety
// `res` must be null or a handle not yet freed.
void mpem_result_free(struct MpemResult *res);

// `||estimate - truth||^2 / ||truth||^2`.
//
// # Safety
// Both arrays must hold `len` values; `out` must be valid.
enum MpemStatus mpem_nmse(const double *estimate, const double *truth, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MPEM_H */

#ifndef FBSDE_LAB_H
#define FBSDE_LAB_H

/* Generated by cbindgen from fbsde-lab-capi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum FbsdeStatus {
  FbsdeStatus_Ok = 0,
  FbsdeStatus_NullPointer = 1,
  FbsdeStatus_InvalidArgument = 2,
  FbsdeStatus_NumericalFailure = 3,
  FbsdeStatus_BufferTooSmall = 4,
  FbsdeStatus_InternalPanic = 5,
} FbsdeStatus;

/**
 * Brownian ensemble handle.
 */
typedef struct FbsdeBrownian FbsdeBrownian;

/**
 * Decoupling field handle.
 */
typedef struct FbsdeField FbsdeField;

/**
 * Time grid handle.
 */
typedef struct FbsdeGrid FbsdeGrid;

/**
 * Problem handle.
 */
typedef struct FbsdeProblem FbsdeProblem;

/**
 * Solution ensemble handle.
 */
typedef struct FbsdeSolution FbsdeSolution;

/**
 * Solver options passed by value; obtain defaults from
 * `fbsde_solver_options_default` and adjust as needed.
 */
typedef struct FbsdeSolverOptions {
  double delta_scale;
  double picard_tol;
  size_t picard_max_iter;
  double spatial_center;
  double spatial_half_width;
  size_t spatial_nodes;
  size_t quadrature_nodes;
  double contraction_guard;
} FbsdeSolverOptions;

/**
 * Scalar affine coefficients: each map is `w_x x + w_y y + w_z z + w_0`.
 */
typedef struct FbsdeAffineScalar {
  double drift_x;
  double drift_y;
  double drift_z;
  double drift_0;
  double diffusion_x;
  double diffusion_y;
  double diffusion_z;
  double diffusion_0;
  double driver_x;
  double driver_y;
  double driver_z;
  double driver_0;
  double terminal_x;
  double terminal_0;
} FbsdeAffineScalar;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static C string.
 */
const char *fbsde_version(void);

/**
 * Default solver options.
 */
struct FbsdeSolverOptions fbsde_solver_options_default(void);

/**
 * Uniform time grid with `n_steps + 1` points on `[t0, t_end]`.
 *
 * # Safety
 * `out` must be a valid pointer; the handle must be released with
 * `fbsde_grid_free`.
 */
enum FbsdeStatus fbsde_grid_new(double t0, double t_end, size_t n_steps, struct FbsdeGrid **out);

/**
 * # Safety
 * `grid` must be a handle from `fbsde_grid_new`, not yet freed.
 */
void fbsde_grid_free(struct FbsdeGrid *grid);

/**
 * Seeded Brownian increments on a grid; identical inputs give identical
 * ensembles.
 *
 * # Safety
 * `grid` must be a live grid handle and `out` a valid pointer.
 */
enum FbsdeStatus fbsde_brownian_new(const struct FbsdeGrid *grid,
                                    size_t n_paths,
                                    uint64_t seed,
                                    struct FbsdeBrownian **out);

/**
 * # Safety
 * `brownian` must be a handle from `fbsde_brownian_new`, not yet freed.
 */
void fbsde_brownian_free(struct FbsdeBrownian *brownian);

/**
 * Linear example problem with constant profiles `a, b, c`: forward drift
 * `b y`, diffusion `c`, terminal `P(T) x`, and the matching driver so that
 * the backward component equals `P(t) X_t`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum FbsdeStatus fbsde_problem_example1(double a,
                                        double b,
                                        double c,
                                        double t0,
                                        double t_end,
                                        double xi,
                                        struct FbsdeProblem **out);

/**
 * Scalar affine problem from explicit coefficients.
 *
 * # Safety
 * `coefficients` and `out` must be valid pointers.
 */
enum FbsdeStatus fbsde_problem_affine(const struct FbsdeAffineScalar *coefficients,
                                      double t0,
                                      double t_end,
                                      double xi,
                                      struct FbsdeProblem **out);

/**
 * # Safety
 * `problem` must be a problem handle, not yet freed.
 */
void fbsde_problem_free(struct FbsdeProblem *problem);

/**
 * Backward induction of the decoupling field on the given grid.
 *
 * # Safety
 * All handles must be live; `out` must be a valid pointer.
 */
enum FbsdeStatus fbsde_field_build(const struct FbsdeProblem *problem,
                                   const struct FbsdeSolverOptions *options,
                                   const struct FbsdeGrid *grid,
                                   struct FbsdeField **out);

/**
 * Evaluates `u(t, x)`; `x` holds the forward state, `out` receives the
 * backward value (its length must equal the backward dimension).
 *
 * # Safety
 * `field` must be live; `x` and `out` must point to arrays of the stated
 * lengths.
 */
enum FbsdeStatus fbsde_field_eval(const struct FbsdeField *field,
                                  double t,
                                  const double *x,
                                  size_t x_len,
                                  double *out,
                                  size_t out_len);

/**
 * Largest spatial difference quotient over all time slices.
 *
 * # Safety
 * `field` must be live and `out` a valid pointer.
 */
enum FbsdeStatus fbsde_field_lipschitz_max(const struct FbsdeField *field, double *out);

/**
 * # Safety
 * `field` must be a field handle, not yet freed.
 */
void fbsde_field_free(struct FbsdeField *field);

/**
 * Euler-Maruyama simulation through the field.
 *
 * # Safety
 * All handles must be live; `out` must be a valid pointer.
 */
enum FbsdeStatus fbsde_solve(const struct FbsdeProblem *problem,
                             const struct FbsdeField *field,
                             const struct FbsdeBrownian *brownian,
                             struct FbsdeSolution **out);

/**
 * Number of simulated paths.
 *
 * # Safety
 * `solution` must be live and `out` a valid pointer.
 */
enum FbsdeStatus fbsde_solution_n_paths(const struct FbsdeSolution *solution, size_t *out);

/**
 * Copies one path of one component (0 = X, 1 = Y, 2 = Z) into `buffer`,
 * writing `(n_steps + 1) * dimension` values.
 *
 * # Safety
 * `solution` must be live; `buffer` must hold `buffer_len` doubles and
 * `written`, when non-null, receives the number of values copied.
 */
enum FbsdeStatus fbsde_solution_path(const struct FbsdeSolution *solution,
                                     uint32_t component,
                                     size_t path,
                                     double *buffer,
                                     size_t buffer_len,
                                     size_t *written);

/**
 * Mean of `|Y_T - Phi(X_T)|` over paths.
 *
 * # Safety
 * `solution` must be live and `out` a valid pointer.
 */
enum FbsdeStatus fbsde_solution_terminal_residual_mean(const struct FbsdeSolution *solution,
                                                       double *out);

/**
 * # Safety
 * `solution` must be a solution handle, not yet freed.
 */
void fbsde_solution_free(struct FbsdeSolution *solution);

/**
 * `K_p = upper^{1/p} (p/(p+1) + 2 lower^{-1/p} (2p-1)/(p-1))`; requires
 * `p > 1` and positive constants.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum FbsdeStatus fbsde_compute_kp(double p, double k_upper, double k_lower, double *out);

/**
 * Strict Lipschitz smallness inequality `K_p * L_sigma * K < 1`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum FbsdeStatus fbsde_gate_lipschitz(double kp, double l_sigma, double k, bool *out);

/**
 * Iterated interval-chaining constant `C -> 2C + C^2` with the final
 * `2^{p/2}` inflation; `saturated` reports overflow.
 *
 * # Safety
 * `value` and `saturated` must be valid pointers.
 */
enum FbsdeStatus fbsde_audit_constant_growth(double c1,
                                             double p,
                                             uint32_t k,
                                             double *value,
                                             bool *saturated);

/**
 * Value `x0^2 P(t0)` of the scalar state-feedback problem with constant
 * `A, B, Q, R, H`, by fourth-order backward integration of the Riccati
 * equation.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum FbsdeStatus fbsde_riccati_value(double a,
                                     double b,
                                     double q,
                                     double r,
                                     double h,
                                     double t0,
                                     double t_end,
                                     size_t n_steps,
                                     double x0,
                                     double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FBSDE_LAB_H */

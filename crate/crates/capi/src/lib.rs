//! C ABI for the FBSDE laboratory.
//!
//! Conventions: every constructor returns a status code and writes an opaque
//! handle through an out-pointer on success; handles are released with the
//! matching `*_free` function; `fbsde_lab.h` is generated by cbindgen from
//! this file. All functions are panic-safe at the boundary.

use std::ffi::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};

use fbsde_lab::lp::{audit_constant_growth, compute_kp, smallness_gates, KpInputs};
use fbsde_lab::lq::{riccati_oracle, LQSpec};
use fbsde_lab::model::FBSDEProblem;
use fbsde_lab::oracles::{example1_problem, Example1Params};
use fbsde_lab::solver::{
    build_decoupling_field, field_lipschitz_profile, solve_global, DecouplingField,
    SolutionEnsemble, SolverParams, SpatialGrid,
};
use fbsde_lab::stochastic::{build_grid, sample_brownian, BrownianEnsemble, TimeGrid};
use fbsde_lab::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FbsdeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NumericalFailure = 3,
    BufferTooSmall = 4,
    InternalPanic = 5,
}

fn status_of(err: &Error) -> FbsdeStatus {
    match err {
        Error::HorizonOrder { .. }
        | Error::ZeroSteps
        | Error::InvalidArgument(_)
        | Error::KpDomain(_)
        | Error::Config(_)
        | Error::IdenticalInitialConditions
        | Error::MismatchedNoise { .. }
        | Error::RestrictionViolation(_) => FbsdeStatus::InvalidArgument,
        _ => FbsdeStatus::NumericalFailure,
    }
}

fn guarded(body: impl FnOnce() -> FbsdeStatus) -> FbsdeStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => FbsdeStatus::InternalPanic,
    }
}

/// Time grid handle.
pub struct FbsdeGrid(TimeGrid);

/// Brownian ensemble handle.
pub struct FbsdeBrownian(BrownianEnsemble);

/// Problem handle.
pub struct FbsdeProblem(FBSDEProblem);

/// Decoupling field handle.
pub struct FbsdeField(DecouplingField);

/// Solution ensemble handle.
pub struct FbsdeSolution(SolutionEnsemble);

/// Solver options passed by value; obtain defaults from
/// `fbsde_solver_options_default` and adjust as needed.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FbsdeSolverOptions {
    pub delta_scale: f64,
    pub picard_tol: f64,
    pub picard_max_iter: usize,
    pub spatial_center: f64,
    pub spatial_half_width: f64,
    pub spatial_nodes: usize,
    pub quadrature_nodes: usize,
    pub contraction_guard: f64,
}

impl FbsdeSolverOptions {
    fn to_params(self) -> SolverParams {
        SolverParams {
            delta_scale: self.delta_scale,
            picard_tol: self.picard_tol,
            picard_max_iter: self.picard_max_iter,
            spatial_grid: SpatialGrid {
                center: self.spatial_center,
                half_width: self.spatial_half_width,
                n_nodes: self.spatial_nodes,
            },
            quadrature_nodes: self.quadrature_nodes,
            contraction_guard: self.contraction_guard,
        }
    }
}

/// Scalar affine coefficients: each map is `w_x x + w_y y + w_z z + w_0`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FbsdeAffineScalar {
    pub drift_x: f64,
    pub drift_y: f64,
    pub drift_z: f64,
    pub drift_0: f64,
    pub diffusion_x: f64,
    pub diffusion_y: f64,
    pub diffusion_z: f64,
    pub diffusion_0: f64,
    pub driver_x: f64,
    pub driver_y: f64,
    pub driver_z: f64,
    pub driver_0: f64,
    pub terminal_x: f64,
    pub terminal_0: f64,
}

/// Library version as a static C string.
#[no_mangle]
pub extern "C" fn fbsde_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Default solver options.
#[no_mangle]
pub extern "C" fn fbsde_solver_options_default() -> FbsdeSolverOptions {
    let params = SolverParams::default();
    FbsdeSolverOptions {
        delta_scale: params.delta_scale,
        picard_tol: params.picard_tol,
        picard_max_iter: params.picard_max_iter,
        spatial_center: params.spatial_grid.center,
        spatial_half_width: params.spatial_grid.half_width,
        spatial_nodes: params.spatial_grid.n_nodes,
        quadrature_nodes: params.quadrature_nodes,
        contraction_guard: params.contraction_guard,
    }
}

/// Uniform time grid with `n_steps + 1` points on `[t0, t_end]`.
///
/// # Safety
/// `out` must be a valid pointer; the handle must be released with
/// `fbsde_grid_free`.
#[no_mangle]
pub unsafe extern "C" fn fbsde_grid_new(
    t0: f64,
    t_end: f64,
    n_steps: usize,
    out: *mut *mut FbsdeGrid,
) -> FbsdeStatus {
    if out.is_null() {
        return FbsdeStatus::NullPointer;
    }
    guarded(|| match build_grid(t0, t_end, n_steps) {
        Ok(grid) => {
            unsafe { *out = Box::into_raw(Box::new(FbsdeGrid(grid))) };
            FbsdeStatus::Ok
        }
        Err(err) => status_of(&err),
    })
}

/// # Safety
/// `grid` must be a handle from `fbsde_grid_new`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fbsde_grid_free(grid: *mut FbsdeGrid) {
    if !grid.is_null() {
        drop(unsafe { Box::from_raw(grid) });
    }
}

/// Seeded Brownian increments on a grid; identical inputs give identical
/// ensembles.
///
/// # Safety
/// `grid` must be a live grid handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fbsde_brownian_new(
    grid: *const FbsdeGrid,
    n_paths: usize,
    seed: u64,
    out: *mut *mut FbsdeBrownian,
) -> FbsdeStatus {
    if grid.is_null() || out.is_null() {
        return FbsdeStatus::NullPointer;
    }
    let grid = unsafe { &(*grid).0 };
    guarded(|| match sample_brownian(grid, n_paths, seed) {
        Ok(ensemble) => {
            unsafe { *out = Box::into_raw(Box::new(FbsdeBrownian(ensemble))) };
            FbsdeStatus::Ok
        }
        Err(err) => status_of(&err),
    })
}

/// # Safety
/// `brownian` must be a handle from `fbsde_brownian_new`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fbsde_brownian_free(brownian: *mut FbsdeBrownian) {
    if !brownian.is_null() {
        drop(unsafe { Box::from_raw(brownian) });
    }
}

/// Linear example problem with constant profiles `a, b, c`: forward drift
/// `b y`, diffusion `c`, terminal `P(T) x`, and the matching driver so that
/// the backward component equals `P(t) X_t`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fbsde_problem_example1(
    a: f64,
    b: f64,
    c: f64,
    t0: f64,
    t_end: f64,
    xi: f64,
    out: *mut *mut FbsdeProblem,
) -> FbsdeStatus {
    if out.is_null() {
        return FbsdeStatus::NullPointer;
    }
    guarded(|| {
        let params = Example1Params::constant(a, b, c, t0, t_end, xi);
        match example1_problem(&params) {
            Ok(problem) => {
                unsafe { *out = Box::into_raw(Box::new(FbsdeProblem(problem))) };
                FbsdeStatus::Ok
            }
            Err(err) => status_of(&err),
        }
    })
}

/// Scalar affine problem from explicit coefficients.
///
/// # Safety
/// `coefficients` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn fbsde_problem_affine(
    coefficients: *const FbsdeAffineScalar,
    t0: f64,
    t_end: f64,
    xi: f64,
    out: *mut *mut FbsdeProblem,
) -> FbsdeStatus {
    if coefficients.is_null() || out.is_null() {
        return FbsdeStatus::NullPointer;
    }
    let c = unsafe { *coefficients };
    guarded(|| {
        let lipschitz = [
            (c.drift_x * c.drift_x + c.drift_y * c.drift_y + c.drift_z * c.drift_z).sqrt(),
            (c.driver_x * c.driver_x + c.driver_y * c.driver_y + c.driver_z * c.driver_z).sqrt(),
            (c.diffusion_x * c.diffusion_x + c.diffusion_y * c.diffusion_y).sqrt(),
            c.terminal_x.abs(),
        ]
        .into_iter()
        .fold(0.0, f64::max);
        let growth = lipschitz
            + [c.drift_0, c.diffusion_0, c.driver_0, c.terminal_0]
                .into_iter()
                .map(f64::abs)
                .fold(0.0, f64::max);
        let build = || -> Result<FBSDEProblem, Error> {
            let coefficients = fbsde_lab::model::CoefficientSet::new(
                std::sync::Arc::new(move |_, x, y, z| {
                    vec![c.drift_x * x[0] + c.drift_y * y[0] + c.drift_z * z[0] + c.drift_0]
                }),
                std::sync::Arc::new(move |_, x, y, z| {
                    vec![
                        c.diffusion_x * x[0]
                            + c.diffusion_y * y[0]
                            + c.diffusion_z * z[0]
                            + c.diffusion_0,
                    ]
                }),
                std::sync::Arc::new(move |_, x, y, z| {
                    vec![c.driver_x * x[0] + c.driver_y * y[0] + c.driver_z * z[0] + c.driver_0]
                }),
                std::sync::Arc::new(move |x| vec![c.terminal_x * x[0] + c.terminal_0]),
                growth,
                lipschitz,
                c.diffusion_z.abs(),
            )?;
            FBSDEProblem::new(coefficients, 1, 1, t0, t_end, vec![xi])
        };
        match build() {
            Ok(problem) => {
                unsafe { *out = Box::into_raw(Box::new(FbsdeProblem(problem))) };
                FbsdeStatus::Ok
            }
            Err(err) => status_of(&err),
        }
    })
}

/// # Safety
/// `problem` must be a problem handle, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fbsde_problem_free(problem: *mut FbsdeProblem) {
    if !problem.is_null() {
        drop(unsafe { Box::from_raw(problem) });
    }
}

/// Backward induction of the decoupling field on the given grid.
///
/// # Safety
/// All handles must be live; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fbsde_field_build(
    problem: *const FbsdeProblem,
    options: *const FbsdeSolverOptions,
    grid: *const FbsdeGrid,
    out: *mut *mut FbsdeField,
) -> FbsdeStatus {
    if problem.is_null() || options.is_null() || grid.is_null() || out.is_null() {
        return FbsdeStatus::NullPointer;
    }
    let problem = unsafe { &(*problem).0 };
    let params = unsafe { (*options).to_params() };
    let grid = unsafe { &(*grid).0 };
    guarded(|| match build_decoupling_field(problem, &params, grid) {
        Ok(field) => {
            unsafe { *out = Box::into_raw(Box::new(FbsdeField(field))) };
            FbsdeStatus::Ok
        }
        Err(err) => status_of(&err),
    })
}

/// Evaluates `u(t, x)`; `x` holds the forward state, `out` receives the
/// backward value (its length must equal the backward dimension).
///
/// # Safety
/// `field` must be live; `x` and `out` must point to arrays of the stated
/// lengths.
#[no_mangle]
pub unsafe extern "C" fn fbsde_field_eval(
    field: *const FbsdeField,
    t: f64,
    x: *const f64,
    x_len: usize,
    out: *mut f64,
    out_len: usize,
) -> FbsdeStatus {
    if field.is_null() || x.is_null() || out.is_null() {
        return FbsdeStatus::NullPointer;
    }
    let field = unsafe { &(*field).0 };
    if x_len != field.dim_n() {
        return FbsdeStatus::InvalidArgument;
    }
    if out_len < field.dim_m() {
        return FbsdeStatus::BufferTooSmall;
    }
    let x = unsafe { std::slice::from_raw_parts(x, x_len) };
    let out = unsafe { std::slice::from_raw_parts_mut(out, out_len) };
    guarded(|| {
        let value = field.eval(t, x);
        out[..value.len()].copy_from_slice(&value);
        FbsdeStatus::Ok
    })
}

/// Largest spatial difference quotient over all time slices.
///
/// # Safety
/// `field` must be live and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fbsde_field_lipschitz_max(
    field: *const FbsdeField,
    out: *mut f64,
) -> FbsdeStatus {
    if field.is_null() || out.is_null() {
        return FbsdeStatus::NullPointer;
    }
    let field = unsafe { &(*field).0 };
    guarded(|| {
        let profile = field_lipschitz_profile(field);
        unsafe { *out = profile.iter().cloned().fold(0.0, f64::max) };
        FbsdeStatus::Ok
    })
}

/// # Safety
/// `field` must be a field handle, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fbsde_field_free(field: *mut FbsdeField) {
    if !field.is_null() {
        drop(unsafe { Box::from_raw(field) });
    }
}

/// Euler-Maruyama simulation through the field.
///
/// # Safety
/// All handles must be live; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fbsde_solve(
    problem: *const FbsdeProblem,
    field: *const FbsdeField,
    brownian: *const FbsdeBrownian,
    out: *mut *mut FbsdeSolution,
) -> FbsdeStatus {
    if problem.is_null() || field.is_null() || brownian.is_null() || out.is_null() {
        return FbsdeStatus::NullPointer;
    }
    let problem = unsafe { &(*problem).0 };
    let field = unsafe { &(*field).0 };
    let brownian = unsafe { &(*brownian).0 };
    guarded(|| match solve_global(problem, field, brownian) {
        Ok(solution) => {
            unsafe { *out = Box::into_raw(Box::new(FbsdeSolution(solution))) };
            FbsdeStatus::Ok
        }
        Err(err) => status_of(&err),
    })
}

/// Number of simulated paths.
///
/// # Safety
/// `solution` must be live and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fbsde_solution_n_paths(
    solution: *const FbsdeSolution,
    out: *mut usize,
) -> FbsdeStatus {
    if solution.is_null() || out.is_null() {
        return FbsdeStatus::NullPointer;
    }
    unsafe { *out = (*solution).0.n_paths() };
    FbsdeStatus::Ok
}

/// Copies one path of one component (0 = X, 1 = Y, 2 = Z) into `buffer`,
/// writing `(n_steps + 1) * dimension` values.
///
/// # Safety
/// `solution` must be live; `buffer` must hold `buffer_len` doubles and
/// `written`, when non-null, receives the number of values copied.
#[no_mangle]
pub unsafe extern "C" fn fbsde_solution_path(
    solution: *const FbsdeSolution,
    component: u32,
    path: usize,
    buffer: *mut f64,
    buffer_len: usize,
    written: *mut usize,
) -> FbsdeStatus {
    if solution.is_null() || buffer.is_null() {
        return FbsdeStatus::NullPointer;
    }
    let solution = unsafe { &(*solution).0 };
    let ensemble = match component {
        0 => &solution.x,
        1 => &solution.y,
        2 => &solution.z,
        _ => return FbsdeStatus::InvalidArgument,
    };
    if path >= ensemble.n_paths() {
        return FbsdeStatus::InvalidArgument;
    }
    let n_points = ensemble.grid().n_steps() + 1;
    let needed = n_points * ensemble.dimension();
    if buffer_len < needed {
        return FbsdeStatus::BufferTooSmall;
    }
    let out = unsafe { std::slice::from_raw_parts_mut(buffer, buffer_len) };
    guarded(|| {
        for node in 0..n_points {
            let value = ensemble.value(path, node);
            let start = node * ensemble.dimension();
            out[start..start + value.len()].copy_from_slice(value);
        }
        if !written.is_null() {
            unsafe { *written = needed };
        }
        FbsdeStatus::Ok
    })
}

/// Mean of `|Y_T - Phi(X_T)|` over paths.
///
/// # Safety
/// `solution` must be live and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fbsde_solution_terminal_residual_mean(
    solution: *const FbsdeSolution,
    out: *mut f64,
) -> FbsdeStatus {
    if solution.is_null() || out.is_null() {
        return FbsdeStatus::NullPointer;
    }
    let solution = unsafe { &(*solution).0 };
    let mean = solution.terminal_residuals.iter().sum::<f64>()
        / solution.terminal_residuals.len().max(1) as f64;
    unsafe { *out = mean };
    FbsdeStatus::Ok
}

/// # Safety
/// `solution` must be a solution handle, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fbsde_solution_free(solution: *mut FbsdeSolution) {
    if !solution.is_null() {
        drop(unsafe { Box::from_raw(solution) });
    }
}

/// `K_p = upper^{1/p} (p/(p+1) + 2 lower^{-1/p} (2p-1)/(p-1))`; requires
/// `p > 1` and positive constants.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fbsde_compute_kp(
    p: f64,
    k_upper: f64,
    k_lower: f64,
    out: *mut f64,
) -> FbsdeStatus {
    if out.is_null() {
        return FbsdeStatus::NullPointer;
    }
    guarded(|| {
        let result = KpInputs::new(p, k_upper, k_lower).and_then(|inputs| compute_kp(&inputs));
        match result {
            Ok(kp) => {
                unsafe { *out = kp };
                FbsdeStatus::Ok
            }
            Err(err) => status_of(&err),
        }
    })
}

/// Strict Lipschitz smallness inequality `K_p * L_sigma * K < 1`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fbsde_gate_lipschitz(
    kp: f64,
    l_sigma: f64,
    k: f64,
    out: *mut bool,
) -> FbsdeStatus {
    if out.is_null() {
        return FbsdeStatus::NullPointer;
    }
    guarded(|| match smallness_gates(kp, l_sigma, k, None) {
        Ok(gates) => {
            unsafe { *out = gates.lipschitz_gate };
            FbsdeStatus::Ok
        }
        Err(err) => status_of(&err),
    })
}

/// Iterated interval-chaining constant `C -> 2C + C^2` with the final
/// `2^{p/2}` inflation; `saturated` reports overflow.
///
/// # Safety
/// `value` and `saturated` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn fbsde_audit_constant_growth(
    c1: f64,
    p: f64,
    k: u32,
    value: *mut f64,
    saturated: *mut bool,
) -> FbsdeStatus {
    if value.is_null() || saturated.is_null() {
        return FbsdeStatus::NullPointer;
    }
    guarded(|| match audit_constant_growth(c1, p, k) {
        Ok(audit) => {
            unsafe {
                *value = audit.value;
                *saturated = audit.saturated;
            }
            FbsdeStatus::Ok
        }
        Err(err) => status_of(&err),
    })
}

/// Value `x0^2 P(t0)` of the scalar state-feedback problem with constant
/// `A, B, Q, R, H`, by fourth-order backward integration of the Riccati
/// equation.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn fbsde_riccati_value(
    a: f64,
    b: f64,
    q: f64,
    r: f64,
    h: f64,
    t0: f64,
    t_end: f64,
    n_steps: usize,
    x0: f64,
    out: *mut f64,
) -> FbsdeStatus {
    if out.is_null() {
        return FbsdeStatus::NullPointer;
    }
    guarded(|| {
        let spec = LQSpec::scalar_constant(
            a,
            b,
            0.0,
            0.0,
            q,
            0.0,
            r,
            h,
            t0,
            t_end,
            x0,
            (r * 0.5).max(1e-9),
        );
        match riccati_oracle(&spec, n_steps) {
            Ok(solution) => {
                unsafe { *out = solution.value(&nalgebra_vector(x0)) };
                FbsdeStatus::Ok
            }
            Err(err) => status_of(&err),
        }
    })
}

fn nalgebra_vector(x0: f64) -> fbsde_lab::lq::DVector<f64> {
    fbsde_lab::lq::DVector::from_element(1, x0)
}

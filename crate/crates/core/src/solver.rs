//! Discrete FBSDE solvers.
//!
//! The pipeline has two halves. `build_decoupling_field` runs a backward
//! induction over sub-intervals short enough for the local fixed point to
//! contract: at each spatial node a Picard iteration alternates a one-step
//! Euler move of the forward state with conditional expectations of the next
//! time slice, evaluated by Gauss-Hermite quadrature over the Gaussian
//! increment. `solve_global` then stitches sub-intervals together by running
//! an Euler-Maruyama forward pass whose backward values are read off the
//! field, with `Z` recovered from the field's spatial slope times the
//! diffusion.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::FBSDEProblem;
use crate::quadrature::GaussHermite;
use crate::stochastic::{BrownianEnsemble, PathEnsemble, TimeGrid};

/// Spatial lattice for the field: the same symmetric node set per dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid {
    pub center: f64,
    pub half_width: f64,
    pub n_nodes: usize,
}

impl SpatialGrid {
    pub fn nodes(&self) -> Vec<f64> {
        let lo = self.center - self.half_width;
        let hi = self.center + self.half_width;
        (0..self.n_nodes)
            .map(|i| lo + (hi - lo) * i as f64 / (self.n_nodes - 1) as f64)
            .collect()
    }
}

/// Tuning knobs of the field builder and local Picard solves.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverParams {
    /// Scale `c` in the sub-interval sizing `delta = min(horizon, c / (1 + K^2))`.
    pub delta_scale: f64,
    pub picard_tol: f64,
    pub picard_max_iter: usize,
    pub spatial_grid: SpatialGrid,
    pub quadrature_nodes: usize,
    /// Successive-iterate ratio above which the sub-interval is halved.
    pub contraction_guard: f64,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            delta_scale: 0.25,
            picard_tol: 1e-10,
            picard_max_iter: 50,
            spatial_grid: SpatialGrid {
                center: 0.0,
                half_width: 6.0,
                n_nodes: 121,
            },
            quadrature_nodes: 8,
            contraction_guard: 0.9,
        }
    }
}

impl SolverParams {
    pub fn validate(&self) -> Result<()> {
        if self.spatial_grid.n_nodes < 3 {
            return Err(Error::InvalidArgument(
                "spatial grid needs at least 3 nodes".into(),
            ));
        }
        if self.quadrature_nodes < 2 {
            return Err(Error::InvalidArgument(
                "quadrature needs at least 2 nodes".into(),
            ));
        }
        if !(self.picard_tol > 0.0) {
            return Err(Error::InvalidArgument("picard_tol must be positive".into()));
        }
        if !(self.delta_scale > 0.0) {
            return Err(Error::InvalidArgument("delta_scale must be positive".into()));
        }
        if !(self.contraction_guard > 0.0 && self.contraction_guard < 1.0) {
            return Err(Error::InvalidArgument(
                "contraction_guard must lie in (0, 1)".into(),
            ));
        }
        if !(self.spatial_grid.half_width > 0.0) {
            return Err(Error::InvalidArgument(
                "spatial half_width must be positive".into(),
            ));
        }
        if self.picard_max_iter == 0 {
            return Err(Error::InvalidArgument(
                "picard_max_iter must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Sub-interval length for which the local fixed point contracts:
/// `min(horizon, c / (1 + K^2))`. The builder halves it at runtime whenever
/// an iteration fails the contraction guard.
pub fn choose_delta(k: f64, l_sigma: f64, params: &SolverParams, horizon: f64) -> f64 {
    debug_assert!(k >= 0.0 && l_sigma >= 0.0);
    horizon.min(params.delta_scale / (1.0 + k * k))
}

/// One time slice of a field: values on the spatial tensor lattice.
#[derive(Debug, Clone)]
pub struct FieldSlice<'a> {
    axes: &'a [Vec<f64>],
    dim_m: usize,
    values: &'a [f64],
}

impl<'a> FieldSlice<'a> {
    pub fn new(axes: &'a [Vec<f64>], dim_m: usize, values: &'a [f64]) -> Self {
        FieldSlice {
            axes,
            dim_m,
            values,
        }
    }

    /// Piecewise-(bi)linear interpolation with linear extrapolation beyond
    /// the lattice (the boundary cell's form extends globally).
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim_m];
        self.eval_into(x, &mut out);
        out
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        match self.axes.len() {
            1 => {
                let (i, theta) = locate(&self.axes[0], x[0]);
                let lo = &self.values[i * self.dim_m..(i + 1) * self.dim_m];
                let hi = &self.values[(i + 1) * self.dim_m..(i + 2) * self.dim_m];
                for c in 0..self.dim_m {
                    out[c] = (1.0 - theta) * lo[c] + theta * hi[c];
                }
            }
            2 => {
                let n1 = self.axes[1].len();
                let (i, ti) = locate(&self.axes[0], x[0]);
                let (j, tj) = locate(&self.axes[1], x[1]);
                let at = |a: usize, b: usize, c: usize| self.values[(a * n1 + b) * self.dim_m + c];
                for c in 0..self.dim_m {
                    let v00 = at(i, j, c);
                    let v10 = at(i + 1, j, c);
                    let v01 = at(i, j + 1, c);
                    let v11 = at(i + 1, j + 1, c);
                    out[c] = (1.0 - ti) * (1.0 - tj) * v00
                        + ti * (1.0 - tj) * v10
                        + (1.0 - ti) * tj * v01
                        + ti * tj * v11;
                }
            }
            d => unreachable!("unsupported spatial dimension {d}"),
        }
    }

    /// Row-major `m x n` spatial gradient at `x`.
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let n = self.axes.len();
        let mut out = vec![0.0; self.dim_m * n];
        match n {
            1 => {
                let (i, _) = locate(&self.axes[0], x[0]);
                let h = self.axes[0][i + 1] - self.axes[0][i];
                let lo = &self.values[i * self.dim_m..(i + 1) * self.dim_m];
                let hi = &self.values[(i + 1) * self.dim_m..(i + 2) * self.dim_m];
                for c in 0..self.dim_m {
                    out[c] = (hi[c] - lo[c]) / h;
                }
            }
            2 => {
                let n1 = self.axes[1].len();
                let (i, ti) = locate(&self.axes[0], x[0]);
                let (j, tj) = locate(&self.axes[1], x[1]);
                let h0 = self.axes[0][i + 1] - self.axes[0][i];
                let h1 = self.axes[1][j + 1] - self.axes[1][j];
                let at = |a: usize, b: usize, c: usize| self.values[(a * n1 + b) * self.dim_m + c];
                for c in 0..self.dim_m {
                    let v00 = at(i, j, c);
                    let v10 = at(i + 1, j, c);
                    let v01 = at(i, j + 1, c);
                    let v11 = at(i + 1, j + 1, c);
                    out[c * 2] = ((1.0 - tj) * (v10 - v00) + tj * (v11 - v01)) / h0;
                    out[c * 2 + 1] = ((1.0 - ti) * (v01 - v00) + ti * (v11 - v10)) / h1;
                }
            }
            d => unreachable!("unsupported spatial dimension {d}"),
        }
        out
    }

    fn contains(&self, x: &[f64]) -> bool {
        self.axes
            .iter()
            .zip(x)
            .all(|(axis, &v)| v >= axis[0] && v <= *axis.last().unwrap())
    }
}

/// Cell index and (possibly out-of-range) barycentric coordinate; clamping
/// the cell but not the coordinate yields linear extrapolation.
fn locate(axis: &[f64], x: f64) -> (usize, f64) {
    let last_cell = axis.len() - 2;
    let i = match axis.partition_point(|&a| a <= x) {
        0 => 0,
        p => (p - 1).min(last_cell),
    };
    let theta = (x - axis[i]) / (axis[i + 1] - axis[i]);
    (i, theta)
}

/// Diagnostics accumulated while building a field.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BuildDiagnostics {
    pub max_contraction_ratio: f64,
    pub boundary_escapes: usize,
    pub final_delta: f64,
    pub warnings: Vec<String>,
}

/// Backward-induction representation of `u(t, x)` with `Y_t = u(t, X_t)`:
/// time-indexed spatial tables, piecewise-linear in space with linear
/// extrapolation, linear in time between slices.
#[derive(Debug, Clone, PartialEq)]
pub struct DecouplingField {
    times: Vec<f64>,
    axes: Vec<Vec<f64>>,
    dim_m: usize,
    /// Layout: `values[(slice * n_flat + node) * dim_m ..]`.
    values: Vec<f64>,
    pub diagnostics: BuildDiagnostics,
}

impl DecouplingField {
    pub fn from_values(
        times: Vec<f64>,
        axes: Vec<Vec<f64>>,
        dim_m: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        if times.len() < 2 || times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument(
                "field times must be at least two strictly increasing values".into(),
            ));
        }
        if axes.is_empty() || axes.len() > 2 {
            return Err(Error::InvalidArgument(
                "field supports 1 or 2 spatial dimensions".into(),
            ));
        }
        for axis in &axes {
            if axis.len() < 2 || axis.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::InvalidArgument(
                    "field axes must strictly increase with at least 2 nodes".into(),
                ));
            }
        }
        let n_flat: usize = axes.iter().map(Vec::len).product();
        if values.len() != times.len() * n_flat * dim_m {
            return Err(Error::InvalidArgument(format!(
                "field values hold {} entries, expected {}",
                values.len(),
                times.len() * n_flat * dim_m
            )));
        }
        Ok(DecouplingField {
            times,
            axes,
            dim_m,
            values,
            diagnostics: BuildDiagnostics::default(),
        })
    }

    /// Builds a field by sampling a function on the lattice; test helper and
    /// entry point for externally supplied fields.
    pub fn from_fn(
        times: Vec<f64>,
        axes: Vec<Vec<f64>>,
        dim_m: usize,
        mut f: impl FnMut(f64, &[f64]) -> Vec<f64>,
    ) -> Result<Self> {
        let nodes = flat_nodes(&axes);
        let mut values = Vec::with_capacity(times.len() * nodes.len() * dim_m);
        for &t in &times {
            for node in &nodes {
                values.extend(f(t, node));
            }
        }
        DecouplingField::from_values(times, axes, dim_m, values)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn axes(&self) -> &[Vec<f64>] {
        &self.axes
    }

    pub fn dim_m(&self) -> usize {
        self.dim_m
    }

    pub fn dim_n(&self) -> usize {
        self.axes.len()
    }

    pub fn n_flat(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    pub fn slice(&self, index: usize) -> FieldSlice<'_> {
        let n_flat = self.n_flat();
        let start = index * n_flat * self.dim_m;
        FieldSlice::new(
            &self.axes,
            self.dim_m,
            &self.values[start..start + n_flat * self.dim_m],
        )
    }

    /// Spatial nodes in row-major order (outer axis first).
    pub fn nodes(&self) -> Vec<Vec<f64>> {
        flat_nodes(&self.axes)
    }

    fn time_weights(&self, t: f64) -> (usize, usize, f64) {
        let times = &self.times;
        if t <= times[0] {
            return (0, 0, 0.0);
        }
        if t >= *times.last().unwrap() {
            let last = times.len() - 1;
            return (last, last, 0.0);
        }
        let hi = times.partition_point(|&s| s <= t);
        let lo = hi - 1;
        let t_lo = times[lo];
        if (t - t_lo).abs() <= 1e-12 * t_lo.abs().max(1.0) {
            return (lo, lo, 0.0);
        }
        let theta = (t - t_lo) / (times[hi] - t_lo);
        (lo, hi, theta)
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let (lo, hi, theta) = self.time_weights(t);
        let a = self.slice(lo).eval(x);
        if lo == hi {
            return a;
        }
        let b = self.slice(hi).eval(x);
        a.iter()
            .zip(&b)
            .map(|(va, vb)| (1.0 - theta) * va + theta * vb)
            .collect()
    }

    /// Row-major `m x n` spatial slope at `(t, x)`.
    pub fn gradient(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let (lo, hi, theta) = self.time_weights(t);
        let a = self.slice(lo).gradient(x);
        if lo == hi {
            return a;
        }
        let b = self.slice(hi).gradient(x);
        a.iter()
            .zip(&b)
            .map(|(va, vb)| (1.0 - theta) * va + theta * vb)
            .collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.slice(0).contains(x)
    }
}

fn flat_nodes(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    match axes.len() {
        1 => axes[0].iter().map(|&a| vec![a]).collect(),
        2 => {
            let mut out = Vec::with_capacity(axes[0].len() * axes[1].len());
            for &a in &axes[0] {
                for &b in &axes[1] {
                    out.push(vec![a, b]);
                }
            }
            out
        }
        d => unreachable!("unsupported spatial dimension {d}"),
    }
}

/// Result of a single-node local Picard solve.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalSolve {
    /// `u(t1, x0)`, the converged backward value.
    pub u: Vec<f64>,
    pub z: Vec<f64>,
    pub iterations: usize,
    pub contraction_ratio: f64,
    pub escaped_grid: bool,
}

struct NodeOutcome {
    y: Vec<f64>,
    z: Vec<f64>,
    iterations: usize,
    ratio: f64,
    escaped: bool,
}

/// The Picard iteration at one spatial node over one short interval:
/// alternate (i) a one-step Euler image of the forward state under the
/// current `(y, z)` guess, (ii) quadrature expectations of the next slice to
/// refresh `y` and `z`, until successive `y` iterates differ by less than
/// the tolerance.
#[allow(clippy::too_many_arguments)]
fn picard_node(
    problem: &FBSDEProblem,
    rule: &[(f64, f64)],
    next: &FieldSlice<'_>,
    t1: f64,
    t2: f64,
    x: &[f64],
    params: &SolverParams,
) -> Result<NodeOutcome> {
    let m = problem.m;
    let n = problem.n;
    let dt = t2 - t1;
    let sqrt_dt = dt.sqrt();
    let mut y = next.eval(x);
    let mut z = vec![0.0; m];
    let mut prev_dy: Option<f64> = None;
    let mut ratio = 0.0;
    let mut escaped = false;
    let mut bad_streak = 0usize;

    let mut image = vec![0.0; n];
    let mut u_next = vec![0.0; m];
    for iteration in 1..=params.picard_max_iter {
        let drift = problem.coefficients.drift(t1, x, &y, &z)?;
        let diffusion = problem.coefficients.diffusion(t1, x, &y, &z)?;
        let driver = problem.coefficients.driver(t1, x, &y, &z)?;

        let mut ey = vec![0.0; m];
        let mut ez = vec![0.0; m];
        for &(node, weight) in rule {
            let db = sqrt_dt * node;
            for i in 0..n {
                image[i] = x[i] + drift[i] * dt + diffusion[i] * db;
            }
            if !next.contains(&image) {
                escaped = true;
            }
            next.eval_into(&image, &mut u_next);
            for c in 0..m {
                ey[c] += weight * u_next[c];
                ez[c] += weight * u_next[c] * db;
            }
        }
        let mut dy = 0.0f64;
        for c in 0..m {
            let y_new = ey[c] + driver[c] * dt;
            dy = dy.max((y_new - y[c]).abs());
            y[c] = y_new;
            z[c] = ez[c] / dt;
        }
        if !y.iter().chain(z.iter()).all(|v| v.is_finite()) {
            return Err(Error::PicardDivergence {
                t: t1,
                x: x.to_vec(),
                iterations: iteration,
                delta: dt,
            });
        }
        if let Some(prev) = prev_dy {
            if prev > 0.0 {
                ratio = dy / prev;
                if ratio >= params.contraction_guard && dy >= params.picard_tol {
                    bad_streak += 1;
                    if bad_streak >= 2 {
                        return Err(Error::PicardDivergence {
                            t: t1,
                            x: x.to_vec(),
                            iterations: iteration,
                            delta: dt,
                        });
                    }
                } else {
                    bad_streak = 0;
                }
            }
        }
        if dy < params.picard_tol {
            return Ok(NodeOutcome {
                y,
                z,
                iterations: iteration,
                ratio,
                escaped,
            });
        }
        prev_dy = Some(dy);
    }
    Err(Error::PicardDivergence {
        t: t1,
        x: x.to_vec(),
        iterations: params.picard_max_iter,
        delta: dt,
    })
}

/// Exposes the single-node solve for testing and local estimates.
pub fn solve_local_picard(
    problem: &FBSDEProblem,
    params: &SolverParams,
    t1: f64,
    t2: f64,
    terminal: &FieldSlice<'_>,
    x0: &[f64],
) -> Result<LocalSolve> {
    params.validate()?;
    if !(t2 > t1) {
        return Err(Error::HorizonOrder { t0: t1, t_end: t2 });
    }
    let delta = choose_delta(
        problem.coefficients.lipschitz_k,
        problem.coefficients.l_sigma_z,
        params,
        problem.t_end - problem.t0,
    );
    if t2 - t1 > delta + 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "interval length {} exceeds the contraction length {delta}",
            t2 - t1
        )));
    }
    let rule = GaussHermite::new(params.quadrature_nodes).standard_normal_rule();
    let outcome = picard_node(problem, &rule, terminal, t1, t2, x0, params)?;
    Ok(LocalSolve {
        u: outcome.y,
        z: outcome.z,
        iterations: outcome.iterations,
        contraction_ratio: outcome.ratio,
        escaped_grid: outcome.escaped,
    })
}

/// Backward induction of the decoupling field on the given experiment grid.
///
/// Each grid interval is split into sub-steps no longer than the contraction
/// length; the working length is halved (and the interval redone) whenever a
/// node's Picard iteration fails the contraction guard, down to a floor of
/// `1e-6 * horizon`.
pub fn build_decoupling_field(
    problem: &FBSDEProblem,
    params: &SolverParams,
    grid: &TimeGrid,
) -> Result<DecouplingField> {
    params.validate()?;
    if problem.n > 2 || problem.m > 2 {
        return Err(Error::InvalidArgument(
            "field construction supports n, m <= 2".into(),
        ));
    }
    if (grid.t0() - problem.t0).abs() > 1e-9 || (grid.t_end() - problem.t_end).abs() > 1e-9 {
        return Err(Error::InvalidArgument(
            "experiment grid must span the problem horizon".into(),
        ));
    }
    let horizon = problem.t_end - problem.t0;
    let axis = params.spatial_grid.nodes();
    let axes: Vec<Vec<f64>> = (0..problem.n).map(|_| axis.clone()).collect();
    let nodes = flat_nodes(&axes);
    let n_flat = nodes.len();
    let m = problem.m;
    let rule = GaussHermite::new(params.quadrature_nodes).standard_normal_rule();

    let n_steps = grid.n_steps();
    let mut values = vec![0.0; (n_steps + 1) * n_flat * m];
    for (node_idx, node) in nodes.iter().enumerate() {
        let phi = problem.coefficients.terminal(node)?;
        let start = (n_steps * n_flat + node_idx) * m;
        values[start..start + m].copy_from_slice(&phi);
    }

    let mut delta = choose_delta(
        problem.coefficients.lipschitz_k,
        problem.coefficients.l_sigma_z,
        params,
        horizon,
    );
    let delta_floor = 1e-6 * horizon;
    let mut diagnostics = BuildDiagnostics {
        final_delta: delta,
        ..BuildDiagnostics::default()
    };

    for k in (0..n_steps).rev() {
        let t_lo = grid.points()[k];
        let t_hi = grid.points()[k + 1];
        loop {
            let n_sub = ((t_hi - t_lo) / delta).ceil().max(1.0) as usize;
            let next_start = ((k + 1) * n_flat) * m;
            let terminal_values = values[next_start..next_start + n_flat * m].to_vec();
            match backward_interval(
                problem,
                params,
                &rule,
                &axes,
                &nodes,
                t_lo,
                t_hi,
                n_sub,
                terminal_values,
            ) {
                Ok((slice_values, max_ratio, escapes)) => {
                    let start = (k * n_flat) * m;
                    values[start..start + n_flat * m].copy_from_slice(&slice_values);
                    diagnostics.max_contraction_ratio =
                        diagnostics.max_contraction_ratio.max(max_ratio);
                    diagnostics.boundary_escapes += escapes;
                    break;
                }
                Err(Error::PicardDivergence {
                    t,
                    x,
                    iterations,
                    delta: failed_delta,
                }) => {
                    if delta * 0.5 >= delta_floor {
                        delta *= 0.5;
                        diagnostics.final_delta = delta;
                    } else {
                        return Err(Error::PicardDivergence {
                            t,
                            x,
                            iterations,
                            delta: failed_delta,
                        });
                    }
                }
                Err(other) => return Err(other),
            }
        }
    }

    if diagnostics.boundary_escapes > 0 {
        diagnostics.warnings.push(format!(
            "grid escape: {} quadrature images of boundary nodes left the spatial grid \
             (linear extrapolation used)",
            diagnostics.boundary_escapes
        ));
    }
    let mut field = DecouplingField::from_values(grid.points().to_vec(), axes, m, values)?;
    field.diagnostics = diagnostics;
    Ok(field)
}

/// Runs the backward induction across one grid interval split into `n_sub`
/// equal sub-steps, starting from the supplied next-time values.
#[allow(clippy::too_many_arguments)]
fn backward_interval(
    problem: &FBSDEProblem,
    params: &SolverParams,
    rule: &[(f64, f64)],
    axes: &[Vec<f64>],
    nodes: &[Vec<f64>],
    t_lo: f64,
    t_hi: f64,
    n_sub: usize,
    mut next_values: Vec<f64>,
) -> Result<(Vec<f64>, f64, usize)> {
    let m = problem.m;
    let sub_dt = (t_hi - t_lo) / n_sub as f64;
    let mut max_ratio = 0.0f64;
    let mut escapes = 0usize;
    for j in (0..n_sub).rev() {
        let t1 = t_lo + j as f64 * sub_dt;
        let t2 = if j + 1 == n_sub {
            t_hi
        } else {
            t_lo + (j + 1) as f64 * sub_dt
        };
        let next = FieldSlice::new(axes, m, &next_values);
        let outcomes: Vec<NodeOutcome> = nodes
            .par_iter()
            .map(|node| picard_node(problem, rule, &next, t1, t2, node, params))
            .collect::<Result<Vec<_>>>()?;
        let mut slice_values = Vec::with_capacity(next_values.len());
        for outcome in &outcomes {
            slice_values.extend_from_slice(&outcome.y);
            max_ratio = max_ratio.max(outcome.ratio);
            if outcome.escaped {
                escapes += 1;
            }
        }
        next_values = slice_values;
    }
    Ok((next_values, max_ratio, escapes))
}

/// Where a solution came from; lets coupled estimators check that two
/// ensembles share their driving noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub solver: String,
    pub seed: u64,
}

/// Discrete (X, Y, Z) triple per path on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionEnsemble {
    pub x: PathEnsemble,
    pub y: PathEnsemble,
    pub z: PathEnsemble,
    pub provenance: Provenance,
    /// `|Y_T - Phi(X_T)|` per path.
    pub terminal_residuals: Vec<f64>,
    pub warnings: Vec<String>,
}

impl SolutionEnsemble {
    pub fn new(
        x: PathEnsemble,
        y: PathEnsemble,
        z: PathEnsemble,
        provenance: Provenance,
        terminal_residuals: Vec<f64>,
        warnings: Vec<String>,
    ) -> Self {
        SolutionEnsemble {
            x,
            y,
            z,
            provenance,
            terminal_residuals,
            warnings,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        self.x.grid()
    }

    pub fn n_paths(&self) -> usize {
        self.x.n_paths()
    }
}

/// Forward Euler-Maruyama through the decoupling field: `Y` is read off the
/// field along the simulated path and `Z` is the field's spatial slope times
/// the diffusion evaluated at the previous composite step (with one inner
/// pass when the diffusion depends on `z`).
pub fn solve_global(
    problem: &FBSDEProblem,
    field: &DecouplingField,
    noise: &BrownianEnsemble,
) -> Result<SolutionEnsemble> {
    let grid = noise.grid();
    // Field times must all lie on the noise grid.
    for t in field.times() {
        let points = grid.points();
        let pos = points.partition_point(|&s| s < t - 1e-9);
        if pos >= points.len() || (points[pos] - t).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "field time {t} is not a noise grid point"
            )));
        }
    }
    let n = problem.n;
    let m = problem.m;
    let n_steps = grid.n_steps();
    let z_coupled = problem.coefficients.l_sigma_z > 0.0;

    struct PathResult {
        x_row: Vec<f64>,
        y_row: Vec<f64>,
        z_row: Vec<f64>,
        residual: f64,
        escapes: usize,
    }

    let paths: Vec<PathResult> = (0..noise.n_paths())
        .into_par_iter()
        .map(|path| -> Result<PathResult> {
            let mut x = problem.xi.clone();
            let mut z_prev = vec![0.0; m];
            let mut x_row = Vec::with_capacity((n_steps + 1) * n);
            let mut y_row = Vec::with_capacity((n_steps + 1) * m);
            let mut z_row = Vec::with_capacity((n_steps + 1) * m);
            let mut escapes = 0usize;
            let mut residual = 0.0;
            for k in 0..=n_steps {
                let t = grid.points()[k];
                if !field.contains(&x) {
                    escapes += 1;
                }
                let y = field.eval(t, &x);
                let grad = field.gradient(t, &x);
                let sigma_prev = problem.coefficients.diffusion(t, &x, &y, &z_prev)?;
                let mut z = mat_vec(&grad, &sigma_prev, m, n);
                if z_coupled {
                    let sigma_refreshed = problem.coefficients.diffusion(t, &x, &y, &z)?;
                    z = mat_vec(&grad, &sigma_refreshed, m, n);
                }
                if !x.iter().chain(y.iter()).chain(z.iter()).all(|v| v.is_finite()) {
                    return Err(Error::NonFiniteState { path, step: k });
                }
                x_row.extend_from_slice(&x);
                y_row.extend_from_slice(&y);
                z_row.extend_from_slice(&z);
                if k < n_steps {
                    let drift = problem.coefficients.drift(t, &x, &y, &z)?;
                    let diffusion = problem.coefficients.diffusion(t, &x, &y, &z)?;
                    let dt = grid.dt(k);
                    let db = noise.increment(path, k);
                    for i in 0..n {
                        x[i] += drift[i] * dt + diffusion[i] * db;
                    }
                    z_prev = z;
                } else {
                    let phi = problem.coefficients.terminal(&x)?;
                    residual = y
                        .iter()
                        .zip(&phi)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                }
            }
            Ok(PathResult {
                x_row,
                y_row,
                z_row,
                residual,
                escapes,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut x_rows = Vec::with_capacity(paths.len());
    let mut y_rows = Vec::with_capacity(paths.len());
    let mut z_rows = Vec::with_capacity(paths.len());
    let mut residuals = Vec::with_capacity(paths.len());
    let mut escapes = 0usize;
    for p in paths {
        x_rows.push(p.x_row);
        y_rows.push(p.y_row);
        z_rows.push(p.z_row);
        residuals.push(p.residual);
        escapes += p.escapes;
    }
    let mut warnings = Vec::new();
    let escape_fraction = escapes as f64 / (noise.n_paths() * (n_steps + 1)) as f64;
    if escape_fraction > 0.01 {
        warnings.push(format!(
            "field coverage: {:.2}% of simulated states left the spatial grid",
            100.0 * escape_fraction
        ));
    }
    let x = PathEnsemble::from_rows(grid.clone(), n, x_rows)?;
    let y = PathEnsemble::from_rows(grid.clone(), m, y_rows)?;
    let z = PathEnsemble::from_rows(grid.clone(), m, z_rows)?;
    debug_assert!(x.is_finite() && y.is_finite() && z.is_finite());
    Ok(SolutionEnsemble::new(
        x,
        y,
        z,
        Provenance {
            solver: "decoupling-field".into(),
            seed: noise.seed(),
        },
        residuals,
        warnings,
    ))
}

fn mat_vec(mat: &[f64], vec: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|r| (0..cols).map(|c| mat[r * cols + c] * vec[c]).sum())
        .collect()
}

/// Per-time maximal absolute difference quotient across adjacent spatial
/// nodes, the field's empirical Lipschitz profile.
pub fn field_lipschitz_profile(field: &DecouplingField) -> Vec<f64> {
    let m = field.dim_m();
    let axes = field.axes();
    (0..field.times().len())
        .map(|idx| {
            let slice = field.slice(idx);
            let mut worst = 0.0f64;
            match axes.len() {
                1 => {
                    let axis = &axes[0];
                    for i in 0..axis.len() - 1 {
                        let h = axis[i + 1] - axis[i];
                        let lo = &slice.values[i * m..(i + 1) * m];
                        let hi = &slice.values[(i + 1) * m..(i + 2) * m];
                        let d = lo
                            .iter()
                            .zip(hi)
                            .map(|(a, b)| (b - a) * (b - a))
                            .sum::<f64>()
                            .sqrt();
                        worst = worst.max(d / h);
                    }
                }
                2 => {
                    let (n0, n1) = (axes[0].len(), axes[1].len());
                    let at = |a: usize, b: usize| &slice.values[(a * n1 + b) * m..(a * n1 + b + 1) * m];
                    for i in 0..n0 {
                        for j in 0..n1 {
                            if i + 1 < n0 {
                                let h = axes[0][i + 1] - axes[0][i];
                                let d = diff_norm(at(i, j), at(i + 1, j));
                                worst = worst.max(d / h);
                            }
                            if j + 1 < n1 {
                                let h = axes[1][j + 1] - axes[1][j];
                                let d = diff_norm(at(i, j), at(i, j + 1));
                                worst = worst.max(d / h);
                            }
                        }
                    }
                }
                d => unreachable!("unsupported spatial dimension {d}"),
            }
            worst
        })
        .collect()
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt()
}

//! Linear-quadratic stochastic control.
//!
//! The controlled system is
//!
//! ```text
//! dX = [A X + B u + b0] ds + [C X + D u + sigma0] dB
//! ```
//!
//! with quadratic running cost `<QX,X> + 2<SX,u> + <Ru,u> + 2<q,X> + 2<rho,u>`
//! and terminal cost `<HX,X> + 2<h,X>`. Stationarity of the cost yields the
//! feedback `u = -R^{-1}(B'Y + D'Z + SX + rho)` through the adjoint pair
//! `(Y, Z)`; substituting it back couples the forward and backward equations
//! into one affine FBSDE that the decoupling-field solver can handle.
//! `riccati_oracle` provides an independent cross-check for the
//! state-feedback subclass.

pub use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::lp::{mean_half_width, Estimate};
use crate::model::{CoefficientSet, FBSDEProblem};
use crate::solver::SolutionEnsemble;
use crate::stochastic::{BrownianEnsemble, PathEnsemble};

/// Matrix- or vector-valued path of time with piecewise-constant (left)
/// interpolation between table nodes.
#[derive(Debug, Clone, PartialEq)]
pub enum TimeProfile<T> {
    Constant(T),
    Table { times: Vec<f64>, values: Vec<T> },
}

impl<T> TimeProfile<T> {
    pub fn at(&self, t: f64) -> &T {
        match self {
            TimeProfile::Constant(v) => v,
            TimeProfile::Table { times, values } => {
                let idx = match times.partition_point(|&s| s <= t) {
                    0 => 0,
                    p => p - 1,
                };
                &values[idx]
            }
        }
    }

    pub fn knot_times(&self) -> &[f64] {
        match self {
            TimeProfile::Constant(_) => &[],
            TimeProfile::Table { times, .. } => times,
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if let TimeProfile::Table { times, values } = self {
            if times.is_empty() || times.len() != values.len() {
                return Err(Error::InvalidArgument(format!(
                    "profile {name} needs matching non-empty times and values"
                )));
            }
            if times.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::InvalidArgument(format!(
                    "profile {name} times must strictly increase"
                )));
            }
        }
        Ok(())
    }
}

/// A linear-quadratic control problem on `[t0, t_end]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LQSpec {
    pub n: usize,
    pub control_dim: usize,
    /// State and control matrices of the dynamics.
    pub a: TimeProfile<DMatrix<f64>>,
    pub b: TimeProfile<DMatrix<f64>>,
    pub c: TimeProfile<DMatrix<f64>>,
    pub d: TimeProfile<DMatrix<f64>>,
    /// Cost weights; `q` and `r` symmetric, `h` the terminal weight.
    pub q: TimeProfile<DMatrix<f64>>,
    pub s: TimeProfile<DMatrix<f64>>,
    pub r: TimeProfile<DMatrix<f64>>,
    pub h: DMatrix<f64>,
    /// Affine terms of dynamics and cost.
    pub drift_offset: TimeProfile<DVector<f64>>,
    pub diffusion_offset: TimeProfile<DVector<f64>>,
    pub state_cost_offset: TimeProfile<DVector<f64>>,
    pub control_cost_offset: TimeProfile<DVector<f64>>,
    pub terminal_offset: DVector<f64>,
    /// Declared lower bound `R >= r_lower_bound * I`.
    pub r_lower_bound: f64,
    pub t0: f64,
    pub t_end: f64,
    pub x0: DVector<f64>,
}

impl LQSpec {
    /// Scalar problem with constant coefficients and zero affine terms.
    #[allow(clippy::too_many_arguments)]
    pub fn scalar_constant(
        a: f64,
        b: f64,
        c: f64,
        d: f64,
        q: f64,
        s: f64,
        r: f64,
        h: f64,
        t0: f64,
        t_end: f64,
        x0: f64,
        r_lower_bound: f64,
    ) -> Self {
        let m1 = |v: f64| TimeProfile::Constant(DMatrix::from_element(1, 1, v));
        let v1 = || TimeProfile::Constant(DVector::zeros(1));
        LQSpec {
            n: 1,
            control_dim: 1,
            a: m1(a),
            b: m1(b),
            c: m1(c),
            d: m1(d),
            q: m1(q),
            s: m1(s),
            r: m1(r),
            h: DMatrix::from_element(1, 1, h),
            drift_offset: v1(),
            diffusion_offset: v1(),
            state_cost_offset: v1(),
            control_cost_offset: v1(),
            terminal_offset: DVector::zeros(1),
            r_lower_bound,
            t0,
            t_end,
            x0: DVector::from_element(1, x0),
        }
    }

    /// All knot times at which any profile changes, starting at `t0`.
    pub fn knot_times(&self) -> Vec<f64> {
        let mut knots = vec![self.t0];
        for times in [
            self.a.knot_times(),
            self.b.knot_times(),
            self.c.knot_times(),
            self.d.knot_times(),
            self.q.knot_times(),
            self.s.knot_times(),
            self.r.knot_times(),
            self.drift_offset.knot_times(),
            self.diffusion_offset.knot_times(),
            self.state_cost_offset.knot_times(),
            self.control_cost_offset.knot_times(),
        ] {
            knots.extend(times.iter().copied().filter(|&t| t > self.t0 && t < self.t_end));
        }
        knots.sort_by(f64::total_cmp);
        knots.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        knots
    }

    /// Checks the standing positivity assumptions on the knot set and
    /// records the norms the theory cares about.
    pub fn validate(&self) -> Result<LqValidation> {
        if !(self.t_end > self.t0) {
            return Err(Error::HorizonOrder {
                t0: self.t0,
                t_end: self.t_end,
            });
        }
        if !(self.r_lower_bound > 0.0) {
            return Err(Error::InvalidArgument(
                "R lower bound must be positive".into(),
            ));
        }
        for (profile, name) in [
            (&self.a, "A"),
            (&self.b, "B"),
            (&self.c, "C"),
            (&self.d, "D"),
            (&self.q, "Q"),
            (&self.s, "S"),
            (&self.r, "R"),
        ] {
            profile.validate(name)?;
        }
        let mut sup_norm = 0.0f64;
        let mut d_norms = Vec::new();
        let mut schur_min = f64::INFINITY;
        let mut r_min = f64::INFINITY;
        for &t in &self.knot_times() {
            let (a, b, c, d) = (self.a.at(t), self.b.at(t), self.c.at(t), self.d.at(t));
            let (q, s, r) = (self.q.at(t), self.s.at(t), self.r.at(t));
            for mat in [a, b, c, d, q, s, r] {
                sup_norm = sup_norm.max(mat.norm());
            }
            // H3.3 records |D| = sqrt(tr(D D')).
            d_norms.push((t, d.norm()));
            let r_eigen_min = symmetric_min_eigenvalue(r);
            r_min = r_min.min(r_eigen_min);
            if r_eigen_min < self.r_lower_bound - 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "R at t={t} has minimum eigenvalue {r_eigen_min}, below the declared bound {}",
                    self.r_lower_bound
                )));
            }
            let r_inv = r
                .clone()
                .try_inverse()
                .ok_or(Error::SingularR { t })?;
            let schur = q - s.transpose() * &r_inv * s;
            let schur_eigen_min = symmetric_min_eigenvalue(&schur);
            schur_min = schur_min.min(schur_eigen_min);
            if schur_eigen_min < -1e-10 {
                return Err(Error::InvalidArgument(format!(
                    "Q - S'R^-1 S at t={t} has minimum eigenvalue {schur_eigen_min} < 0"
                )));
            }
        }
        let h_min = symmetric_min_eigenvalue(&self.h);
        if h_min < -1e-10 {
            return Err(Error::InvalidArgument(format!(
                "terminal weight H has minimum eigenvalue {h_min} < 0"
            )));
        }
        Ok(LqValidation {
            sup_coefficient_norm: sup_norm,
            d_norms,
            schur_min_eigenvalue: schur_min,
            r_min_eigenvalue: r_min,
            h_min_eigenvalue: h_min,
        })
    }
}

/// Norms and eigenvalue margins recorded while validating a spec.
#[derive(Debug, Clone, PartialEq)]
pub struct LqValidation {
    pub sup_coefficient_norm: f64,
    /// `(t, |D_t|)` per knot, the smallness the `K_p` gate quantifies.
    pub d_norms: Vec<(f64, f64)>,
    pub schur_min_eigenvalue: f64,
    pub r_min_eigenvalue: f64,
    pub h_min_eigenvalue: f64,
}

fn symmetric_min_eigenvalue(mat: &DMatrix<f64>) -> f64 {
    let symmetrized = (mat + mat.transpose()) * 0.5;
    symmetrized
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

fn symmetric_max_eigenvalue(mat: &DMatrix<f64>) -> f64 {
    let symmetrized = (mat + mat.transpose()) * 0.5;
    symmetrized
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Flattened per-knot data for the simulation hot loops.
struct KnotData {
    t_start: f64,
    a: Vec<f64>,     // n x n
    b: Vec<f64>,     // n x mu
    c: Vec<f64>,     // n x n
    d: Vec<f64>,     // n x mu
    q: Vec<f64>,     // n x n
    s: Vec<f64>,     // mu x n
    r: Vec<f64>,     // mu x mu
    r_inv: Vec<f64>, // mu x mu
    rho: Vec<f64>,   // mu
    b0: Vec<f64>,    // n
    sigma0: Vec<f64>, // n
    q0: Vec<f64>,    // n
}

struct LqTables {
    knots: Vec<KnotData>,
    h: Vec<f64>,  // n x n
    h0: Vec<f64>, // n
}

fn flatten(mat: &DMatrix<f64>) -> Vec<f64> {
    let (rows, cols) = mat.shape();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(mat[(r, c)]);
        }
    }
    out
}

impl LqTables {
    fn build(spec: &LQSpec) -> Result<Self> {
        let mut knots = Vec::new();
        for &t in &spec.knot_times() {
            let r = spec.r.at(t);
            let r_inv = r.clone().try_inverse().ok_or(Error::SingularR { t })?;
            knots.push(KnotData {
                t_start: t,
                a: flatten(spec.a.at(t)),
                b: flatten(spec.b.at(t)),
                c: flatten(spec.c.at(t)),
                d: flatten(spec.d.at(t)),
                q: flatten(spec.q.at(t)),
                s: flatten(spec.s.at(t)),
                r: flatten(r),
                r_inv: flatten(&r_inv),
                rho: spec.control_cost_offset.at(t).iter().copied().collect(),
                b0: spec.drift_offset.at(t).iter().copied().collect(),
                sigma0: spec.diffusion_offset.at(t).iter().copied().collect(),
                q0: spec.state_cost_offset.at(t).iter().copied().collect(),
            });
        }
        Ok(LqTables {
            knots,
            h: flatten(&spec.h),
            h0: spec.terminal_offset.iter().copied().collect(),
        })
    }

    fn at(&self, t: f64) -> &KnotData {
        let idx = match self.knots.partition_point(|k| k.t_start <= t) {
            0 => 0,
            p => p - 1,
        };
        &self.knots[idx]
    }
}

fn mat_vec(mat: &[f64], v: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        let mut acc = 0.0;
        for c in 0..cols {
            acc += mat[r * cols + c] * v[c];
        }
        out[r] = acc;
    }
}

fn mat_t_vec(mat: &[f64], v: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for c in 0..cols {
        let mut acc = 0.0;
        for r in 0..rows {
            acc += mat[r * cols + c] * v[r];
        }
        out[c] = acc;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Substitutes the optimal feedback into dynamics and adjoint equation,
/// producing the coupled affine FBSDE on the state/adjoint pair. The driver
/// pairs the transposed state matrices with `Y` and `Z`, which is what makes
/// the monotonicity inner-product identity hold exactly; the certificate's
/// residual check enforces that choice.
pub fn build_hamiltonian_fbsde(spec: &LQSpec) -> Result<FBSDEProblem> {
    spec.validate()?;
    let n = spec.n;

    struct Blocks {
        t_start: f64,
        drift: [DMatrix<f64>; 3],
        drift0: DVector<f64>,
        diffusion: [DMatrix<f64>; 3],
        diffusion0: DVector<f64>,
        driver: [DMatrix<f64>; 3],
        driver0: DVector<f64>,
    }

    let mut blocks = Vec::new();
    let mut lipschitz_k = 0.0f64;
    let mut l_sigma = 0.0f64;
    let mut affine_norm = 0.0f64;
    for &t in &spec.knot_times() {
        let (a, b, c, d) = (spec.a.at(t), spec.b.at(t), spec.c.at(t), spec.d.at(t));
        let (q, s, r) = (spec.q.at(t), spec.s.at(t), spec.r.at(t));
        let rho = spec.control_cost_offset.at(t);
        let r_inv = r.clone().try_inverse().ok_or(Error::SingularR { t })?;
        let br = b * &r_inv;
        let dr = d * &r_inv;
        let str_ = s.transpose() * &r_inv;

        let drift = [a - &br * s, -(&br * b.transpose()), -(&br * d.transpose())];
        let drift0 = -(&br * rho) + spec.drift_offset.at(t);
        let diffusion = [c - &dr * s, -(&dr * b.transpose()), -(&dr * d.transpose())];
        let diffusion0 = -(&dr * rho) + spec.diffusion_offset.at(t);
        let driver = [
            q - s.transpose() * &r_inv * s,
            a.transpose() - &str_ * b.transpose(),
            c.transpose() - &str_ * d.transpose(),
        ];
        let driver0 = -(&str_ * rho) + spec.state_cost_offset.at(t);

        for group in [&drift, &diffusion, &driver] {
            let combined = stack_columns(group);
            lipschitz_k = lipschitz_k.max(combined.singular_values().max());
        }
        l_sigma = l_sigma.max(symmetric_max_eigenvalue(&(&dr * d.transpose())).abs());
        for v in [&drift0, &diffusion0, &driver0] {
            affine_norm = affine_norm.max(v.norm());
        }
        blocks.push(Blocks {
            t_start: t,
            drift,
            drift0,
            diffusion,
            diffusion0,
            driver,
            driver0,
        });
    }
    lipschitz_k = lipschitz_k.max(spec.h.singular_values().max());
    affine_norm = affine_norm.max(spec.terminal_offset.norm());
    let growth_l = 4.0 * (lipschitz_k + affine_norm);

    let blocks = Arc::new(blocks);
    let lookup = |blocks: &[Blocks], t: f64| -> usize {
        match blocks.partition_point(|b| b.t_start <= t) {
            0 => 0,
            p => p - 1,
        }
    };
    let apply = |m: &[DMatrix<f64>; 3], m0: &DVector<f64>, x: &[f64], y: &[f64], z: &[f64]| {
        let n_out = m0.len();
        let mut out = vec![0.0; n_out];
        for r in 0..n_out {
            let mut acc = m0[r];
            for (cc, xv) in x.iter().enumerate() {
                acc += m[0][(r, cc)] * xv;
            }
            for (cc, yv) in y.iter().enumerate() {
                acc += m[1][(r, cc)] * yv;
            }
            for (cc, zv) in z.iter().enumerate() {
                acc += m[2][(r, cc)] * zv;
            }
            out[r] = acc;
        }
        out
    };

    let b_blocks = blocks.clone();
    let s_blocks = blocks.clone();
    let f_blocks = blocks.clone();
    let h = spec.h.clone();
    let h0 = spec.terminal_offset.clone();
    let coefficients = CoefficientSet::new(
        Arc::new(move |t, x, y, z| {
            let blk = &b_blocks[lookup(&b_blocks, t)];
            apply(&blk.drift, &blk.drift0, x, y, z)
        }),
        Arc::new(move |t, x, y, z| {
            let blk = &s_blocks[lookup(&s_blocks, t)];
            apply(&blk.diffusion, &blk.diffusion0, x, y, z)
        }),
        Arc::new(move |t, x, y, z| {
            let blk = &f_blocks[lookup(&f_blocks, t)];
            apply(&blk.driver, &blk.driver0, x, y, z)
        }),
        Arc::new(move |x| {
            let mut out = vec![0.0; h.nrows()];
            for r in 0..h.nrows() {
                let mut acc = h0[r];
                for (c, xv) in x.iter().enumerate() {
                    acc += h[(r, c)] * xv;
                }
                out[r] = acc;
            }
            out
        }),
        growth_l,
        lipschitz_k,
        l_sigma,
    )?;
    FBSDEProblem::new(
        coefficients,
        n,
        n,
        spec.t0,
        spec.t_end,
        spec.x0.iter().copied().collect(),
    )
}

fn stack_columns(group: &[DMatrix<f64>; 3]) -> DMatrix<f64> {
    let rows = group[0].nrows();
    let cols: usize = group.iter().map(|m| m.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut offset = 0;
    for m in group {
        for r in 0..rows {
            for c in 0..m.ncols() {
                out[(r, offset + c)] = m[(r, c)];
            }
        }
        offset += m.ncols();
    }
    out
}

/// Monotonicity constants together with the worst sampled residual of
/// `<F(s,x,y,z), (x,y,z)> + c1 |x|^2 + c2 |B'y + D'z|^2`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MonotonicityCertificate {
    pub c1: f64,
    pub c2: f64,
    pub n_samples: usize,
    pub worst_residual: f64,
}

const CERTIFICATE_LIMIT: f64 = 1e-8;

/// Extracts `c1` (smallest Schur-complement eigenvalue, clamped at zero) and
/// `c2` (smallest eigenvalue of `R^{-1}`), then verifies the inner-product
/// identity on random samples by evaluating the built coefficient maps.
pub fn monotonicity_certificate(
    spec: &LQSpec,
    n_samples: usize,
    seed: u64,
) -> Result<MonotonicityCertificate> {
    let validation = spec.validate()?;
    let problem = build_hamiltonian_fbsde(spec)?;
    let tables = LqTables::build(spec)?;
    let n = spec.n;

    let c1 = validation.schur_min_eigenvalue.max(0.0);
    let c2 = spec
        .knot_times()
        .iter()
        .map(|&t| {
            let r_inv = spec
                .r
                .at(t)
                .clone()
                .try_inverse()
                .expect("validated spec has invertible R");
            symmetric_min_eigenvalue(&r_inv)
        })
        .fold(f64::INFINITY, f64::min);

    let mut rng = ChaCha8Rng::seed_from_u64(crate::subseed(seed, "monotonicity-certificate"));
    let mut worst = f64::NEG_INFINITY;
    let mut x = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut z = vec![0.0; n];
    let zeros = vec![0.0; n];
    let mut w = vec![0.0; spec.control_dim];
    let mut w_part = vec![0.0; spec.control_dim];
    for _ in 0..n_samples {
        let t = spec.t0 + rng.random::<f64>() * (spec.t_end - spec.t0);
        for v in x.iter_mut().chain(y.iter_mut()).chain(z.iter_mut()) {
            *v = 4.0 * rng.random::<f64>() - 2.0;
        }
        // Linear parts of the built coefficients (affine terms subtracted).
        let drift = problem.coefficients.drift_raw(t, &x, &y, &z);
        let drift_0 = problem.coefficients.drift_raw(t, &zeros, &zeros, &zeros);
        let diffusion = problem.coefficients.diffusion_raw(t, &x, &y, &z);
        let diffusion_0 = problem.coefficients.diffusion_raw(t, &zeros, &zeros, &zeros);
        let driver = problem.coefficients.driver_raw(t, &x, &y, &z);
        let driver_0 = problem.coefficients.driver_raw(t, &zeros, &zeros, &zeros);
        let mut pairing = 0.0;
        for i in 0..n {
            pairing += -(driver[i] - driver_0[i]) * x[i];
            pairing += (drift[i] - drift_0[i]) * y[i];
            pairing += (diffusion[i] - diffusion_0[i]) * z[i];
        }
        let knot = tables.at(t);
        mat_t_vec(&knot.b, &y, n, spec.control_dim, &mut w);
        mat_t_vec(&knot.d, &z, n, spec.control_dim, &mut w_part);
        for (wi, wp) in w.iter_mut().zip(&w_part) {
            *wi += wp;
        }
        let residual = pairing + c1 * dot(&x, &x) + c2 * dot(&w, &w);
        worst = worst.max(residual);
    }
    if worst > CERTIFICATE_LIMIT {
        return Err(Error::CertificateFailure {
            residual: worst,
            limit: CERTIFICATE_LIMIT,
        });
    }
    Ok(MonotonicityCertificate {
        c1,
        c2,
        n_samples,
        worst_residual: worst,
    })
}

/// Pathwise, nodewise evaluation of the stationarity feedback
/// `u = -R^{-1}(B'Y + D'Z + SX + rho)`.
pub fn optimal_control_from_solution(
    spec: &LQSpec,
    solution: &SolutionEnsemble,
) -> Result<PathEnsemble> {
    if solution.x.dimension() != spec.n || solution.y.dimension() != spec.n {
        return Err(Error::InvalidArgument(
            "solution dimensions do not match the LQ spec".into(),
        ));
    }
    let tables = LqTables::build(spec)?;
    let grid = solution.grid().clone();
    let n_steps = grid.n_steps();
    let (n, mu) = (spec.n, spec.control_dim);
    let rows: Vec<Vec<f64>> = (0..solution.n_paths())
        .into_par_iter()
        .map(|path| {
            let mut row = Vec::with_capacity((n_steps + 1) * mu);
            let mut acc = vec![0.0; mu];
            let mut tmp = vec![0.0; mu];
            let mut u = vec![0.0; mu];
            for k in 0..=n_steps {
                let t = grid.points()[k];
                let knot = tables.at(t);
                mat_t_vec(&knot.b, solution.y.value(path, k), n, mu, &mut acc);
                mat_t_vec(&knot.d, solution.z.value(path, k), n, mu, &mut tmp);
                for (a, b) in acc.iter_mut().zip(&tmp) {
                    *a += b;
                }
                mat_vec(&knot.s, solution.x.value(path, k), mu, n, &mut tmp);
                for ((a, b), r) in acc.iter_mut().zip(&tmp).zip(&knot.rho) {
                    *a += b + r;
                }
                mat_vec(&knot.r_inv, &acc, mu, mu, &mut u);
                row.extend(u.iter().map(|v| -v));
            }
            row
        })
        .collect();
    PathEnsemble::from_rows(grid, mu, rows)
}

/// Monte Carlo estimate of the cost functional under an open-loop control.
pub fn simulate_cost(
    spec: &LQSpec,
    control: &PathEnsemble,
    noise: &BrownianEnsemble,
    x0: &DVector<f64>,
) -> Result<Estimate> {
    if control.grid() != noise.grid() {
        return Err(Error::InvalidArgument(
            "control and noise must share the grid".into(),
        ));
    }
    if control.dimension() != spec.control_dim {
        return Err(Error::InvalidArgument(format!(
            "control dimension {} does not match the LQ problem's {}",
            control.dimension(),
            spec.control_dim
        )));
    }
    if control.n_paths() != noise.n_paths() {
        return Err(Error::InvalidArgument(
            "control and noise must hold the same number of paths".into(),
        ));
    }
    if x0.len() != spec.n {
        return Err(Error::InvalidArgument(format!(
            "initial state has {} entries, expected {}",
            x0.len(),
            spec.n
        )));
    }
    let tables = LqTables::build(spec)?;
    let grid = noise.grid();
    let n_steps = grid.n_steps();
    let (n, mu) = (spec.n, spec.control_dim);
    let costs: Vec<f64> = (0..noise.n_paths())
        .into_par_iter()
        .map(|path| {
            let mut x: Vec<f64> = x0.iter().copied().collect();
            let mut qx = vec![0.0; n];
            let mut sx = vec![0.0; mu];
            let mut ru = vec![0.0; mu];
            let mut bu = vec![0.0; n];
            let mut du = vec![0.0; n];
            let mut ax = vec![0.0; n];
            let mut cx = vec![0.0; n];
            let mut cost = 0.0;
            for k in 0..n_steps {
                let t = grid.points()[k];
                let knot = tables.at(t);
                let u = control.value(path, k);
                mat_vec(&knot.q, &x, n, n, &mut qx);
                mat_vec(&knot.s, &x, mu, n, &mut sx);
                mat_vec(&knot.r, u, mu, mu, &mut ru);
                let running = dot(&qx, &x)
                    + 2.0 * dot(&sx, u)
                    + dot(&ru, u)
                    + 2.0 * dot(&knot.q0, &x)
                    + 2.0 * dot(&knot.rho, u);
                cost += running * grid.dt(k);
                mat_vec(&knot.a, &x, n, n, &mut ax);
                mat_vec(&knot.b, u, n, mu, &mut bu);
                mat_vec(&knot.c, &x, n, n, &mut cx);
                mat_vec(&knot.d, u, n, mu, &mut du);
                let dt = grid.dt(k);
                let db = noise.increment(path, k);
                for i in 0..n {
                    x[i] += (ax[i] + bu[i] + knot.b0[i]) * dt
                        + (cx[i] + du[i] + knot.sigma0[i]) * db;
                }
            }
            let mut hx = vec![0.0; n];
            mat_vec(&tables.h, &x, n, n, &mut hx);
            cost + dot(&hx, &x) + 2.0 * dot(&tables.h0, &x)
        })
        .collect();
    let (mean, half_width) = mean_half_width(&costs);
    Ok(Estimate {
        value: mean,
        half_width,
    })
}

/// Outcome of one random perturbation direction.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PerturbationOutcome {
    pub margin: f64,
    pub second_difference: f64,
    pub cost_up: Estimate,
    pub cost_down: Estimate,
}

/// Cost margins of the extracted control against random bounded
/// perturbations, under common random numbers.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OptimalityReport {
    pub base_cost: Estimate,
    pub epsilon: f64,
    pub outcomes: Vec<PerturbationOutcome>,
    pub mean_margin: f64,
    pub min_margin: f64,
}

/// Evaluates `J(u + eps v)` and `J(u - eps v)` for random piecewise-constant
/// `|v| <= 1`, reporting margins and the convexity second differences.
pub fn optimality_test(
    spec: &LQSpec,
    base_solution: &SolutionEnsemble,
    noise: &BrownianEnsemble,
    n_perturbations: usize,
    epsilon: f64,
    seed: u64,
) -> Result<OptimalityReport> {
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidArgument("epsilon must be non-negative".into()));
    }
    let control = optimal_control_from_solution(spec, base_solution)?;
    let base_cost = simulate_cost(spec, &control, noise, &spec.x0)?;
    let grid = noise.grid().clone();
    let n_steps = grid.n_steps();
    let mu = spec.control_dim;
    let n_blocks = n_steps.clamp(1, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(crate::subseed(seed, "optimality-perturbations"));

    let mut outcomes = Vec::with_capacity(n_perturbations);
    for _ in 0..n_perturbations {
        // One deterministic-in-time direction shared by every path.
        let block_values: Vec<Vec<f64>> = (0..n_blocks)
            .map(|_| (0..mu).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect())
            .collect();
        let v_at = |k: usize| -> &[f64] {
            let block = (k * n_blocks / (n_steps + 1)).min(n_blocks - 1);
            &block_values[block]
        };
        let mut up_rows = Vec::with_capacity(control.n_paths());
        let mut down_rows = Vec::with_capacity(control.n_paths());
        for path in 0..control.n_paths() {
            let mut up = Vec::with_capacity((n_steps + 1) * mu);
            let mut down = Vec::with_capacity((n_steps + 1) * mu);
            for k in 0..=n_steps {
                let u = control.value(path, k);
                let v = v_at(k);
                for i in 0..mu {
                    up.push(u[i] + epsilon * v[i]);
                    down.push(u[i] - epsilon * v[i]);
                }
            }
            up_rows.push(up);
            down_rows.push(down);
        }
        let up = PathEnsemble::from_rows(grid.clone(), mu, up_rows)?;
        let down = PathEnsemble::from_rows(grid.clone(), mu, down_rows)?;
        let cost_up = simulate_cost(spec, &up, noise, &spec.x0)?;
        let cost_down = simulate_cost(spec, &down, noise, &spec.x0)?;
        let margin = cost_up.value - base_cost.value;
        let second_difference = if epsilon > 0.0 {
            (cost_up.value + cost_down.value - 2.0 * base_cost.value) / (epsilon * epsilon)
        } else {
            0.0
        };
        outcomes.push(PerturbationOutcome {
            margin,
            second_difference,
            cost_up,
            cost_down,
        });
    }
    let mean_margin = outcomes.iter().map(|o| o.margin).sum::<f64>() / outcomes.len().max(1) as f64;
    let min_margin = outcomes
        .iter()
        .map(|o| o.margin)
        .fold(f64::INFINITY, f64::min);
    Ok(OptimalityReport {
        base_cost,
        epsilon,
        outcomes,
        mean_margin,
        min_margin,
    })
}

/// Monte Carlo residual of the pairing identity
/// `E<X_T, H X_T> = E int <F(s,U) - F(s,U'), U - U'> ds + E<Y_0, xi - xi'>`
/// applied to the difference of two coupled solutions.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PairingResidual {
    pub mean: f64,
    pub residual: f64,
    pub half_width: f64,
}

pub fn ito_pairing_residual(
    spec: &LQSpec,
    solution: &SolutionEnsemble,
    solution_prime: &SolutionEnsemble,
) -> Result<PairingResidual> {
    if solution.provenance.seed != solution_prime.provenance.seed {
        return Err(Error::MismatchedNoise {
            seed_a: solution.provenance.seed,
            seed_b: solution_prime.provenance.seed,
        });
    }
    if solution.grid() != solution_prime.grid() || solution.n_paths() != solution_prime.n_paths() {
        return Err(Error::InvalidArgument(
            "coupled solutions must share grid and path count".into(),
        ));
    }
    let n = spec.n;
    let initial_gap: Vec<f64> = (0..n)
        .map(|i| solution.x.value(0, 0)[i] - solution_prime.x.value(0, 0)[i])
        .collect();
    if initial_gap.iter().all(|g| g.abs() < 1e-14) {
        return Err(Error::IdenticalInitialConditions);
    }
    let problem = build_hamiltonian_fbsde(spec)?;
    let tables = LqTables::build(spec)?;
    let grid = solution.grid();
    let n_steps = grid.n_steps();

    let samples: Vec<f64> = (0..solution.n_paths())
        .into_par_iter()
        .map(|path| {
            let mut pairing_integral = 0.0;
            for k in 0..n_steps {
                let t = grid.points()[k];
                let x = solution.x.value(path, k);
                let y = solution.y.value(path, k);
                let z = solution.z.value(path, k);
                let xp = solution_prime.x.value(path, k);
                let yp = solution_prime.y.value(path, k);
                let zp = solution_prime.z.value(path, k);
                let f_a = problem.coefficients.driver_raw(t, x, y, z);
                let f_b = problem.coefficients.driver_raw(t, xp, yp, zp);
                let b_a = problem.coefficients.drift_raw(t, x, y, z);
                let b_b = problem.coefficients.drift_raw(t, xp, yp, zp);
                let s_a = problem.coefficients.diffusion_raw(t, x, y, z);
                let s_b = problem.coefficients.diffusion_raw(t, xp, yp, zp);
                let mut pairing = 0.0;
                for i in 0..n {
                    pairing += -(f_a[i] - f_b[i]) * (x[i] - xp[i]);
                    pairing += (b_a[i] - b_b[i]) * (y[i] - yp[i]);
                    pairing += (s_a[i] - s_b[i]) * (z[i] - zp[i]);
                }
                pairing_integral += pairing * grid.dt(k);
            }
            let x_t = solution.x.value(path, n_steps);
            let xp_t = solution_prime.x.value(path, n_steps);
            let gap_t: Vec<f64> = (0..n).map(|i| x_t[i] - xp_t[i]).collect();
            let mut h_gap = vec![0.0; n];
            mat_vec(&tables.h, &gap_t, n, n, &mut h_gap);
            let terminal = dot(&gap_t, &h_gap);
            let y0 = solution.y.value(path, 0);
            let y0p = solution_prime.y.value(path, 0);
            let initial: f64 = (0..n).map(|i| (y0[i] - y0p[i]) * initial_gap[i]).sum();
            terminal - pairing_integral - initial
        })
        .collect();
    let (mean, half_width) = mean_half_width(&samples);
    Ok(PairingResidual {
        mean,
        residual: mean.abs(),
        half_width,
    })
}

/// Riccati table `P(t)`, feedback gains, and the quadratic value.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub times: Vec<f64>,
    pub p: Vec<DMatrix<f64>>,
    pub gain: Vec<DMatrix<f64>>,
}

impl RiccatiSolution {
    pub fn p_at_start(&self) -> &DMatrix<f64> {
        &self.p[0]
    }

    /// `x0' P(t0) x0`.
    pub fn value(&self, x0: &DVector<f64>) -> f64 {
        (x0.transpose() * &self.p[0] * x0)[(0, 0)]
    }
}

/// Classical fourth-order backward integration of the Riccati equation
/// `-dP/dt = A'P + PA - P B R^{-1} B' P + Q`, `P(T) = H`, valid for the
/// state-feedback subclass `C = D = 0`, `S = 0`, zero affine terms. Serves
/// as the independent oracle for the Hamiltonian pipeline.
pub fn riccati_oracle(spec: &LQSpec, n_steps: usize) -> Result<RiccatiSolution> {
    spec.validate()?;
    if n_steps == 0 {
        return Err(Error::ZeroSteps);
    }
    for &t in &spec.knot_times() {
        if spec.c.at(t).norm() > 1e-12 {
            return Err(Error::RestrictionViolation("C"));
        }
        if spec.d.at(t).norm() > 1e-12 {
            return Err(Error::RestrictionViolation("D"));
        }
        if spec.s.at(t).norm() > 1e-12 {
            return Err(Error::RestrictionViolation("S"));
        }
        if spec.drift_offset.at(t).norm() > 1e-12
            || spec.diffusion_offset.at(t).norm() > 1e-12
            || spec.state_cost_offset.at(t).norm() > 1e-12
            || spec.control_cost_offset.at(t).norm() > 1e-12
        {
            return Err(Error::RestrictionViolation("affine terms"));
        }
    }
    if spec.terminal_offset.norm() > 1e-12 {
        return Err(Error::RestrictionViolation("affine terms"));
    }

    let horizon = spec.t_end - spec.t0;
    let dt = horizon / n_steps as f64;
    // Integrate the time-reversed equation forward from H.
    let derivative = |s: f64, p: &DMatrix<f64>| -> DMatrix<f64> {
        let t = spec.t_end - s;
        let a = spec.a.at(t);
        let b = spec.b.at(t);
        let q = spec.q.at(t);
        let r_inv = spec
            .r
            .at(t)
            .clone()
            .try_inverse()
            .expect("validated spec has invertible R");
        a.transpose() * p + p * a - p * b * &r_inv * b.transpose() * p + q
    };

    let mut p = spec.h.clone();
    let mut reversed = vec![p.clone()];
    for k in 0..n_steps {
        let s = k as f64 * dt;
        let k1 = derivative(s, &p);
        let k2 = derivative(s + 0.5 * dt, &(&p + &k1 * (0.5 * dt)));
        let k3 = derivative(s + 0.5 * dt, &(&p + &k2 * (0.5 * dt)));
        let k4 = derivative(s + dt, &(&p + &k3 * dt));
        p = &p + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        reversed.push(p.clone());
    }
    reversed.reverse();

    let times: Vec<f64> = (0..=n_steps)
        .map(|k| spec.t0 + horizon * k as f64 / n_steps as f64)
        .collect();
    let gain = times
        .iter()
        .zip(&reversed)
        .map(|(&t, p)| {
            let r_inv = spec
                .r
                .at(t)
                .clone()
                .try_inverse()
                .expect("validated spec has invertible R");
            -(r_inv * spec.b.at(t).transpose() * p)
        })
        .collect();
    Ok(RiccatiSolution {
        times,
        p: reversed,
        gain,
    })
}

//! Closed-form reference solutions used as ground truth across the test
//! suite: a linear drift/driver family whose backward component is a
//! time-scaled copy of the forward one, and a martingale oracle for the
//! driverless problem with linear terminal data.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{CoefficientSet, FBSDEProblem};
use crate::solver::{Provenance, SolutionEnsemble};
use crate::stochastic::{BrownianEnsemble, PathEnsemble};

/// Bounded scalar profile of time: a constant or a table with linear
/// interpolation (clamped outside its knots).
#[derive(Debug, Clone, PartialEq)]
pub enum ScalarProfile {
    Constant(f64),
    Table { times: Vec<f64>, values: Vec<f64> },
}

impl ScalarProfile {
    pub fn constant(v: f64) -> Self {
        ScalarProfile::Constant(v)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ScalarProfile::Constant(v) => {
                if !v.is_finite() {
                    return Err(Error::InvalidArgument("profile value not finite".into()));
                }
            }
            ScalarProfile::Table { times, values } => {
                if times.len() != values.len() || times.is_empty() {
                    return Err(Error::InvalidArgument(
                        "profile table needs matching non-empty times and values".into(),
                    ));
                }
                if times.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(Error::InvalidArgument(
                        "profile table times must strictly increase".into(),
                    ));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidArgument("profile values must be finite".into()));
                }
            }
        }
        Ok(())
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            ScalarProfile::Constant(v) => *v,
            ScalarProfile::Table { times, values } => {
                if t <= times[0] {
                    return values[0];
                }
                if t >= *times.last().unwrap() {
                    return *values.last().unwrap();
                }
                let idx = times.partition_point(|&s| s <= t) - 1;
                let theta = (t - times[idx]) / (times[idx + 1] - times[idx]);
                values[idx] + theta * (values[idx + 1] - values[idx])
            }
        }
    }

    /// Exact integral of the (piecewise linear) profile over `[a, b]`.
    /// Agrees with the trapezoid rule on any grid refinement.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        match self {
            ScalarProfile::Constant(v) => v * (b - a),
            ScalarProfile::Table { times, .. } => {
                // Integrate the interpolant piece by piece between its knots.
                let mut knots: Vec<f64> = vec![a];
                knots.extend(times.iter().copied().filter(|&s| s > a && s < b));
                knots.push(b);
                knots
                    .windows(2)
                    .map(|w| 0.5 * (self.eval(w[0]) + self.eval(w[1])) * (w[1] - w[0]))
                    .sum()
            }
        }
    }

    fn sup_abs(&self, t0: f64, t_end: f64) -> f64 {
        match self {
            ScalarProfile::Constant(v) => v.abs(),
            ScalarProfile::Table { .. } => (0..=1000)
                .map(|i| self.eval(t0 + (t_end - t0) * i as f64 / 1000.0).abs())
                .fold(0.0, f64::max),
        }
    }
}

/// Parameters of the linear example family: profiles `a, b, c` on
/// `[t0, t_end]` and the initial value `xi`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example1Params {
    pub a: ScalarProfile,
    pub b: ScalarProfile,
    pub c: ScalarProfile,
    pub t0: f64,
    pub t_end: f64,
    pub xi: f64,
}

impl Example1Params {
    pub fn constant(a: f64, b: f64, c: f64, t0: f64, t_end: f64, xi: f64) -> Self {
        Example1Params {
            a: ScalarProfile::constant(a),
            b: ScalarProfile::constant(b),
            c: ScalarProfile::constant(c),
            t0,
            t_end,
            xi,
        }
    }

    fn validate(&self) -> Result<()> {
        self.a.validate()?;
        self.b.validate()?;
        self.c.validate()?;
        if !(self.t_end > self.t0) {
            return Err(Error::HorizonOrder {
                t0: self.t0,
                t_end: self.t_end,
            });
        }
        Ok(())
    }

    /// Antiderivative `P(t)` of the `a` profile, vanishing at `t0`.
    pub fn p_of(&self, t: f64) -> f64 {
        self.a.integral(self.t0, t)
    }
}

/// Assembles the FBSDE whose solution satisfies `Y_s = P_s X_s`:
/// forward drift `b_s y` and diffusion `c_s`, terminal data `P_T x`, and a
/// backward component whose ds-coefficient is `a_s x + b_s P_s y` (so the
/// driver in `dY = -f ds + Z dB` form is the negative of that).
pub fn example1_problem(params: &Example1Params) -> Result<FBSDEProblem> {
    params.validate()?;
    let (t0, t_end) = (params.t0, params.t_end);
    let p_terminal = params.p_of(t_end);

    let sup_a = params.a.sup_abs(t0, t_end);
    let sup_b = params.b.sup_abs(t0, t_end);
    let sup_c = params.c.sup_abs(t0, t_end);
    let sup_p = (0..=1000)
        .map(|i| params.p_of(t0 + (t_end - t0) * i as f64 / 1000.0).abs())
        .fold(0.0, f64::max);
    let growth_l = sup_a + sup_b + sup_c + sup_b * sup_p + p_terminal.abs();
    let lipschitz_k = [sup_b, sup_a.max(sup_b * sup_p), p_terminal.abs()]
        .into_iter()
        .fold(0.0, f64::max);

    let bp = params.b.clone();
    let cp = params.c.clone();
    let driver_params = params.clone();
    let coefficients = CoefficientSet::new(
        Arc::new(move |t, _x, y, _z| vec![bp.eval(t) * y[0]]),
        Arc::new(move |t, _x, _y, _z| vec![cp.eval(t)]),
        Arc::new(move |t, x, y, _z| {
            let p = driver_params.p_of(t);
            vec![-(driver_params.a.eval(t) * x[0] + driver_params.b.eval(t) * p * y[0])]
        }),
        Arc::new(move |x| vec![p_terminal * x[0]]),
        growth_l,
        lipschitz_k,
        0.0,
    )?;
    FBSDEProblem::new(coefficients, 1, 1, t0, t_end, vec![params.xi])
}

/// Exact solution of the example family on the noise grid.
///
/// `X` uses the integrating-factor form of its linear forward equation (the
/// exponential of the trapezoid-summed `b_s P_s`), so the only discretization
/// left is the quadrature of the profiles themselves; `Y_k = P_k X_k` and
/// `Z_k = P_k c_k` follow pointwise.
pub fn example1_closed_form(
    params: &Example1Params,
    noise: &BrownianEnsemble,
) -> Result<SolutionEnsemble> {
    params.validate()?;
    let grid = noise.grid().clone();
    if (grid.t0() - params.t0).abs() > 1e-9 || (grid.t_end() - params.t_end).abs() > 1e-9 {
        return Err(Error::InvalidArgument(
            "noise grid must span the example horizon".into(),
        ));
    }
    let n_steps = grid.n_steps();
    let points = grid.points();

    let p: Vec<f64> = points.iter().map(|&t| params.p_of(t)).collect();
    let c_vals: Vec<f64> = points.iter().map(|&t| params.c.eval(t)).collect();
    let g_vals: Vec<f64> = points
        .iter()
        .zip(&p)
        .map(|(&t, &pk)| params.b.eval(t) * pk)
        .collect();
    // Trapezoid cumulative of b_s P_s, exact for piecewise-linear integrands.
    let mut growth = Vec::with_capacity(n_steps + 1);
    growth.push(0.0);
    for k in 0..n_steps {
        growth.push(growth[k] + 0.5 * (g_vals[k] + g_vals[k + 1]) * grid.dt(k));
    }
    let factor: Vec<f64> = growth.iter().map(|g| g.exp()).collect();

    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..noise.n_paths())
        .into_par_iter()
        .map(|path| {
            let mut x_row = Vec::with_capacity(n_steps + 1);
            let mut y_row = Vec::with_capacity(n_steps + 1);
            let mut z_row = Vec::with_capacity(n_steps + 1);
            let mut stoch = 0.0; // left-endpoint Ito sum of c_s / E_s dB_s
            for k in 0..=n_steps {
                let x = factor[k] * (params.xi + stoch);
                x_row.push(x);
                y_row.push(p[k] * x);
                z_row.push(p[k] * c_vals[k]);
                if k < n_steps {
                    stoch += c_vals[k] / factor[k] * noise.increment(path, k);
                }
            }
            (x_row, y_row, z_row)
        })
        .collect();

    let mut x_rows = Vec::with_capacity(rows.len());
    let mut y_rows = Vec::with_capacity(rows.len());
    let mut z_rows = Vec::with_capacity(rows.len());
    for (x, y, z) in rows {
        x_rows.push(x);
        y_rows.push(y);
        z_rows.push(z);
    }
    let x = PathEnsemble::from_rows(grid.clone(), 1, x_rows)?;
    let y = PathEnsemble::from_rows(grid.clone(), 1, y_rows)?;
    let z = PathEnsemble::from_rows(grid, 1, z_rows)?;
    Ok(SolutionEnsemble::new(
        x,
        y,
        z,
        Provenance {
            solver: "example1-closed-form".into(),
            seed: noise.seed(),
        },
        vec![0.0; noise.n_paths()],
        Vec::new(),
    ))
}

/// Per-path maximum residual of the discrete backward equation
/// `Y_{k+1} - Y_k + f(t_k, X_k, Y_k, Z_k) dt_k - Z_k dB_k`.
pub fn backward_residual(
    solution: &SolutionEnsemble,
    problem: &FBSDEProblem,
    noise: &BrownianEnsemble,
) -> Result<Vec<f64>> {
    if noise.seed() != solution.provenance.seed {
        return Err(Error::MismatchedNoise {
            seed_a: solution.provenance.seed,
            seed_b: noise.seed(),
        });
    }
    let grid = solution.x.grid();
    if grid != noise.grid() {
        return Err(Error::InvalidArgument(
            "solution and noise grids differ".into(),
        ));
    }
    let n_steps = grid.n_steps();
    let m = solution.y.dimension();
    (0..solution.x.n_paths())
        .map(|path| {
            let mut worst = 0.0f64;
            for k in 0..n_steps {
                let t = grid.points()[k];
                let x = solution.x.value(path, k);
                let y = solution.y.value(path, k);
                let z = solution.z.value(path, k);
                let f = problem.coefficients.driver(t, x, y, z)?;
                let y_next = solution.y.value(path, k + 1);
                let dw = noise.increment(path, k);
                let dt = grid.dt(k);
                let mut norm2 = 0.0;
                for i in 0..m {
                    let r = y_next[i] - y[i] + f[i] * dt - z[i] * dw;
                    norm2 += r * r;
                }
                worst = worst.max(norm2.sqrt());
            }
            Ok(worst)
        })
        .collect()
}

/// Problem with zero drift and driver, unit diffusion, and terminal data
/// `slope * x`; its backward component is the martingale `slope * X`.
pub fn gaussian_linear_problem(slope: f64, t0: f64, t_end: f64, xi: f64) -> Result<FBSDEProblem> {
    let coefficients = CoefficientSet::new(
        Arc::new(|_, _, _, _| vec![0.0]),
        Arc::new(|_, _, _, _| vec![1.0]),
        Arc::new(|_, _, _, _| vec![0.0]),
        Arc::new(move |x| vec![slope * x[0]]),
        1.0 + slope.abs(),
        slope.abs(),
        0.0,
    )?;
    FBSDEProblem::new(coefficients, 1, 1, t0, t_end, vec![xi])
}

/// Exact solution of [`gaussian_linear_problem`]: `X = xi + B`,
/// `Y = slope * X`, `Z = slope`.
pub fn gaussian_linear_oracle(
    slope: f64,
    noise: &BrownianEnsemble,
    xi: f64,
) -> Result<SolutionEnsemble> {
    let grid = noise.grid().clone();
    let n_steps = grid.n_steps();
    let mut x_rows = Vec::with_capacity(noise.n_paths());
    let mut y_rows = Vec::with_capacity(noise.n_paths());
    let mut z_rows = Vec::with_capacity(noise.n_paths());
    for path in 0..noise.n_paths() {
        let cumulative = noise.path_cumulative(path);
        let x_row: Vec<f64> = cumulative.iter().map(|b| xi + b).collect();
        let y_row: Vec<f64> = x_row.iter().map(|x| slope * x).collect();
        x_rows.push(x_row);
        y_rows.push(y_row);
        z_rows.push(vec![slope; n_steps + 1]);
    }
    let x = PathEnsemble::from_rows(grid.clone(), 1, x_rows)?;
    let y = PathEnsemble::from_rows(grid.clone(), 1, y_rows)?;
    let z = PathEnsemble::from_rows(grid, 1, z_rows)?;
    Ok(SolutionEnsemble::new(
        x,
        y,
        z,
        Provenance {
            solver: "gaussian-linear-oracle".into(),
            seed: noise.seed(),
        },
        vec![0.0; noise.n_paths()],
        Vec::new(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stochastic::{build_grid, sample_brownian};

    #[test]
    fn zero_profiles_give_constant_solution() {
        let params = Example1Params::constant(0.0, 0.0, 0.0, 0.0, 1.0, 5.0);
        let grid = build_grid(0.0, 1.0, 16).unwrap();
        let noise = sample_brownian(&grid, 4, 9).unwrap();
        let sol = example1_closed_form(&params, &noise).unwrap();
        for p in 0..4 {
            for k in 0..=16 {
                assert_eq!(sol.x.value(p, k), &[5.0]);
                assert_eq!(sol.y.value(p, k), &[0.0]);
                assert_eq!(sol.z.value(p, k), &[0.0]);
            }
        }
        let problem = example1_problem(&params).unwrap();
        let residuals = backward_residual(&sol, &problem, &noise).unwrap();
        assert!(residuals.iter().all(|r| *r == 0.0));
    }

    #[test]
    fn unit_profiles_track_shifted_brownian() {
        // a = 1, b = 0, c = 1: X = xi + B, Y = s X, Z = s.
        let params = Example1Params::constant(1.0, 0.0, 1.0, 0.0, 1.0, 1.0);
        let grid = build_grid(0.0, 1.0, 64).unwrap();
        let noise = sample_brownian(&grid, 32, 17).unwrap();
        let sol = example1_closed_form(&params, &noise).unwrap();
        for path in 0..32 {
            let b = noise.path_cumulative(path);
            for k in 0..=64 {
                let s = grid.points()[k];
                assert!((sol.x.value(path, k)[0] - (1.0 + b[k])).abs() < 1e-12);
                assert!((sol.y.value(path, k)[0] - s * (1.0 + b[k])).abs() < 1e-12);
                assert!((sol.z.value(path, k)[0] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_coupled_case_matches_exponential() {
        // a = 1, b = 1, c = 0: X_s = exp(s^2 / 2), Y = s X, Z = 0.
        let params = Example1Params::constant(1.0, 1.0, 0.0, 0.0, 1.0, 1.0);
        let grid = build_grid(0.0, 1.0, 128).unwrap();
        let noise = sample_brownian(&grid, 1, 3).unwrap();
        let sol = example1_closed_form(&params, &noise).unwrap();
        for k in 0..=128 {
            let s = grid.points()[k];
            let exact = (0.5 * s * s).exp();
            assert!(
                (sol.x.value(0, k)[0] - exact).abs() < 1e-12,
                "node {k}: {} vs {exact}",
                sol.x.value(0, k)[0]
            );
            assert!((sol.y.value(0, k)[0] - s * exact).abs() < 1e-12);
            assert_eq!(sol.z.value(0, k)[0], 0.0);
        }
    }

    #[test]
    fn example_problem_coefficients() {
        let params = Example1Params::constant(1.0, 0.0, 1.0, 0.0, 1.0, 1.0);
        let problem = example1_problem(&params).unwrap();
        let sigma = problem.coefficients.diffusion_raw(0.5, &[2.0], &[3.0], &[0.0]);
        assert_eq!(sigma, vec![1.0]);
        let phi = problem.coefficients.terminal_raw(&[2.0]);
        assert!((phi[0] - 2.0).abs() < 1e-12);
        // ds-coefficient of the backward equation is a x = x here, so the
        // driver in dY = -f ds + Z dB form is its negative.
        let f = problem.coefficients.driver_raw(0.5, &[2.0], &[3.0], &[0.0]);
        assert!((f[0] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn coupled_problem_driver_includes_p_weighted_y() {
        let params = Example1Params::constant(1.0, 1.0, 0.0, 0.0, 1.0, 1.0);
        let problem = example1_problem(&params).unwrap();
        let drift = problem.coefficients.drift_raw(0.5, &[0.0], &[2.0], &[0.0]);
        assert!((drift[0] - 2.0).abs() < 1e-12);
        // -f = a x + b P y = x + 0.5 y at t = 0.5
        let f = problem.coefficients.driver_raw(0.5, &[1.0], &[2.0], &[0.0]);
        assert!((f[0] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn closed_form_satisfies_discrete_backward_equation() {
        let params = Example1Params::constant(1.0, 0.0, 1.0, 0.0, 1.0, 1.0);
        let problem = example1_problem(&params).unwrap();
        let mut previous = f64::INFINITY;
        let mut orders = Vec::new();
        for n_steps in [64usize, 128, 256] {
            let grid = build_grid(0.0, 1.0, n_steps).unwrap();
            let noise = sample_brownian(&grid, 256, 23).unwrap();
            let sol = example1_closed_form(&params, &noise).unwrap();
            let residuals = backward_residual(&sol, &problem, &noise).unwrap();
            let worst = residuals.iter().cloned().fold(0.0, f64::max);
            assert!(worst <= 2.0 / n_steps as f64, "n={n_steps}: {worst}");
            if previous.is_finite() {
                orders.push((previous / worst).log2());
            }
            previous = worst;
        }
        for order in &orders {
            assert!(*order >= 0.9, "observed order {order}");
        }
    }

    #[test]
    fn corrupted_solution_is_detected() {
        let params = Example1Params::constant(1.0, 0.0, 1.0, 0.0, 1.0, 1.0);
        let problem = example1_problem(&params).unwrap();
        let grid = build_grid(0.0, 1.0, 64).unwrap();
        let noise = sample_brownian(&grid, 4, 29).unwrap();
        let mut sol = example1_closed_form(&params, &noise).unwrap();
        let mut y = sol.y.value(2, 30).to_vec();
        y[0] += 1.0;
        sol.y.set_value(2, 30, &y);
        let residuals = backward_residual(&sol, &problem, &noise).unwrap();
        assert!(residuals[2] >= 1.0 - 0.1);
        assert!(residuals[0] < 0.1);
    }

    #[test]
    fn martingale_oracle_values() {
        let grid = build_grid(0.0, 1.0, 32).unwrap();
        let noise = sample_brownian(&grid, 8, 5).unwrap();
        let zero = gaussian_linear_oracle(0.0, &noise, 1.0).unwrap();
        for p in 0..8 {
            assert_eq!(zero.y.value(p, 16), &[0.0]);
            assert_eq!(zero.z.value(p, 16), &[0.0]);
        }
        let sol = gaussian_linear_oracle(3.0, &noise, 2.0).unwrap();
        assert_eq!(sol.y.value(0, 0), &[6.0]);
        let unit = gaussian_linear_oracle(1.0, &noise, 0.0).unwrap();
        for p in 0..8 {
            let b = noise.path_cumulative(p);
            for k in 0..=32 {
                assert!((unit.y.value(p, k)[0] - b[k]).abs() < 1e-12);
                assert_eq!(unit.z.value(p, k)[0], 1.0);
            }
        }
    }

    #[test]
    fn pathwise_lipschitz_with_explicit_constant() {
        // |Y - Y'| = P_s |X - X'| <= (sup P) |X - X'| under common noise.
        let params = Example1Params::constant(1.0, 0.0, 1.0, 0.0, 1.0, 1.0);
        let shifted = Example1Params {
            xi: 3.0,
            ..params.clone()
        };
        let grid = build_grid(0.0, 1.0, 64).unwrap();
        let noise = sample_brownian(&grid, 64, 31).unwrap();
        let sol_a = example1_closed_form(&params, &noise).unwrap();
        let sol_b = example1_closed_form(&shifted, &noise).unwrap();
        let sup_p = 1.0;
        for p in 0..64 {
            for k in 0..=64 {
                let dy = (sol_a.y.value(p, k)[0] - sol_b.y.value(p, k)[0]).abs();
                let dx = (sol_a.x.value(p, k)[0] - sol_b.x.value(p, k)[0]).abs();
                assert!(dy <= sup_p * dx + 1e-12);
            }
        }
    }

    #[test]
    fn table_profile_interpolation_and_integral() {
        let profile = ScalarProfile::Table {
            times: vec![0.0, 0.5, 1.0],
            values: vec![0.0, 1.0, 0.0],
        };
        assert_eq!(profile.eval(0.25), 0.5);
        assert_eq!(profile.eval(2.0), 0.0);
        // Triangle of height 1 over [0, 1].
        assert!((profile.integral(0.0, 1.0) - 0.5).abs() < 1e-14);
        assert!((profile.integral(0.0, 0.5) - 0.25).abs() < 1e-14);
    }
}

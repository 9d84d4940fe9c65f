//! Monte Carlo verification of moment and stability estimates: pathwise
//! functionals `sup |X|^p`, `sup |Y|^p`, `(int |Z|^2 ds)^{p/2}`, implied
//! constants over initial-condition ladders, coupled-difference estimates
//! under common random numbers, the growth-constant audit, and the `K_p`
//! smallness gates.

use crate::error::{Error, Result};
use crate::solver::SolutionEnsemble;

/// The three pathwise quantities entering the moment estimates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathFunctionals {
    pub sup_x_p: f64,
    pub sup_y_p: f64,
    /// `(sum_k |Z_k|^2 dt_k)^{p/2}` by left-endpoint Riemann sum.
    pub z_quadratic_p: f64,
}

fn node_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Discrete sup over grid nodes and left-endpoint quadrature of `|Z|^2`.
pub fn path_functionals(solution: &SolutionEnsemble, p: f64) -> Result<Vec<PathFunctionals>> {
    if !(p >= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "moment order p must be at least 1, got {p}"
        )));
    }
    let grid = solution.grid();
    let n_steps = grid.n_steps();
    Ok((0..solution.n_paths())
        .map(|path| {
            let mut sup_x = 0.0f64;
            let mut sup_y = 0.0f64;
            let mut z_quad = 0.0f64;
            for k in 0..=n_steps {
                sup_x = sup_x.max(node_norm(solution.x.value(path, k)));
                sup_y = sup_y.max(node_norm(solution.y.value(path, k)));
                if k < n_steps {
                    let z = node_norm(solution.z.value(path, k));
                    z_quad += z * z * grid.dt(k);
                }
            }
            PathFunctionals {
                sup_x_p: sup_x.powf(p),
                sup_y_p: sup_y.powf(p),
                z_quadratic_p: z_quad.powf(0.5 * p),
            }
        })
        .collect())
}

/// Sample mean and 95% normal-approximation half-width.
pub fn mean_half_width(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * (var / n as f64).sqrt())
}

/// A moment estimate with its Monte Carlo half-width.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub half_width: f64,
}

/// Moment estimates for one initial condition, and the implied constant
/// `(sum of estimates) / (1 + |xi|^p)`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LpReport {
    pub p: f64,
    pub xi: Vec<f64>,
    pub sup_x: Estimate,
    pub sup_y: Estimate,
    pub z_quadratic: Estimate,
    pub implied_constant: f64,
    pub n_paths: usize,
    pub seed: u64,
}

/// Report for one solved initial condition.
pub fn lp_report(solution: &SolutionEnsemble, xi: &[f64], p: f64) -> Result<LpReport> {
    let functionals = path_functionals(solution, p)?;
    let sup_x: Vec<f64> = functionals.iter().map(|f| f.sup_x_p).collect();
    let sup_y: Vec<f64> = functionals.iter().map(|f| f.sup_y_p).collect();
    let z_quad: Vec<f64> = functionals.iter().map(|f| f.z_quadratic_p).collect();
    let (mx, hx) = mean_half_width(&sup_x);
    let (my, hy) = mean_half_width(&sup_y);
    let (mz, hz) = mean_half_width(&z_quad);
    let xi_norm = node_norm(xi);
    Ok(LpReport {
        p,
        xi: xi.to_vec(),
        sup_x: Estimate {
            value: mx,
            half_width: hx,
        },
        sup_y: Estimate {
            value: my,
            half_width: hy,
        },
        z_quadratic: Estimate {
            value: mz,
            half_width: hz,
        },
        implied_constant: (mx + my + mz) / (1.0 + xi_norm.powf(p)),
        n_paths: solution.n_paths(),
        seed: solution.provenance.seed,
    })
}

/// Per-entry reports over a ladder of solved initial conditions.
pub fn estimate_lp_bound(
    ladder: &[(&SolutionEnsemble, Vec<f64>)],
    p: f64,
) -> Result<Vec<LpReport>> {
    if ladder.is_empty() {
        return Err(Error::InvalidArgument("ladder must be non-empty".into()));
    }
    ladder
        .iter()
        .map(|(solution, xi)| lp_report(solution, xi, p))
        .collect()
}

/// Coupled-difference estimates for two solutions under common noise.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StabilityReport {
    pub p: f64,
    pub xi: Vec<f64>,
    pub xi_prime: Vec<f64>,
    pub sup_dx: Estimate,
    pub sup_dy: Estimate,
    pub dz_quadratic: Estimate,
    /// `(sum of estimates) / |xi - xi'|^p`.
    pub implied_constant: f64,
    /// Fraction of (path, node) pairs with `|Y - Y'| > kappa_hat |X - X'|`.
    pub pointwise_violation_rate: f64,
    pub kappa_hat: f64,
    pub n_paths: usize,
    pub seed: u64,
}

/// Difference functionals of `(X - X', Y - Y', Z - Z')` plus the pointwise
/// Lipschitz violation rate at threshold `kappa_hat`.
pub fn estimate_stability(
    solution: &SolutionEnsemble,
    solution_prime: &SolutionEnsemble,
    xi: &[f64],
    xi_prime: &[f64],
    p: f64,
    kappa_hat: f64,
) -> Result<StabilityReport> {
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
    let separation: Vec<f64> = xi.iter().zip(xi_prime).map(|(a, b)| a - b).collect();
    let separation_norm = node_norm(&separation);
    if separation_norm == 0.0 {
        return Err(Error::IdenticalInitialConditions);
    }

    let grid = solution.grid();
    let n_steps = grid.n_steps();
    let n_paths = solution.n_paths();
    let mut sup_dx = Vec::with_capacity(n_paths);
    let mut sup_dy = Vec::with_capacity(n_paths);
    let mut dz_quad = Vec::with_capacity(n_paths);
    let mut violations = 0usize;
    for path in 0..n_paths {
        let mut mx = 0.0f64;
        let mut my = 0.0f64;
        let mut qz = 0.0f64;
        for k in 0..=n_steps {
            let dx = diff_norm(solution.x.value(path, k), solution_prime.x.value(path, k));
            let dy = diff_norm(solution.y.value(path, k), solution_prime.y.value(path, k));
            mx = mx.max(dx);
            my = my.max(dy);
            if dy > kappa_hat * dx {
                violations += 1;
            }
            if k < n_steps {
                let dz = diff_norm(solution.z.value(path, k), solution_prime.z.value(path, k));
                qz += dz * dz * grid.dt(k);
            }
        }
        sup_dx.push(mx.powf(p));
        sup_dy.push(my.powf(p));
        dz_quad.push(qz.powf(0.5 * p));
    }
    let (mx, hx) = mean_half_width(&sup_dx);
    let (my, hy) = mean_half_width(&sup_dy);
    let (mz, hz) = mean_half_width(&dz_quad);
    Ok(StabilityReport {
        p,
        xi: xi.to_vec(),
        xi_prime: xi_prime.to_vec(),
        sup_dx: Estimate {
            value: mx,
            half_width: hx,
        },
        sup_dy: Estimate {
            value: my,
            half_width: hy,
        },
        dz_quadratic: Estimate {
            value: mz,
            half_width: hz,
        },
        implied_constant: (mx + my + mz) / separation_norm.powf(p),
        pointwise_violation_rate: violations as f64 / (n_paths * (n_steps + 1)) as f64,
        kappa_hat,
        n_paths,
        seed: solution.provenance.seed,
    })
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt()
}

/// Iterated growth of the per-interval constant when sub-interval estimates
/// are chained: `C -> 2C + C^2` per extension step, with a `2^{p/2}`
/// inflation from merging the quadratic-variation integrals. The recursion
/// is doubly exponential; overflow is reported as saturation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GrowthAudit {
    pub value: f64,
    pub saturated: bool,
}

pub fn audit_constant_growth(c1: f64, p: f64, k: u32) -> Result<GrowthAudit> {
    if !(c1 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "base constant must be positive, got {c1}"
        )));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if k == 1 {
        // No merge happens on a single interval, so no inflation either.
        return Ok(GrowthAudit {
            value: c1,
            saturated: false,
        });
    }
    let mut c = c1;
    for _ in 2..=k {
        c = 2.0 * c + c * c;
        if !c.is_finite() {
            return Ok(GrowthAudit {
                value: f64::INFINITY,
                saturated: true,
            });
        }
    }
    let inflated = (2.0f64).powf(0.5 * p) * c;
    Ok(GrowthAudit {
        value: inflated,
        saturated: !inflated.is_finite(),
    })
}

/// Upper and lower Burkholder-Davis-Gundy constants for a given `p`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KpInputs {
    pub p: f64,
    pub upper: f64,
    pub lower: f64,
}

impl KpInputs {
    pub fn new(p: f64, upper: f64, lower: f64) -> Result<Self> {
        if !(upper > 0.0 && lower > 0.0) {
            return Err(Error::InvalidArgument(
                "BDG constants must be positive".into(),
            ));
        }
        if lower > upper {
            return Err(Error::InvalidArgument(format!(
                "lower BDG constant {lower} exceeds upper {upper}"
            )));
        }
        Ok(KpInputs { p, upper, lower })
    }

    /// Default constants `(lower, upper) = (1, 4p)`, recorded in reports as
    /// assumptions rather than silently baked in.
    pub fn default_for(p: f64) -> Result<Self> {
        KpInputs::new(p, 4.0 * p, 1.0)
    }
}

/// `K_p = upper^{1/p} * (p/(p+1) + 2 * lower^{-1/p} * (2p-1)/(p-1))`.
pub fn compute_kp(inputs: &KpInputs) -> Result<f64> {
    let p = inputs.p;
    if !(p > 1.0) {
        return Err(Error::KpDomain(p));
    }
    let lead = inputs.upper.powf(1.0 / p);
    let tail = 2.0 * inputs.lower.powf(-1.0 / p) * (2.0 * p - 1.0) / (p - 1.0);
    Ok(lead * (p / (p + 1.0) + tail))
}

/// Verdicts of the strict smallness inequalities: the Lipschitz gate
/// `K_p L_sigma K < 1` and, when an empirical stability constant is
/// supplied, the stability gate `K_p L_sigma sqrt(C_1) < 1`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SmallnessGates {
    pub lipschitz_gate: bool,
    pub stability_gate: Option<bool>,
}

pub fn smallness_gates(
    kp: f64,
    l_sigma: f64,
    k: f64,
    sqrt_c1: Option<f64>,
) -> Result<SmallnessGates> {
    for (name, v) in [("K_p", kp), ("L_sigma", l_sigma), ("K", k)] {
        if !(v >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "{name} must be non-negative, got {v}"
            )));
        }
    }
    if let Some(s) = sqrt_c1 {
        if !(s >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sqrt(C_1) must be non-negative, got {s}"
            )));
        }
    }
    Ok(SmallnessGates {
        lipschitz_gate: kp * l_sigma * k < 1.0,
        stability_gate: sqrt_c1.map(|s| kp * l_sigma * s < 1.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{Provenance, SolutionEnsemble};
    use crate::stochastic::{build_grid, PathEnsemble};

    fn constant_solution(x: f64, y: f64, z: f64, n_paths: usize, seed: u64) -> SolutionEnsemble {
        let grid = build_grid(0.0, 1.0, 4).unwrap();
        let n_points = 5;
        let row = |v: f64| vec![v; n_points];
        let rows = |v: f64| (0..n_paths).map(|_| row(v)).collect::<Vec<_>>();
        SolutionEnsemble::new(
            PathEnsemble::from_rows(grid.clone(), 1, rows(x)).unwrap(),
            PathEnsemble::from_rows(grid.clone(), 1, rows(y)).unwrap(),
            PathEnsemble::from_rows(grid, 1, rows(z)).unwrap(),
            Provenance {
                solver: "constant".into(),
                seed,
            },
            vec![0.0; n_paths],
            Vec::new(),
        )
    }

    #[test]
    fn functionals_on_simple_paths() {
        let zero = constant_solution(0.0, 0.0, 0.0, 3, 1);
        for f in path_functionals(&zero, 2.0).unwrap() {
            assert_eq!((f.sup_x_p, f.sup_y_p, f.z_quadratic_p), (0.0, 0.0, 0.0));
        }
        let two = constant_solution(2.0, 0.0, 0.0, 1, 1);
        let f = &path_functionals(&two, 3.0).unwrap()[0];
        assert_eq!(f.sup_x_p, 8.0);
        // Z = 1 on [0, 1] at p = 4: (int |Z|^2)^2 = 1.
        let unit_z = constant_solution(0.0, 0.0, 1.0, 1, 1);
        let f = &path_functionals(&unit_z, 4.0).unwrap()[0];
        assert!((f.z_quadratic_p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn functionals_monotone_in_p() {
        let big = constant_solution(2.0, 3.0, 2.0, 1, 1);
        let lo = &path_functionals(&big, 2.0).unwrap()[0];
        let hi = &path_functionals(&big, 4.0).unwrap()[0];
        assert!(hi.sup_x_p >= lo.sup_x_p);
        assert!(hi.sup_y_p >= lo.sup_y_p);
        assert!(hi.z_quadratic_p >= lo.z_quadratic_p);

        let small = constant_solution(0.5, 0.25, 0.5, 1, 1);
        let lo = &path_functionals(&small, 2.0).unwrap()[0];
        let hi = &path_functionals(&small, 4.0).unwrap()[0];
        assert!(hi.sup_x_p <= lo.sup_x_p);
        assert!(hi.sup_y_p <= lo.sup_y_p);
        assert!(hi.z_quadratic_p <= lo.z_quadratic_p);
    }

    #[test]
    fn zero_solution_has_zero_implied_constant() {
        let zero = constant_solution(0.0, 0.0, 0.0, 4, 1);
        let report = lp_report(&zero, &[0.0], 2.0).unwrap();
        assert_eq!(report.implied_constant, 0.0);
        let ladder = vec![(&zero, vec![0.0]), (&zero, vec![1.0])];
        let reports = estimate_lp_bound(&ladder, 2.0).unwrap();
        assert!(reports.iter().all(|r| r.implied_constant == 0.0));
    }

    #[test]
    fn stability_rejects_identical_initial_conditions() {
        let a = constant_solution(1.0, 0.0, 0.0, 2, 7);
        let b = constant_solution(1.0, 0.0, 0.0, 2, 7);
        let err = estimate_stability(&a, &b, &[1.0], &[1.0], 2.0, 1.0).unwrap_err();
        assert!(matches!(err, Error::IdenticalInitialConditions));
    }

    #[test]
    fn stability_rejects_mismatched_noise() {
        let a = constant_solution(1.0, 0.0, 0.0, 2, 7);
        let b = constant_solution(0.0, 0.0, 0.0, 2, 8);
        let err = estimate_stability(&a, &b, &[1.0], &[0.0], 2.0, 1.0).unwrap_err();
        assert!(matches!(err, Error::MismatchedNoise { .. }));
    }

    #[test]
    fn growth_audit_examples() {
        assert_eq!(audit_constant_growth(1.0, 2.0, 1).unwrap().value, 1.0);
        assert_eq!(audit_constant_growth(1.0, 2.0, 2).unwrap().value, 6.0);
        assert_eq!(audit_constant_growth(2.0, 4.0, 2).unwrap().value, 32.0);
    }

    #[test]
    fn growth_audit_monotone_and_saturating() {
        let mut previous = 0.0;
        for k in 1..=6 {
            let audit = audit_constant_growth(1.5, 2.0, k).unwrap();
            assert!(audit.value > previous);
            previous = audit.value;
        }
        for c1 in [0.5, 1.0, 2.0, 4.0] {
            let lo = audit_constant_growth(c1, 2.0, 3).unwrap().value;
            let hi = audit_constant_growth(c1 * 1.5, 2.0, 3).unwrap().value;
            assert!(hi > lo);
        }
        let saturated = audit_constant_growth(1e200, 2.0, 3).unwrap();
        assert!(saturated.saturated);
        assert!(saturated.value.is_infinite());
    }

    #[test]
    fn kp_exact_values() {
        let kp = compute_kp(&KpInputs::new(2.0, 1.0, 1.0).unwrap()).unwrap();
        assert_eq!(kp, 20.0 / 3.0);
        let kp3 = compute_kp(&KpInputs::new(3.0, 1.0, 1.0).unwrap()).unwrap();
        assert_eq!(kp3, 23.0 / 4.0);
        assert!(matches!(
            compute_kp(&KpInputs::new(1.0, 1.0, 1.0).unwrap()),
            Err(Error::KpDomain(_))
        ));
    }

    #[test]
    fn kp_monotone_in_bdg_constants() {
        let base = compute_kp(&KpInputs::new(3.0, 2.0, 1.0).unwrap()).unwrap();
        let upper_bumped = compute_kp(&KpInputs::new(3.0, 2.5, 1.0).unwrap()).unwrap();
        assert!(upper_bumped > base);
        let lower_bumped = compute_kp(&KpInputs::new(3.0, 2.0, 1.5).unwrap()).unwrap();
        assert!(lower_bumped < base);
    }

    #[test]
    fn gate_verdicts() {
        let gates = smallness_gates(1.0, 0.0, 5.0, None).unwrap();
        assert!(gates.lipschitz_gate);
        assert_eq!(gates.stability_gate, None);
        // Boundary product exactly 1 fails the strict inequality.
        let boundary = smallness_gates(2.0, 0.5, 1.0, None).unwrap();
        assert!(!boundary.lipschitz_gate);
        let pass = smallness_gates(20.0 / 3.0, 0.1, 1.0, Some(0.5)).unwrap();
        assert!(pass.lipschitz_gate);
        assert_eq!(pass.stability_gate, Some(true));
    }
}

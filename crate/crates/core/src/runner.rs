//! Experiment orchestration: dispatches a validated configuration to the
//! module pipelines, writes columnar tables plus a JSON report, and returns
//! the report. Identical configuration and seed produce byte-identical
//! numeric tables.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::config::{ExperimentConfig, ExperimentKind, ProblemConfig, StabilityConfig};
use crate::error::{Error, Result};
use crate::lp::{
    compute_kp, estimate_lp_bound, estimate_stability, smallness_gates, Estimate, KpInputs,
    LpReport, SmallnessGates, StabilityReport,
};
use crate::lq::{
    build_hamiltonian_fbsde, ito_pairing_residual, monotonicity_certificate,
    optimal_control_from_solution, optimality_test, riccati_oracle, simulate_cost,
    MonotonicityCertificate, OptimalityReport, PairingResidual,
};
use crate::model::FBSDEProblem;
use crate::oracles::{backward_residual, example1_closed_form, Example1Params};
use crate::solver::{
    build_decoupling_field, field_lipschitz_profile, solve_global, DecouplingField,
    SolutionEnsemble,
};
use crate::stochastic::{build_grid, sample_brownian, BrownianEnsemble, TimeGrid};
use crate::table::{write_atomic, write_csv};
use crate::{subseed, table};

/// Kind-specific numeric outputs embedded in the report.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "experiment", rename_all = "kebab-case")]
pub enum Outputs {
    Solve {
        terminal_residual_mean: f64,
        terminal_residual_max: f64,
        field_lipschitz_max: f64,
    },
    Field {
        field_lipschitz_max: f64,
        max_contraction_ratio: f64,
        final_delta: f64,
    },
    LpVerify {
        reports: Vec<LpReport>,
        stability: StabilityReport,
    },
    Stability {
        reports: Vec<StabilityReport>,
    },
    Lq {
        certificate: MonotonicityCertificate,
        base_cost: Estimate,
        optimality: OptimalityReport,
        pairing: PairingResidual,
        riccati_value: Option<f64>,
        d_norm_max: f64,
    },
    Oracle {
        n_steps: Vec<usize>,
        max_residuals: Vec<f64>,
        observed_orders: Vec<f64>,
    },
    KpGate {
        inputs: KpInputs,
        kp: f64,
        l_sigma: f64,
        k: f64,
        gates: SmallnessGates,
    },
}

/// What a run produced: echo of the configuration, timing, outputs, and the
/// list of files written next to the report.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub artifact_version: String,
    pub kind: String,
    pub seed: u64,
    pub wall_clock_seconds: f64,
    pub warnings: Vec<String>,
    pub files: Vec<String>,
    pub outputs: Outputs,
    pub config: ExperimentConfig,
}

/// Runs one experiment, writing its tables and `report.json` under `out_dir`.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<RunReport> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let started = Instant::now();
    let grid = build_grid(
        config.grid.t0,
        config.grid.t0 + config.grid.horizon,
        config.grid.n_steps,
    )?;
    let mut files = Vec::new();
    let mut warnings = Vec::new();

    let outputs = match config.kind {
        ExperimentKind::Solve => run_solve(config, &grid, out_dir, &mut files, &mut warnings)?,
        ExperimentKind::Field => run_field(config, &grid, out_dir, &mut files, &mut warnings)?,
        ExperimentKind::LpVerify => {
            run_lp_verify(config, &grid, out_dir, &mut files, &mut warnings)?
        }
        ExperimentKind::Stability => {
            run_stability(config, &grid, out_dir, &mut files, &mut warnings)?
        }
        ExperimentKind::Lq => run_lq(config, &grid, out_dir, &mut files, &mut warnings)?,
        ExperimentKind::Oracle => run_oracle(config, out_dir, &mut files)?,
        ExperimentKind::KpGate => run_kp_gate(config, out_dir, &mut files)?,
    };

    let report = RunReport {
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        kind: config.kind.as_str().to_string(),
        seed: config.seed,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        warnings,
        files: files.clone(),
        outputs,
        config: config.clone(),
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Config(format!("report serialization failed: {e}")))?;
    write_atomic(&out_dir.join("report.json"), json.as_bytes())?;
    Ok(report)
}

/// Resolves the output directory: explicit flag, then the config, then the
/// `FBSDE_LAB_OUT` environment variable, then the working directory.
pub fn resolve_out_dir(flag: Option<PathBuf>, config: &ExperimentConfig) -> PathBuf {
    flag.or_else(|| config.out_dir.clone())
        .or_else(|| std::env::var_os("FBSDE_LAB_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn solve_pipeline(
    config: &ExperimentConfig,
    grid: &TimeGrid,
    warnings: &mut Vec<String>,
) -> Result<(FBSDEProblem, DecouplingField, BrownianEnsemble)> {
    let problem = config.build_problem()?;
    let params = config.solver.to_params();
    let field = build_decoupling_field(&problem, &params, grid)?;
    warnings.extend(field.diagnostics.warnings.iter().cloned());
    let noise = sample_brownian(grid, config.monte_carlo.n_paths, subseed(config.seed, "noise"))?;
    Ok((problem, field, noise))
}

fn write_field_table(
    field: &DecouplingField,
    out_dir: &Path,
    files: &mut Vec<String>,
) -> Result<()> {
    let n = field.dim_n();
    let m = field.dim_m();
    let mut header: Vec<String> = vec!["time".into()];
    for i in 0..n {
        header.push(format!("x{i}"));
    }
    for c in 0..m {
        header.push(format!("u{c}"));
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut rows = Vec::new();
    for (idx, &t) in field.times().iter().enumerate() {
        let slice = field.slice(idx);
        for node in field.nodes() {
            let mut row = Vec::with_capacity(1 + n + m);
            row.push(t);
            row.extend_from_slice(&node);
            row.extend(slice.eval(&node));
            rows.push(row);
        }
    }
    write_csv(&out_dir.join("field.csv"), &header_refs, &rows)?;
    files.push("field.csv".into());
    Ok(())
}

fn run_solve(
    config: &ExperimentConfig,
    grid: &TimeGrid,
    out_dir: &Path,
    files: &mut Vec<String>,
    warnings: &mut Vec<String>,
) -> Result<Outputs> {
    let (problem, field, noise) = solve_pipeline(config, grid, warnings)?;
    let solution = solve_global(&problem, &field, &noise)?;
    warnings.extend(solution.warnings.iter().cloned());

    write_field_table(&field, out_dir, files)?;
    let rows = solution_stats_rows(&solution);
    write_csv(
        &out_dir.join("solution_stats.csv"),
        &[
            "time", "mean_x", "std_x", "mean_y", "std_y", "mean_z", "std_z",
        ],
        &rows,
    )?;
    files.push("solution_stats.csv".into());

    let profile = field_lipschitz_profile(&field);
    let residual_mean =
        solution.terminal_residuals.iter().sum::<f64>() / solution.n_paths() as f64;
    let residual_max = solution
        .terminal_residuals
        .iter()
        .cloned()
        .fold(0.0, f64::max);
    Ok(Outputs::Solve {
        terminal_residual_mean: residual_mean,
        terminal_residual_max: residual_max,
        field_lipschitz_max: profile.iter().cloned().fold(0.0, f64::max),
    })
}

fn solution_stats_rows(solution: &SolutionEnsemble) -> Vec<Vec<f64>> {
    let grid = solution.grid();
    let n_paths = solution.n_paths();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    (0..=grid.n_steps())
        .map(|k| {
            let t = grid.points()[k];
            let stats = |ensemble: &crate::stochastic::PathEnsemble| {
                let samples: Vec<f64> = (0..n_paths).map(|p| norm(ensemble.value(p, k))).collect();
                let mean = samples.iter().sum::<f64>() / n_paths as f64;
                let var = if n_paths > 1 {
                    samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>()
                        / (n_paths - 1) as f64
                } else {
                    0.0
                };
                (mean, var.sqrt())
            };
            let (mx, sx) = stats(&solution.x);
            let (my, sy) = stats(&solution.y);
            let (mz, sz) = stats(&solution.z);
            vec![t, mx, sx, my, sy, mz, sz]
        })
        .collect()
}

fn run_field(
    config: &ExperimentConfig,
    grid: &TimeGrid,
    out_dir: &Path,
    files: &mut Vec<String>,
    warnings: &mut Vec<String>,
) -> Result<Outputs> {
    let problem = config.build_problem()?;
    let params = config.solver.to_params();
    let field = build_decoupling_field(&problem, &params, grid)?;
    warnings.extend(field.diagnostics.warnings.iter().cloned());
    write_field_table(&field, out_dir, files)?;
    let profile = field_lipschitz_profile(&field);
    let rows: Vec<Vec<f64>> = field
        .times()
        .iter()
        .zip(&profile)
        .map(|(&t, &s)| vec![t, s])
        .collect();
    write_csv(&out_dir.join("lipschitz_profile.csv"), &["time", "max_slope"], &rows)?;
    files.push("lipschitz_profile.csv".into());
    Ok(Outputs::Field {
        field_lipschitz_max: profile.iter().cloned().fold(0.0, f64::max),
        max_contraction_ratio: field.diagnostics.max_contraction_ratio,
        final_delta: field.diagnostics.final_delta,
    })
}

fn run_lp_verify(
    config: &ExperimentConfig,
    grid: &TimeGrid,
    out_dir: &Path,
    files: &mut Vec<String>,
    warnings: &mut Vec<String>,
) -> Result<Outputs> {
    let lp = config.lp.clone().unwrap_or_default();
    let (problem, field, noise) = solve_pipeline(config, grid, warnings)?;

    // The field does not depend on the initial condition, so one build
    // serves the whole ladder; common noise couples the entries.
    let mut solutions = Vec::with_capacity(lp.xi_ladder.len());
    for &xi in &lp.xi_ladder {
        let restarted = problem.with_initial(vec![xi])?;
        let solution = solve_global(&restarted, &field, &noise)?;
        warnings.extend(solution.warnings.iter().cloned());
        solutions.push((xi, solution));
    }
    let ladder: Vec<(&SolutionEnsemble, Vec<f64>)> = solutions
        .iter()
        .map(|(xi, sol)| (sol, vec![*xi]))
        .collect();
    let reports = estimate_lp_bound(&ladder, lp.p)?;
    let rows: Vec<Vec<f64>> = reports
        .iter()
        .map(|r| {
            vec![
                r.p,
                r.xi[0],
                r.sup_x.value,
                r.sup_x.half_width,
                r.sup_y.value,
                r.sup_y.half_width,
                r.z_quadratic.value,
                r.z_quadratic.half_width,
                r.implied_constant,
            ]
        })
        .collect();
    write_csv(
        &out_dir.join("lp_table.csv"),
        &[
            "p",
            "xi",
            "sup_x",
            "sup_x_hw",
            "sup_y",
            "sup_y_hw",
            "z_quadratic",
            "z_quadratic_hw",
            "implied_constant",
        ],
        &rows,
    )?;
    files.push("lp_table.csv".into());

    let (xi_a, xi_b) = match lp.stability_pair {
        Some([a, b]) => (a, b),
        None => {
            let mut distinct = lp.xi_ladder.clone();
            distinct.dedup();
            if distinct.len() < 2 {
                return Err(Error::Config(
                    "lp.stability_pair is required when the ladder has fewer than two distinct \
                     entries"
                        .into(),
                ));
            }
            (distinct[0], distinct[1])
        }
    };
    let kappa_hat = 1.05
        * field_lipschitz_profile(&field)
            .iter()
            .cloned()
            .fold(0.0, f64::max);
    let sol_a = solve_global(&problem.with_initial(vec![xi_a])?, &field, &noise)?;
    let sol_b = solve_global(&problem.with_initial(vec![xi_b])?, &field, &noise)?;
    let stability = estimate_stability(&sol_a, &sol_b, &[xi_a], &[xi_b], lp.p, kappa_hat)?;
    write_stability_table(out_dir, files, "stability_table.csv", std::slice::from_ref(&stability))?;
    Ok(Outputs::LpVerify { reports, stability })
}

fn write_stability_table(
    out_dir: &Path,
    files: &mut Vec<String>,
    name: &str,
    reports: &[StabilityReport],
) -> Result<()> {
    let rows: Vec<Vec<f64>> = reports
        .iter()
        .map(|r| {
            vec![
                r.p,
                r.xi[0],
                r.xi_prime[0],
                r.sup_dx.value,
                r.sup_dx.half_width,
                r.sup_dy.value,
                r.sup_dy.half_width,
                r.dz_quadratic.value,
                r.dz_quadratic.half_width,
                r.implied_constant,
                r.pointwise_violation_rate,
                r.kappa_hat,
            ]
        })
        .collect();
    write_csv(
        &out_dir.join(name),
        &[
            "p",
            "xi",
            "xi_prime",
            "sup_dx",
            "sup_dx_hw",
            "sup_dy",
            "sup_dy_hw",
            "dz_quadratic",
            "dz_quadratic_hw",
            "implied_constant",
            "violation_rate",
            "kappa_hat",
        ],
        &rows,
    )?;
    files.push(name.into());
    Ok(())
}

fn run_stability(
    config: &ExperimentConfig,
    grid: &TimeGrid,
    out_dir: &Path,
    files: &mut Vec<String>,
    warnings: &mut Vec<String>,
) -> Result<Outputs> {
    let stability: StabilityConfig = config.stability.clone().unwrap_or_default();
    let (problem, field, noise) = solve_pipeline(config, grid, warnings)?;
    let kappa_hat = 1.05
        * field_lipschitz_profile(&field)
            .iter()
            .cloned()
            .fold(0.0, f64::max);
    let base = solve_global(&problem.with_initial(vec![stability.xi_base])?, &field, &noise)?;
    let mut reports = Vec::new();
    for &separation in &stability.separations {
        let shifted = solve_global(
            &problem.with_initial(vec![stability.xi_base + separation])?,
            &field,
            &noise,
        )?;
        for &p in &stability.p_values {
            reports.push(estimate_stability(
                &base,
                &shifted,
                &[stability.xi_base],
                &[stability.xi_base + separation],
                p,
                kappa_hat,
            )?);
        }
    }
    write_stability_table(out_dir, files, "stability_table.csv", &reports)?;
    Ok(Outputs::Stability { reports })
}

fn run_lq(
    config: &ExperimentConfig,
    grid: &TimeGrid,
    out_dir: &Path,
    files: &mut Vec<String>,
    warnings: &mut Vec<String>,
) -> Result<Outputs> {
    let lq = config.lq.clone().expect("validated lq config");
    let spec = config.lq_spec()?;
    let validation = spec.validate()?;
    let certificate = monotonicity_certificate(
        &spec,
        lq.certificate_samples,
        subseed(config.seed, "certificate"),
    )?;
    let problem = build_hamiltonian_fbsde(&spec)?;
    let params = config.solver.to_params();
    let field = build_decoupling_field(&problem, &params, grid)?;
    warnings.extend(field.diagnostics.warnings.iter().cloned());
    let noise = sample_brownian(grid, config.monte_carlo.n_paths, subseed(config.seed, "noise"))?;
    let solution = solve_global(&problem, &field, &noise)?;
    warnings.extend(solution.warnings.iter().cloned());

    let control = optimal_control_from_solution(&spec, &solution)?;
    let base_cost = simulate_cost(&spec, &control, &noise, &spec.x0)?;
    let optimality = optimality_test(
        &spec,
        &solution,
        &noise,
        lq.n_perturbations,
        lq.epsilon,
        subseed(config.seed, "optimality"),
    )?;
    let rows: Vec<Vec<f64>> = optimality
        .outcomes
        .iter()
        .enumerate()
        .map(|(i, o)| {
            vec![
                i as f64,
                o.margin,
                o.second_difference,
                o.cost_up.value,
                o.cost_up.half_width,
                o.cost_down.value,
                o.cost_down.half_width,
            ]
        })
        .collect();
    write_csv(
        &out_dir.join("optimality_table.csv"),
        &[
            "perturbation",
            "margin",
            "second_difference",
            "cost_up",
            "cost_up_hw",
            "cost_down",
            "cost_down_hw",
        ],
        &rows,
    )?;
    files.push("optimality_table.csv".into());

    let xi_prime: Vec<f64> = lq
        .xi_prime
        .to_vector(spec.n, "xi_prime")?
        .iter()
        .copied()
        .collect();
    let prime = solve_global(&problem.with_initial(xi_prime)?, &field, &noise)?;
    let pairing = ito_pairing_residual(&spec, &solution, &prime)?;

    let riccati_value = match riccati_oracle(&spec, config.grid.n_steps) {
        Ok(riccati) => {
            let mut header: Vec<String> = vec!["time".into()];
            let (pr, pc) = riccati.p[0].shape();
            let (gr, gc) = riccati.gain[0].shape();
            for i in 0..pr {
                for j in 0..pc {
                    header.push(format!("p{i}{j}"));
                }
            }
            for i in 0..gr {
                for j in 0..gc {
                    header.push(format!("gain{i}{j}"));
                }
            }
            let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
            let rows: Vec<Vec<f64>> = riccati
                .times
                .iter()
                .zip(riccati.p.iter().zip(&riccati.gain))
                .map(|(&t, (p, g))| {
                    let mut row = vec![t];
                    row.extend(p.transpose().iter().copied());
                    row.extend(g.transpose().iter().copied());
                    row
                })
                .collect();
            write_csv(&out_dir.join("riccati_table.csv"), &header_refs, &rows)?;
            files.push("riccati_table.csv".into());
            Some(riccati.value(&spec.x0))
        }
        Err(Error::RestrictionViolation(_)) => None,
        Err(other) => return Err(other),
    };
    let d_norm_max = validation
        .d_norms
        .iter()
        .map(|(_, d)| *d)
        .fold(0.0, f64::max);
    Ok(Outputs::Lq {
        certificate,
        base_cost,
        optimality,
        pairing,
        riccati_value,
        d_norm_max,
    })
}

fn run_oracle(
    config: &ExperimentConfig,
    out_dir: &Path,
    files: &mut Vec<String>,
) -> Result<Outputs> {
    let (a, b, c, xi) = match config.problem.as_ref() {
        Some(ProblemConfig::Example1 { a, b, c, xi }) => (a, b, c, *xi),
        _ => {
            return Err(Error::Config(
                "oracle experiments require the example1 problem family".into(),
            ))
        }
    };
    let t0 = config.grid.t0;
    let t_end = t0 + config.grid.horizon;
    let params = Example1Params {
        a: a.to_profile(),
        b: b.to_profile(),
        c: c.to_profile(),
        t0,
        t_end,
        xi,
    };
    let problem = crate::oracles::example1_problem(&params)?;

    let base = config.grid.n_steps.max(4);
    let ladder = [base / 4, base / 2, base];
    let mut max_residuals = Vec::new();
    let mut rows = Vec::new();
    for &n in &ladder {
        let grid = build_grid(t0, t_end, n)?;
        let noise = sample_brownian(&grid, config.monte_carlo.n_paths, subseed(config.seed, "noise"))?;
        let solution = example1_closed_form(&params, &noise)?;
        let residuals = backward_residual(&solution, &problem, &noise)?;
        let max = residuals.iter().cloned().fold(0.0, f64::max);
        let mean = residuals.iter().sum::<f64>() / residuals.len() as f64;
        rows.push(vec![n as f64, max, mean]);
        max_residuals.push(max);
    }
    write_csv(
        &out_dir.join("residual_table.csv"),
        &["n_steps", "max_residual", "mean_residual"],
        &rows,
    )?;
    files.push("residual_table.csv".into());
    let observed_orders: Vec<f64> = max_residuals
        .windows(2)
        .map(|w| (w[0] / w[1]).log2())
        .collect();
    Ok(Outputs::Oracle {
        n_steps: ladder.to_vec(),
        max_residuals,
        observed_orders,
    })
}

fn run_kp_gate(
    config: &ExperimentConfig,
    out_dir: &Path,
    files: &mut Vec<String>,
) -> Result<Outputs> {
    let gate = config.kp_gate.clone().expect("validated kp-gate config");
    let inputs = KpInputs::new(
        gate.p,
        gate.k_upper.unwrap_or(4.0 * gate.p),
        gate.k_lower.unwrap_or(1.0),
    )?;
    let kp = compute_kp(&inputs)?;
    let gates = smallness_gates(kp, gate.l_sigma, gate.k, gate.sqrt_c1)?;
    let stability_gate_flag = match gates.stability_gate {
        None => -1.0,
        Some(false) => 0.0,
        Some(true) => 1.0,
    };
    write_csv(
        &out_dir.join("kp_table.csv"),
        &[
            "p",
            "k_upper",
            "k_lower",
            "kp",
            "l_sigma",
            "k",
            "lipschitz_gate",
            "stability_gate",
        ],
        &[vec![
            inputs.p,
            inputs.upper,
            inputs.lower,
            kp,
            gate.l_sigma,
            gate.k,
            if gates.lipschitz_gate { 1.0 } else { 0.0 },
            stability_gate_flag,
        ]],
    )?;
    files.push("kp_table.csv".into());
    Ok(Outputs::KpGate {
        inputs,
        kp,
        l_sigma: gate.l_sigma,
        k: gate.k,
        gates,
    })
}

/// Convenience wrapper for tests: reads back a table written by a run.
pub fn read_table(out_dir: &Path, name: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    table::read_csv(&out_dir.join(name))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn temp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("fbsde-lab-runner-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn small_lp_config() -> ExperimentConfig {
        parse_config(
            r#"
            kind = "lp-verify"
            seed = 2024

            [grid]
            n_steps = 32

            [monte_carlo]
            n_paths = 200

            [solver.spatial_grid]
            center = 1.0
            half_width = 6.0
            n_nodes = 41

            [problem]
            family = "example1"
            a = 1.0
            c = 1.0
            xi = 1.0

            [lp]
            p = 2.0
            xi_ladder = [0.0, 1.0]
            "#,
        )
        .unwrap()
    }

    #[test]
    fn lp_verify_writes_expected_files() {
        let dir = temp_dir("files");
        let report = run_experiment(&small_lp_config(), &dir).unwrap();
        assert!(dir.join("report.json").is_file());
        assert!(dir.join("lp_table.csv").is_file());
        assert!(dir.join("stability_table.csv").is_file());
        assert!(report.files.contains(&"lp_table.csv".to_string()));
        assert!(report.files.contains(&"stability_table.csv".to_string()));
    }

    #[test]
    fn reruns_are_byte_identical() {
        let dir_a = temp_dir("det-a");
        let dir_b = temp_dir("det-b");
        let config = small_lp_config();
        run_experiment(&config, &dir_a).unwrap();
        run_experiment(&config, &dir_b).unwrap();
        for name in ["lp_table.csv", "stability_table.csv"] {
            let a = fs::read(dir_a.join(name)).unwrap();
            let b = fs::read(dir_b.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }

    #[test]
    fn solve_run_writes_field_and_stats() {
        let dir = temp_dir("solve");
        let config = parse_config(
            r#"
            kind = "solve"
            seed = 11

            [grid]
            n_steps = 16

            [monte_carlo]
            n_paths = 50

            [solver.spatial_grid]
            center = 1.0
            half_width = 4.0
            n_nodes = 21

            [problem]
            family = "example1"
            a = 1.0
            c = 1.0
            xi = 1.0
            "#,
        )
        .unwrap();
        let report = run_experiment(&config, &dir).unwrap();
        assert!(dir.join("field.csv").is_file());
        assert!(dir.join("solution_stats.csv").is_file());
        match report.outputs {
            Outputs::Solve {
                terminal_residual_max,
                field_lipschitz_max,
                ..
            } => {
                assert!(terminal_residual_max <= 1e-8);
                assert!((field_lipschitz_max - 1.0).abs() <= 0.01);
            }
            other => panic!("unexpected outputs {other:?}"),
        }
        let (header, rows) = read_table(&dir, "solution_stats.csv").unwrap();
        assert_eq!(header[0], "time");
        assert_eq!(rows.len(), 17);
    }

    #[test]
    fn stability_run_scans_separations() {
        let dir = temp_dir("stability");
        let config = parse_config(
            r#"
            kind = "stability"
            seed = 13

            [grid]
            n_steps = 16

            [monte_carlo]
            n_paths = 50

            [solver.spatial_grid]
            center = 0.0
            half_width = 8.0
            n_nodes = 41

            [problem]
            family = "example1"
            a = 1.0
            c = 1.0

            [stability]
            p_values = [2.0]
            separations = [0.5, 2.0]
            "#,
        )
        .unwrap();
        let report = run_experiment(&config, &dir).unwrap();
        match report.outputs {
            Outputs::Stability { reports } => {
                assert_eq!(reports.len(), 2);
                for r in &reports {
                    assert!((r.implied_constant - 2.0).abs() < 1e-6);
                }
            }
            other => panic!("unexpected outputs {other:?}"),
        }
        let (_, rows) = read_table(&dir, "stability_table.csv").unwrap();
        assert_eq!(rows.len(), 2);
    }

    #[test]
    fn two_dimensional_lq_run_matches_riccati_value() {
        // Diagonal system: two decoupled copies of the unit fixed point, so
        // the optimal cost from x0 = (1, 1) is 2 and P stays the identity.
        let dir = temp_dir("lq2d");
        let config = parse_config(
            r#"
            kind = "lq"
            seed = 23

            [grid]
            n_steps = 64

            [monte_carlo]
            n_paths = 200

            [solver.spatial_grid]
            center = 0.5
            half_width = 2.5
            n_nodes = 21

            [lq]
            b = [[1.0, 0.0], [0.0, 1.0]]
            q = [[1.0, 0.0], [0.0, 1.0]]
            r = [[1.0, 0.0], [0.0, 1.0]]
            h = [[1.0, 0.0], [0.0, 1.0]]
            x0 = [1.0, 1.0]
            xi_prime = [0.0, 0.0]
            r_lower_bound = 0.5
            n_perturbations = 3
            certificate_samples = 1000
            "#,
        )
        .unwrap();
        let spec = config.lq_spec().unwrap();
        assert_eq!(spec.n, 2);
        assert_eq!(spec.control_dim, 2);
        let report = run_experiment(&config, &dir).unwrap();
        match report.outputs {
            Outputs::Lq {
                base_cost,
                riccati_value,
                certificate,
                ..
            } => {
                assert!((base_cost.value - 2.0).abs() <= 0.05, "J = {}", base_cost.value);
                let value = riccati_value.expect("state-feedback subclass");
                assert!((value - 2.0).abs() <= 1e-9);
                assert_eq!(certificate.c1, 1.0);
                assert_eq!(certificate.c2, 1.0);
            }
            other => panic!("unexpected outputs {other:?}"),
        }
        // Riccati table now carries all four P entries plus the gains.
        let (header, rows) = read_table(&dir, "riccati_table.csv").unwrap();
        assert_eq!(header.len(), 1 + 4 + 4);
        assert!((rows[0][1] - 1.0).abs() <= 1e-10); // p00 at t0
        assert!(rows[0][2].abs() <= 1e-10); // p01 at t0
    }

    #[test]
    fn matrix_literal_shape_errors_are_reported() {
        let config = parse_config(
            r#"
            kind = "lq"
            seed = 1

            [lq]
            b = [[1.0, 0.0], [0.0, 1.0]]
            q = [[1.0, 0.0], [0.0, 1.0]]
            r = 1.0
            h = 1.0
            x0 = [1.0, 1.0, 1.0]
            "#,
        )
        .unwrap();
        let err = config.lq_spec().unwrap_err();
        assert!(err.to_string().contains("x0"), "{err}");
    }

    #[test]
    fn kp_gate_report_contains_expected_values() {
        let dir = temp_dir("kp");
        let config = parse_config(
            r#"
            kind = "kp-gate"
            seed = 1

            [kp_gate]
            p = 2.0
            k_upper = 1.0
            k_lower = 1.0
            l_sigma = 0.1
            k = 1.0
            "#,
        )
        .unwrap();
        let report = run_experiment(&config, &dir).unwrap();
        match report.outputs {
            Outputs::KpGate { kp, gates, .. } => {
                assert_eq!(kp, 20.0 / 3.0);
                assert!(gates.lipschitz_gate);
            }
            other => panic!("unexpected outputs {other:?}"),
        }
        let (_, rows) = read_table(&dir, "kp_table.csv").unwrap();
        assert_eq!(rows[0][3], 20.0 / 3.0);
        assert_eq!(rows[0][6], 1.0);
    }

    #[test]
    fn oracle_run_reports_convergence_order() {
        let dir = temp_dir("oracle");
        let config = parse_config(
            r#"
            kind = "oracle"
            seed = 3

            [grid]
            n_steps = 64

            [monte_carlo]
            n_paths = 64

            [problem]
            family = "example1"
            a = 1.0
            c = 1.0
            xi = 1.0
            "#,
        )
        .unwrap();
        let report = run_experiment(&config, &dir).unwrap();
        match report.outputs {
            Outputs::Oracle {
                observed_orders, ..
            } => {
                assert!(observed_orders.iter().all(|o| *o >= 0.9));
            }
            other => panic!("unexpected outputs {other:?}"),
        }
    }

    #[test]
    fn out_dir_resolution_precedence() {
        let config = small_lp_config();
        let flag = Some(PathBuf::from("/tmp/flag"));
        assert_eq!(resolve_out_dir(flag.clone(), &config), PathBuf::from("/tmp/flag"));
        let mut with_dir = config.clone();
        with_dir.out_dir = Some(PathBuf::from("/tmp/from-config"));
        assert_eq!(
            resolve_out_dir(None, &with_dir),
            PathBuf::from("/tmp/from-config")
        );
        assert_eq!(resolve_out_dir(flag, &with_dir), PathBuf::from("/tmp/flag"));
    }
}

//! Experiment configuration: a TOML document with one table per concern.
//! Unknown keys are rejected with the offending key name; the seed is
//! mandatory so that every run is reproducible by construction.

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CoefficientSet, FBSDEProblem};
use crate::oracles::{example1_problem, Example1Params, ScalarProfile};
use crate::solver::{SolverParams, SpatialGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Solve,
    Field,
    LpVerify,
    Stability,
    Lq,
    Oracle,
    KpGate,
}

impl ExperimentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::Solve => "solve",
            ExperimentKind::Field => "field",
            ExperimentKind::LpVerify => "lp-verify",
            ExperimentKind::Stability => "stability",
            ExperimentKind::Lq => "lq",
            ExperimentKind::Oracle => "oracle",
            ExperimentKind::KpGate => "kp-gate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default)]
    pub t0: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_n_steps")]
    pub n_steps: usize,
}

fn default_horizon() -> f64 {
    1.0
}

fn default_n_steps() -> usize {
    256
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            t0: 0.0,
            horizon: default_horizon(),
            n_steps: default_n_steps(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloConfig {
    #[serde(default = "default_n_paths")]
    pub n_paths: usize,
}

fn default_n_paths() -> usize {
    10_000
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        MonteCarloConfig {
            n_paths: default_n_paths(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatialGridConfig {
    #[serde(default)]
    pub center: f64,
    #[serde(default = "default_half_width")]
    pub half_width: f64,
    #[serde(default = "default_spatial_nodes")]
    pub n_nodes: usize,
}

fn default_half_width() -> f64 {
    6.0
}

fn default_spatial_nodes() -> usize {
    121
}

impl Default for SpatialGridConfig {
    fn default() -> Self {
        SpatialGridConfig {
            center: 0.0,
            half_width: default_half_width(),
            n_nodes: default_spatial_nodes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_delta_scale")]
    pub delta_scale: f64,
    #[serde(default = "default_picard_tol")]
    pub picard_tol: f64,
    #[serde(default = "default_picard_max_iter")]
    pub picard_max_iter: usize,
    #[serde(default = "default_quadrature_nodes")]
    pub quadrature_nodes: usize,
    #[serde(default = "default_contraction_guard")]
    pub contraction_guard: f64,
    #[serde(default)]
    pub spatial_grid: SpatialGridConfig,
}

fn default_delta_scale() -> f64 {
    0.25
}

fn default_picard_tol() -> f64 {
    1e-10
}

fn default_picard_max_iter() -> usize {
    50
}

fn default_quadrature_nodes() -> usize {
    8
}

fn default_contraction_guard() -> f64 {
    0.9
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            delta_scale: default_delta_scale(),
            picard_tol: default_picard_tol(),
            picard_max_iter: default_picard_max_iter(),
            quadrature_nodes: default_quadrature_nodes(),
            contraction_guard: default_contraction_guard(),
            spatial_grid: SpatialGridConfig::default(),
        }
    }
}

impl SolverConfig {
    pub fn to_params(&self) -> SolverParams {
        SolverParams {
            delta_scale: self.delta_scale,
            picard_tol: self.picard_tol,
            picard_max_iter: self.picard_max_iter,
            spatial_grid: SpatialGrid {
                center: self.spatial_grid.center,
                half_width: self.spatial_grid.half_width,
                n_nodes: self.spatial_grid.n_nodes,
            },
            quadrature_nodes: self.quadrature_nodes,
            contraction_guard: self.contraction_guard,
        }
    }
}

/// A scalar time profile in configuration form: a bare number or a table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProfileConfig {
    Constant(f64),
    Table { times: Vec<f64>, values: Vec<f64> },
}

impl ProfileConfig {
    pub fn to_profile(&self) -> ScalarProfile {
        match self {
            ProfileConfig::Constant(v) => ScalarProfile::Constant(*v),
            ProfileConfig::Table { times, values } => ScalarProfile::Table {
                times: times.clone(),
                values: values.clone(),
            },
        }
    }
}

fn default_profile() -> ProfileConfig {
    ProfileConfig::Constant(0.0)
}

/// A monomial `coefficient * x^i y^j z^k` of a scalar coefficient map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermConfig {
    pub coefficient: f64,
    #[serde(default)]
    pub x_power: u32,
    #[serde(default)]
    pub y_power: u32,
    #[serde(default)]
    pub z_power: u32,
}

/// A monomial `coefficient * x^i` of the terminal map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalTermConfig {
    pub coefficient: f64,
    #[serde(default)]
    pub power: u32,
}

/// Built-in scalar problem families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum ProblemConfig {
    /// Scalar affine coefficients `w_x x + w_y y + w_z z + w_0` per map.
    #[serde(rename_all = "snake_case")]
    Affine {
        #[serde(default)]
        drift_x: f64,
        #[serde(default)]
        drift_y: f64,
        #[serde(default)]
        drift_z: f64,
        #[serde(default)]
        drift_0: f64,
        #[serde(default)]
        diffusion_x: f64,
        #[serde(default)]
        diffusion_y: f64,
        #[serde(default)]
        diffusion_z: f64,
        #[serde(default)]
        diffusion_0: f64,
        #[serde(default)]
        driver_x: f64,
        #[serde(default)]
        driver_y: f64,
        #[serde(default)]
        driver_z: f64,
        #[serde(default)]
        driver_0: f64,
        #[serde(default)]
        terminal_x: f64,
        #[serde(default)]
        terminal_0: f64,
        #[serde(default)]
        xi: f64,
    },
    /// The linear family with profiles `a, b, c` whose backward component is
    /// `P_s X_s`.
    Example1 {
        #[serde(default = "default_profile")]
        a: ProfileConfig,
        #[serde(default = "default_profile")]
        b: ProfileConfig,
        #[serde(default = "default_profile")]
        c: ProfileConfig,
        #[serde(default)]
        xi: f64,
    },
    /// The coupled FBSDE produced by the `[lq]` section's feedback
    /// substitution.
    LqHamiltonian {},
    /// User-composed scalar polynomial coefficients.
    Polynomial {
        #[serde(default)]
        drift: Vec<TermConfig>,
        #[serde(default)]
        diffusion: Vec<TermConfig>,
        #[serde(default)]
        driver: Vec<TermConfig>,
        #[serde(default)]
        terminal: Vec<TerminalTermConfig>,
        #[serde(default)]
        xi: f64,
        /// Declared constants; probed automatically when omitted.
        #[serde(default)]
        growth_l: Option<f64>,
        #[serde(default)]
        lipschitz_k: Option<f64>,
        #[serde(default)]
        l_sigma_z: Option<f64>,
    },
}

impl ProblemConfig {
    pub fn xi(&self) -> f64 {
        match self {
            ProblemConfig::Affine { xi, .. } => *xi,
            ProblemConfig::Example1 { xi, .. } => *xi,
            ProblemConfig::LqHamiltonian {} => 0.0,
            ProblemConfig::Polynomial { xi, .. } => *xi,
        }
    }
}

/// A constant matrix in configuration form: either a bare number (broadcast
/// onto the main diagonal of the target shape) or explicit rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixLiteral {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
}

impl MatrixLiteral {
    /// Row/column counts when given explicitly.
    pub fn shape(&self) -> Option<(usize, usize)> {
        match self {
            MatrixLiteral::Scalar(_) => None,
            MatrixLiteral::Rows(rows) => Some((rows.len(), rows.first().map_or(0, Vec::len))),
        }
    }

    pub fn to_matrix(
        &self,
        rows: usize,
        cols: usize,
        name: &str,
    ) -> Result<nalgebra::DMatrix<f64>> {
        match self {
            MatrixLiteral::Scalar(v) => {
                let mut mat = nalgebra::DMatrix::zeros(rows, cols);
                for i in 0..rows.min(cols) {
                    mat[(i, i)] = *v;
                }
                Ok(mat)
            }
            MatrixLiteral::Rows(data) => {
                if data.len() != rows || data.iter().any(|r| r.len() != cols) {
                    return Err(Error::Config(format!(
                        "matrix {name} must be {rows}x{cols}"
                    )));
                }
                let mut mat = nalgebra::DMatrix::zeros(rows, cols);
                for (i, row) in data.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        mat[(i, j)] = *v;
                    }
                }
                Ok(mat)
            }
        }
    }
}

/// A constant vector in configuration form: a bare number fills every entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VectorLiteral {
    Scalar(f64),
    Entries(Vec<f64>),
}

impl VectorLiteral {
    pub fn len(&self) -> Option<usize> {
        match self {
            VectorLiteral::Scalar(_) => None,
            VectorLiteral::Entries(v) => Some(v.len()),
        }
    }

    pub fn to_vector(&self, len: usize, name: &str) -> Result<nalgebra::DVector<f64>> {
        match self {
            VectorLiteral::Scalar(v) => Ok(nalgebra::DVector::from_element(len, *v)),
            VectorLiteral::Entries(data) => {
                if data.len() != len {
                    return Err(Error::Config(format!("vector {name} must hold {len} entries")));
                }
                Ok(nalgebra::DVector::from_vec(data.clone()))
            }
        }
    }
}

fn scalar_matrix(v: f64) -> MatrixLiteral {
    MatrixLiteral::Scalar(v)
}

fn zero_matrix() -> MatrixLiteral {
    scalar_matrix(0.0)
}

fn one_matrix() -> MatrixLiteral {
    scalar_matrix(1.0)
}

fn zero_vector() -> VectorLiteral {
    VectorLiteral::Scalar(0.0)
}

fn one_vector() -> VectorLiteral {
    VectorLiteral::Scalar(1.0)
}

/// Parameters for the LQ pipeline: constant coefficients, given as scalars
/// (diagonal broadcast) or matrix literals; state dimension and control
/// dimension are inferred from any explicit shapes (1 by default, at most 2).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqConfig {
    #[serde(default = "zero_matrix")]
    pub a: MatrixLiteral,
    #[serde(default = "zero_matrix")]
    pub b: MatrixLiteral,
    #[serde(default = "zero_matrix")]
    pub c: MatrixLiteral,
    #[serde(default = "zero_matrix")]
    pub d: MatrixLiteral,
    #[serde(default = "zero_matrix")]
    pub q: MatrixLiteral,
    #[serde(default = "zero_matrix")]
    pub s: MatrixLiteral,
    #[serde(default = "one_matrix")]
    pub r: MatrixLiteral,
    #[serde(default = "zero_matrix")]
    pub h: MatrixLiteral,
    #[serde(default = "zero_vector")]
    pub drift_offset: VectorLiteral,
    #[serde(default = "zero_vector")]
    pub diffusion_offset: VectorLiteral,
    #[serde(default = "zero_vector")]
    pub state_cost_offset: VectorLiteral,
    #[serde(default = "zero_vector")]
    pub control_cost_offset: VectorLiteral,
    #[serde(default = "zero_vector")]
    pub terminal_offset: VectorLiteral,
    #[serde(default = "one_vector")]
    pub x0: VectorLiteral,
    #[serde(default = "default_r_lower_bound")]
    pub r_lower_bound: f64,
    #[serde(default = "default_xi_prime")]
    pub xi_prime: VectorLiteral,
    #[serde(default = "default_n_perturbations")]
    pub n_perturbations: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_certificate_samples")]
    pub certificate_samples: usize,
}

impl LqConfig {
    /// State and control dimensions implied by the explicit shapes.
    pub fn dimensions(&self) -> Result<(usize, usize)> {
        let mut n: Option<usize> = None;
        let mut mu: Option<usize> = None;
        let set = |slot: &mut Option<usize>, value: usize, name: &str| -> Result<()> {
            match slot {
                Some(existing) if *existing != value => Err(Error::Config(format!(
                    "inconsistent dimension {value} from {name} (already {existing})"
                ))),
                _ => {
                    *slot = Some(value);
                    Ok(())
                }
            }
        };
        for (mat, name, rows_are_n, cols_are_n) in [
            (&self.a, "a", true, true),
            (&self.c, "c", true, true),
            (&self.q, "q", true, true),
            (&self.h, "h", true, true),
            (&self.b, "b", true, false),
            (&self.d, "d", true, false),
            (&self.s, "s", false, true),
            (&self.r, "r", false, false),
        ] {
            if let Some((rows, cols)) = mat.shape() {
                set(if rows_are_n { &mut n } else { &mut mu }, rows, name)?;
                set(if cols_are_n { &mut n } else { &mut mu }, cols, name)?;
            }
        }
        for (vec, name, is_state) in [
            (&self.x0, "x0", true),
            (&self.xi_prime, "xi_prime", true),
            (&self.drift_offset, "drift_offset", true),
            (&self.diffusion_offset, "diffusion_offset", true),
            (&self.state_cost_offset, "state_cost_offset", true),
            (&self.terminal_offset, "terminal_offset", true),
            (&self.control_cost_offset, "control_cost_offset", false),
        ] {
            if let Some(len) = vec.len() {
                set(if is_state { &mut n } else { &mut mu }, len, name)?;
            }
        }
        let n = n.unwrap_or(1);
        let mu = mu.unwrap_or(1);
        if n == 0 || n > 2 || mu == 0 || mu > 2 {
            return Err(Error::Config(format!(
                "LQ dimensions n = {n}, control = {mu} are outside the supported range 1..=2"
            )));
        }
        Ok((n, mu))
    }
}

fn default_r_lower_bound() -> f64 {
    1e-6
}

fn default_xi_prime() -> VectorLiteral {
    VectorLiteral::Scalar(0.0)
}

fn default_n_perturbations() -> usize {
    20
}

fn default_epsilon() -> f64 {
    0.1
}

fn default_certificate_samples() -> usize {
    10_000
}

/// Parameters for moment-estimate experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LpConfig {
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_xi_ladder")]
    pub xi_ladder: Vec<f64>,
    /// Pair for the companion stability estimate; defaults to the first two
    /// ladder entries.
    #[serde(default)]
    pub stability_pair: Option<[f64; 2]>,
}

fn default_p() -> f64 {
    2.0
}

fn default_xi_ladder() -> Vec<f64> {
    vec![0.0, 1.0, 2.0]
}

impl Default for LpConfig {
    fn default() -> Self {
        LpConfig {
            p: default_p(),
            xi_ladder: default_xi_ladder(),
            stability_pair: None,
        }
    }
}

/// Parameters for coupled stability scans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityConfig {
    #[serde(default = "default_p_values")]
    pub p_values: Vec<f64>,
    #[serde(default)]
    pub xi_base: f64,
    #[serde(default = "default_separations")]
    pub separations: Vec<f64>,
}

fn default_p_values() -> Vec<f64> {
    vec![2.0, 4.0]
}

fn default_separations() -> Vec<f64> {
    vec![0.1, 1.0, 10.0]
}

impl Default for StabilityConfig {
    fn default() -> Self {
        StabilityConfig {
            p_values: default_p_values(),
            xi_base: 0.0,
            separations: default_separations(),
        }
    }
}

/// Inputs of the smallness-gate computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KpGateConfig {
    pub p: f64,
    /// Upper/lower BDG constants; defaults `(4p, 1)` when omitted.
    #[serde(default)]
    pub k_upper: Option<f64>,
    #[serde(default)]
    pub k_lower: Option<f64>,
    #[serde(default)]
    pub l_sigma: f64,
    #[serde(default)]
    pub k: f64,
    #[serde(default)]
    pub sqrt_c1: Option<f64>,
}

/// One experiment: kind, seed, and the sections the kind needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub monte_carlo: MonteCarloConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub problem: Option<ProblemConfig>,
    #[serde(default)]
    pub lp: Option<LpConfig>,
    #[serde(default)]
    pub stability: Option<StabilityConfig>,
    #[serde(default)]
    pub lq: Option<LqConfig>,
    #[serde(default)]
    pub kp_gate: Option<KpGateConfig>,
}

/// Parses and validates a configuration document.
pub fn parse_config(document: &str) -> Result<ExperimentConfig> {
    let config: ExperimentConfig =
        toml::from_str(document).map_err(|e| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Serializes a configuration so that `parse_config(emit_config(c)) == c`.
pub fn emit_config(config: &ExperimentConfig) -> Result<String> {
    toml::to_string(config).map_err(|e| Error::Config(e.to_string()))
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.monte_carlo.n_paths == 0 {
            return Err(Error::Config("monte_carlo.n_paths must be at least 1".into()));
        }
        if self.grid.n_steps == 0 {
            return Err(Error::Config("grid.n_steps must be at least 1".into()));
        }
        if !(self.grid.horizon > 0.0) {
            return Err(Error::Config("grid.horizon must be positive".into()));
        }
        self.solver
            .to_params()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        match self.kind {
            ExperimentKind::Solve | ExperimentKind::Field | ExperimentKind::LpVerify
            | ExperimentKind::Stability => {
                let problem = self
                    .problem
                    .as_ref()
                    .ok_or_else(|| missing("problem", self.kind))?;
                if matches!(problem, ProblemConfig::LqHamiltonian {}) && self.lq.is_none() {
                    return Err(missing("lq", self.kind));
                }
            }
            ExperimentKind::Oracle => {
                match self.problem.as_ref() {
                    Some(ProblemConfig::Example1 { .. }) => {}
                    Some(_) => {
                        return Err(Error::Config(
                            "oracle experiments require the example1 problem family".into(),
                        ))
                    }
                    None => return Err(missing("problem", self.kind)),
                }
            }
            ExperimentKind::Lq => {
                if self.lq.is_none() {
                    return Err(missing("lq", self.kind));
                }
            }
            ExperimentKind::KpGate => {
                if self.kp_gate.is_none() {
                    return Err(missing("kp_gate", self.kind));
                }
            }
        }
        if let Some(lp) = &self.lp {
            if lp.xi_ladder.is_empty() {
                return Err(Error::Config("lp.xi_ladder must be non-empty".into()));
            }
            if !(lp.p >= 1.0) {
                return Err(Error::Config("lp.p must be at least 1".into()));
            }
        }
        if let Some(stability) = &self.stability {
            if stability.separations.contains(&0.0) {
                return Err(Error::Config(
                    "stability.separations must be nonzero".into(),
                ));
            }
        }
        Ok(())
    }

    /// The LQ spec named by the `[lq]` section.
    pub fn lq_spec(&self) -> Result<crate::lq::LQSpec> {
        let lq = self
            .lq
            .as_ref()
            .ok_or_else(|| Error::Config("missing [lq] section".into()))?;
        let (n, mu) = lq.dimensions()?;
        use crate::lq::TimeProfile::Constant;
        Ok(crate::lq::LQSpec {
            n,
            control_dim: mu,
            a: Constant(lq.a.to_matrix(n, n, "a")?),
            b: Constant(lq.b.to_matrix(n, mu, "b")?),
            c: Constant(lq.c.to_matrix(n, n, "c")?),
            d: Constant(lq.d.to_matrix(n, mu, "d")?),
            q: Constant(lq.q.to_matrix(n, n, "q")?),
            s: Constant(lq.s.to_matrix(mu, n, "s")?),
            r: Constant(lq.r.to_matrix(mu, mu, "r")?),
            h: lq.h.to_matrix(n, n, "h")?,
            drift_offset: Constant(lq.drift_offset.to_vector(n, "drift_offset")?),
            diffusion_offset: Constant(lq.diffusion_offset.to_vector(n, "diffusion_offset")?),
            state_cost_offset: Constant(lq.state_cost_offset.to_vector(n, "state_cost_offset")?),
            control_cost_offset: Constant(
                lq.control_cost_offset.to_vector(mu, "control_cost_offset")?,
            ),
            terminal_offset: lq.terminal_offset.to_vector(n, "terminal_offset")?,
            r_lower_bound: lq.r_lower_bound,
            t0: self.grid.t0,
            t_end: self.grid.t0 + self.grid.horizon,
            x0: lq.x0.to_vector(n, "x0")?,
        })
    }

    /// Builds the configured problem on the configured horizon.
    pub fn build_problem(&self) -> Result<FBSDEProblem> {
        let t0 = self.grid.t0;
        let t_end = t0 + self.grid.horizon;
        let problem = self
            .problem
            .as_ref()
            .ok_or_else(|| Error::Config("missing [problem] section".into()))?;
        match problem {
            ProblemConfig::Example1 { a, b, c, xi } => {
                let params = Example1Params {
                    a: a.to_profile(),
                    b: b.to_profile(),
                    c: c.to_profile(),
                    t0,
                    t_end,
                    xi: *xi,
                };
                example1_problem(&params)
            }
            ProblemConfig::Affine {
                drift_x,
                drift_y,
                drift_z,
                drift_0,
                diffusion_x,
                diffusion_y,
                diffusion_z,
                diffusion_0,
                driver_x,
                driver_y,
                driver_z,
                driver_0,
                terminal_x,
                terminal_0,
                xi,
            } => {
                let lipschitz_k = [
                    norm3(*drift_x, *drift_y, *drift_z),
                    norm3(*driver_x, *driver_y, *driver_z),
                    terminal_x.abs(),
                    norm3(*diffusion_x, *diffusion_y, 0.0),
                ]
                .into_iter()
                .fold(0.0, f64::max);
                let growth_l = lipschitz_k
                    + [*drift_0, *diffusion_0, *driver_0, *terminal_0]
                        .into_iter()
                        .map(f64::abs)
                        .fold(0.0, f64::max);
                let (bx, by, bz, b0) = (*drift_x, *drift_y, *drift_z, *drift_0);
                let (sx, sy, sz, s0) = (*diffusion_x, *diffusion_y, *diffusion_z, *diffusion_0);
                let (fx, fy, fz, f0) = (*driver_x, *driver_y, *driver_z, *driver_0);
                let (px, p0) = (*terminal_x, *terminal_0);
                let coefficients = CoefficientSet::new(
                    Arc::new(move |_, x, y, z| vec![bx * x[0] + by * y[0] + bz * z[0] + b0]),
                    Arc::new(move |_, x, y, z| vec![sx * x[0] + sy * y[0] + sz * z[0] + s0]),
                    Arc::new(move |_, x, y, z| vec![fx * x[0] + fy * y[0] + fz * z[0] + f0]),
                    Arc::new(move |x| vec![px * x[0] + p0]),
                    growth_l,
                    lipschitz_k,
                    diffusion_z.abs(),
                )?;
                FBSDEProblem::new(coefficients, 1, 1, t0, t_end, vec![*xi])
            }
            ProblemConfig::LqHamiltonian {} => crate::lq::build_hamiltonian_fbsde(&self.lq_spec()?),
            ProblemConfig::Polynomial {
                drift,
                diffusion,
                driver,
                terminal,
                xi,
                growth_l,
                lipschitz_k,
                l_sigma_z,
            } => {
                let eval_terms = |terms: &[TermConfig], x: f64, y: f64, z: f64| -> f64 {
                    terms
                        .iter()
                        .map(|t| {
                            t.coefficient
                                * x.powi(t.x_power as i32)
                                * y.powi(t.y_power as i32)
                                * z.powi(t.z_power as i32)
                        })
                        .sum()
                };
                let (dr, di, dv, te) = (
                    drift.clone(),
                    diffusion.clone(),
                    driver.clone(),
                    terminal.clone(),
                );
                let coefficients = CoefficientSet::new(
                    Arc::new(move |_, x, y, z| vec![eval_terms(&dr, x[0], y[0], z[0])]),
                    Arc::new(move |_, x, y, z| vec![eval_terms(&di, x[0], y[0], z[0])]),
                    Arc::new(move |_, x, y, z| vec![eval_terms(&dv, x[0], y[0], z[0])]),
                    Arc::new(move |x| {
                        vec![te
                            .iter()
                            .map(|t| t.coefficient * x[0].powi(t.power as i32))
                            .sum()]
                    }),
                    growth_l.unwrap_or(0.0),
                    lipschitz_k.unwrap_or(0.0),
                    l_sigma_z.unwrap_or(0.0),
                )?;
                let mut built = FBSDEProblem::new(coefficients, 1, 1, t0, t_end, vec![*xi])?;
                if growth_l.is_none() || lipschitz_k.is_none() || l_sigma_z.is_none() {
                    // Probe the constants the user left out; a 10% headroom
                    // keeps the probed lower bound usable as a declaration.
                    let report = crate::model::probe_assumptions(
                        &built,
                        4000,
                        self.solver.spatial_grid.half_width.max(1.0),
                        crate::subseed(self.seed, "polynomial-declared-constants"),
                    )?;
                    let probed_k = report
                        .k_drift
                        .value
                        .max(report.k_driver.value)
                        .max(report.k_sigma_xy.value)
                        .max(report.k_terminal.value);
                    built.coefficients.growth_l =
                        growth_l.unwrap_or(1.1 * report.growth_l.value);
                    built.coefficients.lipschitz_k = lipschitz_k.unwrap_or(1.1 * probed_k);
                    built.coefficients.l_sigma_z =
                        l_sigma_z.unwrap_or(1.1 * report.l_sigma_z.value);
                }
                Ok(built)
            }
        }
    }
}

fn norm3(a: f64, b: f64, c: f64) -> f64 {
    (a * a + b * b + c * c).sqrt()
}

fn missing(section: &str, kind: ExperimentKind) -> Error {
    Error::Config(format!(
        "experiment kind {} requires the [{section}] section",
        kind.as_str()
    ))
}

//! Time grids, seeded Brownian path generation, and discrete path containers.
//!
//! All sampling is a pure function of `(grid, n_paths, seed)`. Each path owns
//! its own counter-based stream (ChaCha, one stream per path index), so paths
//! can be generated in any order or in parallel without changing the output,
//! and coupled experiments can share one ensemble for common random numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::subseed;

/// Partition of a time interval `[t0, t_end]` into simulation steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    t_end: f64,
    points: Vec<f64>,
}

impl TimeGrid {
    /// Strictly increasing points; `points[0]` and `points.last()` delimit the horizon.
    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::ZeroSteps);
        }
        let t0 = points[0];
        let t_end = *points.last().unwrap();
        if !(t_end > t0) {
            return Err(Error::HorizonOrder { t0, t_end });
        }
        for w in points.windows(2) {
            if !(w[1] > w[0]) || !w[0].is_finite() || !w[1].is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "grid points must be finite and strictly increasing, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(TimeGrid { t0, t_end, points })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.points.len() - 1
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Length of step `k`, i.e. `points[k+1] - points[k]`.
    pub fn dt(&self, k: usize) -> f64 {
        self.points[k + 1] - self.points[k]
    }

    /// Grid with every step halved (one midpoint inserted per step).
    pub fn halved(&self) -> TimeGrid {
        let mut points = Vec::with_capacity(2 * self.n_steps() + 1);
        for w in self.points.windows(2) {
            points.push(w[0]);
            points.push(0.5 * (w[0] + w[1]));
        }
        points.push(self.t_end);
        TimeGrid {
            t0: self.t0,
            t_end: self.t_end,
            points,
        }
    }
}

/// Uniform grid with `n_steps + 1` points on `[t0, t_end]`.
pub fn build_grid(t0: f64, t_end: f64, n_steps: usize) -> Result<TimeGrid> {
    if !(t_end > t0) {
        return Err(Error::HorizonOrder { t0, t_end });
    }
    if n_steps == 0 {
        return Err(Error::ZeroSteps);
    }
    let dt = (t_end - t0) / n_steps as f64;
    let mut points: Vec<f64> = (0..n_steps).map(|k| t0 + k as f64 * dt).collect();
    points.push(t_end);
    TimeGrid::from_points(points)
}

/// Seeded Brownian increments on a grid, one row of increments per path.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianEnsemble {
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
    /// Layout: `increments[path * n_steps + step]`.
    increments: Vec<f64>,
}

impl BrownianEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn increment(&self, path: usize, step: usize) -> f64 {
        self.increments[path * self.grid.n_steps() + step]
    }

    pub fn path_increments(&self, path: usize) -> &[f64] {
        let n = self.grid.n_steps();
        &self.increments[path * n..(path + 1) * n]
    }

    /// Cumulative sum of a path's increments: `B` at every grid point, starting at 0.
    pub fn path_cumulative(&self, path: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.grid.n_steps() + 1);
        let mut acc = 0.0;
        out.push(acc);
        for dw in self.path_increments(path) {
            acc += dw;
            out.push(acc);
        }
        out
    }

    /// Ensemble on the halved grid whose paired increments sum back to these,
    /// via the Brownian bridge: the midpoint of a step with increment `dW`
    /// over `dt` is `dW/2 + sqrt(dt)/2 * zeta` for an independent normal.
    pub fn refine_halving(&self) -> BrownianEnsemble {
        let fine_grid = self.grid.halved();
        let n_coarse = self.grid.n_steps();
        let refine_seed = subseed(self.seed, "brownian-bridge-refine");
        let increments: Vec<f64> = (0..self.n_paths)
            .into_par_iter()
            .flat_map_iter(|path| {
                let mut rng = path_rng(refine_seed, path);
                let mut row = Vec::with_capacity(2 * n_coarse);
                for step in 0..n_coarse {
                    let dw = self.increment(path, step);
                    let dt = self.grid.dt(step);
                    let zeta: f64 = StandardNormal.sample(&mut rng);
                    let first = 0.5 * dw + 0.5 * dt.sqrt() * zeta;
                    row.push(first);
                    row.push(dw - first);
                }
                row
            })
            .collect();
        BrownianEnsemble {
            grid: fine_grid,
            n_paths: self.n_paths,
            seed: refine_seed,
            increments,
        }
    }
}

fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

/// Independent `N(0, dt_k)` increments per path and step, deterministic in the seed.
pub fn sample_brownian(grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<BrownianEnsemble> {
    if n_paths == 0 {
        return Err(Error::InvalidArgument("n_paths must be at least 1".into()));
    }
    let n_steps = grid.n_steps();
    let sqrt_dts: Vec<f64> = (0..n_steps).map(|k| grid.dt(k).sqrt()).collect();
    let increments: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .flat_map_iter(|path| {
            let mut rng = path_rng(seed, path);
            sqrt_dts
                .iter()
                .map(move |s| {
                    let zeta: f64 = StandardNormal.sample(&mut rng);
                    s * zeta
                })
                .collect::<Vec<f64>>()
        })
        .collect();
    Ok(BrownianEnsemble {
        grid: grid.clone(),
        n_paths,
        seed,
        increments,
    })
}

/// Same grid and path count with every increment negated.
pub fn antithetic_pair(ensemble: &BrownianEnsemble) -> BrownianEnsemble {
    BrownianEnsemble {
        grid: ensemble.grid.clone(),
        n_paths: ensemble.n_paths,
        seed: ensemble.seed,
        increments: ensemble.increments.iter().map(|w| -w).collect(),
    }
}

/// Vector-valued sample paths on a grid. Fully populated by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    grid: TimeGrid,
    n_paths: usize,
    dimension: usize,
    /// Layout: `values[(path * n_points + node) * dimension ..][..dimension]`.
    values: Vec<f64>,
}

impl PathEnsemble {
    pub fn zeros(grid: TimeGrid, n_paths: usize, dimension: usize) -> Self {
        let n_points = grid.n_steps() + 1;
        PathEnsemble {
            grid,
            n_paths,
            dimension,
            values: vec![0.0; n_paths * n_points * dimension],
        }
    }

    /// Builds from per-path rows, each holding `n_points * dimension` values.
    pub fn from_rows(
        grid: TimeGrid,
        dimension: usize,
        rows: Vec<Vec<f64>>,
    ) -> Result<PathEnsemble> {
        let n_points = grid.n_steps() + 1;
        let n_paths = rows.len();
        let mut values = Vec::with_capacity(n_paths * n_points * dimension);
        for row in &rows {
            if row.len() != n_points * dimension {
                return Err(Error::InvalidArgument(format!(
                    "path row holds {} values, expected {}",
                    row.len(),
                    n_points * dimension
                )));
            }
            values.extend_from_slice(row);
        }
        Ok(PathEnsemble {
            grid,
            n_paths,
            dimension,
            values,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn value(&self, path: usize, node: usize) -> &[f64] {
        let n_points = self.grid.n_steps() + 1;
        let start = (path * n_points + node) * self.dimension;
        &self.values[start..start + self.dimension]
    }

    pub fn set_value(&mut self, path: usize, node: usize, value: &[f64]) {
        let n_points = self.grid.n_steps() + 1;
        let start = (path * n_points + node) * self.dimension;
        self.values[start..start + self.dimension].copy_from_slice(value);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

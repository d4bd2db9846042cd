//! Monte Carlo simulation of the full market under a trading rule.
//!
//! Each path draws its own Brownian increments from a ChaCha stream keyed by
//! `(seed, path index)`, advances the true factors, log prices and wealth by
//! Euler-Maruyama with shared increments, and feeds only the observed price
//! increments to the filter. Path results are collected in index order and
//! reduced sequentially, so results do not depend on thread scheduling.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filterbank::{row_major, FilterKernel, FilterSolution};
use crate::model::MarketModel;
use crate::policy::{BondOnly, Policy, PolicyContext};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub paths: usize,
    /// Simulation step; must divide the solver step. `None` uses the solver step.
    pub step: Option<f64>,
    pub seed: u64,
    /// Each increment is summed from this many finer draws, so runs with the
    /// same `step / noise_refinement` see the same Brownian paths.
    pub noise_refinement: usize,
    pub record_terminal: bool,
    /// Keep every series of path 0.
    pub record_path: bool,
    /// Solver nodes at which filter-error and innovation statistics are collected.
    pub checkpoints: Vec<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            paths: 10_000,
            step: None,
            seed: 0,
            noise_refinement: 1,
            record_terminal: false,
            record_path: false,
            checkpoints: Vec::new(),
        }
    }
}

/// Sample mean with its standard error (`None` for a single sample).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub se: Option<f64>,
}

impl Estimate {
    pub fn half_width(&self) -> Option<f64> {
        self.se.map(|s| 1.96 * s)
    }

    /// `|value - target|` in standard errors. Zero error against an exact
    /// match counts as zero, any other miss with zero error as infinite.
    pub fn z_score(&self, target: f64) -> Option<f64> {
        self.se.map(|s| se_units(self.value - target, s))
    }
}

fn se_units(diff: f64, se: f64) -> f64 {
    if diff == 0.0 {
        0.0
    } else {
        diff.abs() / se
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct E2xiEstimate {
    /// From the accumulated log-growth `xi_T` of the centred wealth.
    pub direct: Estimate,
    /// From `(z(T) / z0)^2` of the simulated wealth.
    pub wealth: Estimate,
}

impl E2xiEstimate {
    pub fn joint_se(&self) -> Option<f64> {
        Some(self.direct.se?.hypot(self.wealth.se?))
    }
}

/// Cross-sectional statistics at one checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointStats {
    pub t: f64,
    /// `beta(t)` from the solver.
    pub beta: DMatrix<f64>,
    pub error_mean: DVector<f64>,
    pub error_mean_se: DVector<f64>,
    /// Sample covariance of `y - y_hat`.
    pub error_cov: DMatrix<f64>,
    pub error_cov_se: DMatrix<f64>,
    /// Sample covariance of the last innovation increment before `t`.
    pub innovation_cov: DMatrix<f64>,
    pub innovation_cov_se: DMatrix<f64>,
    /// Length of that increment.
    pub innovation_dt: f64,
}

impl CheckpointStats {
    /// Largest entrywise `|Cov(y - y_hat) - beta|` in standard errors.
    pub fn covariance_deviation(&self) -> f64 {
        max_deviation(&self.error_cov, &self.beta, &self.error_cov_se)
    }

    pub fn mean_deviation(&self) -> f64 {
        let zero = DVector::zeros(self.error_mean.len());
        max_deviation(&self.error_mean, &zero, &self.error_mean_se)
    }

    /// Largest entrywise `|Cov(dv) - dt I|` in standard errors.
    pub fn innovation_deviation(&self) -> f64 {
        let m = self.innovation_cov.nrows();
        let target = DMatrix::identity(m, m) * self.innovation_dt;
        max_deviation(&self.innovation_cov, &target, &self.innovation_cov_se)
    }
}

fn max_deviation<R: nalgebra::Dim, C: nalgebra::Dim, S1, S2, S3>(
    est: &nalgebra::Matrix<f64, R, C, S1>,
    target: &nalgebra::Matrix<f64, R, C, S2>,
    se: &nalgebra::Matrix<f64, R, C, S3>,
) -> f64
where
    S1: nalgebra::RawStorage<f64, R, C>,
    S2: nalgebra::RawStorage<f64, R, C>,
    S3: nalgebra::RawStorage<f64, R, C>,
{
    est.iter()
        .zip(target.iter())
        .zip(se.iter())
        .map(|((e, t), s)| se_units(e - t, *s))
        .fold(0.0, f64::max)
}

/// Every series of one path at every simulation time.
#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord {
    pub t: Vec<f64>,
    pub y: Vec<DVector<f64>>,
    pub log_prices: Vec<DVector<f64>>,
    pub y_hat: Vec<DVector<f64>>,
    /// Entry `j` is the increment over `[t_{j-1}, t_j]`; entry 0 is zero.
    pub innovations: Vec<DVector<f64>>,
    pub wealth: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub paths: usize,
    pub step: f64,
    pub terminal_mean: Estimate,
    pub terminal_variance: Estimate,
    pub checkpoints: Vec<CheckpointStats>,
    /// Present for runs under the optimal rule with nonzero `z0`.
    pub e2xi: Option<E2xiEstimate>,
    pub terminal: Option<Vec<f64>>,
    pub path: Option<PathRecord>,
}

/// Coefficients of one solver step, flattened row-major.
struct StepData {
    rate: f64,
    growth: f64,
    /// `sigma`, m x (n+m).
    sigma: Vec<f64>,
    half_var: Vec<f64>,
    /// `Sigma = Gamma^{1/2}`, m x m.
    root: Vec<f64>,
}

struct PathOut {
    terminal: f64,
    /// `(exp(2 xi_T), (z_T / z0)^2)`.
    moments: Option<(f64, f64)>,
    /// Per checkpoint: `y - y_hat` then the innovation increment.
    checkpoints: Vec<f64>,
    record: Option<PathRecord>,
}

struct Engine<'a> {
    model: &'a MarketModel,
    fs: &'a FilterSolution,
    kernel: FilterKernel,
    steps: Vec<StepData>,
    a: Vec<f64>,
    loading: Vec<f64>,
    drift: Vec<f64>,
    mean_rev: Vec<f64>,
    factor_vol: Vec<f64>,
    substeps: usize,
    h: f64,
    noise_scale: f64,
    refinement: usize,
    /// Global substep index ending at each checkpoint.
    checkpoints: Vec<usize>,
}

impl<'a> Engine<'a> {
    fn new(model: &'a MarketModel, fs: &'a FilterSolution, cfg: &SimConfig) -> Result<Self> {
        if cfg.paths == 0 {
            return Err(Error::InvalidParameter("at least one path is required".to_string()));
        }
        if cfg.noise_refinement == 0 {
            return Err(Error::InvalidParameter("noise_refinement must be at least 1".to_string()));
        }
        let grid = &fs.grid;
        let coarse = grid.step();
        let step = cfg.step.unwrap_or(coarse);
        let substeps = (coarse / step).round();
        if !(step > 0.0) || substeps < 1.0 || (substeps * step - coarse).abs() > 1e-9 * coarse {
            return Err(Error::InvalidParameter(format!(
                "simulation step {step} must divide the solver step {coarse}"
            )));
        }
        let substeps = substeps as usize;
        let h = coarse / substeps as f64;
        let checkpoints = cfg
            .checkpoints
            .iter()
            .map(|&t| match grid.node_index(t)? {
                0 => Err(Error::GridMismatch { t }),
                k => Ok(k * substeps),
            })
            .collect::<Result<Vec<_>>>()?;
        let steps = (0..grid.steps())
            .map(|k| {
                let reg = fs.regime(model, k);
                let rate = fs.rate(model, k);
                StepData {
                    rate,
                    growth: (rate * h).exp(),
                    sigma: row_major(&reg.sigma),
                    half_var: reg.gamma_diag.iter().map(|g| 0.5 * g).collect(),
                    root: row_major(&reg.root),
                }
            })
            .collect();
        Ok(Self {
            model,
            fs,
            kernel: FilterKernel::new(model, fs),
            steps,
            a: model.a.iter().copied().collect(),
            loading: row_major(&model.loading),
            drift: model.factor_drift.iter().copied().collect(),
            mean_rev: row_major(&model.factor_matrix),
            factor_vol: row_major(&model.factor_vol),
            substeps,
            h,
            noise_scale: (h / cfg.noise_refinement as f64).sqrt(),
            refinement: cfg.noise_refinement,
            checkpoints,
        })
    }

    fn time(&self, k: usize, i: usize) -> f64 {
        if i == 0 {
            self.fs.grid.t(k)
        } else if i == self.substeps {
            self.fs.grid.t(k + 1)
        } else {
            self.fs.grid.t(k) + i as f64 * self.h
        }
    }

    fn run<P: Policy + ?Sized>(
        &self,
        policy: &P,
        optimal: Option<&PolicyContext>,
        path: usize,
        seed: u64,
        record: bool,
    ) -> Result<PathOut> {
        let (m, n) = (self.model.m, self.model.n);
        let dim = n + m;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path as u64);

        let mut y: Vec<f64> = self.model.y0.iter().copied().collect();
        let mut y_hat = y.clone();
        let mut log_s: Vec<f64> = self.model.s.iter().map(|s| s.ln()).collect();
        let mut x = self.model.x0;
        let mut xi = 0.0;

        let mut dw = vec![0.0; dim];
        let mut pi = vec![0.0; m];
        let mut mu = vec![0.0; m];
        let mut sdw = vec![0.0; m];
        let mut dy = vec![0.0; m];
        let mut dv = vec![0.0; m];
        let mut wu = vec![0.0; m];
        let mut y_next = vec![0.0; n];
        let mut scratch = vec![0.0; m + n];
        let mut cps = Vec::with_capacity(self.checkpoints.len() * dim);

        let mut rec = record.then(|| PathRecord {
            t: vec![0.0],
            y: vec![self.model.y0.clone()],
            log_prices: vec![DVector::from_column_slice(&log_s)],
            y_hat: vec![self.model.y0.clone()],
            innovations: vec![DVector::zeros(m)],
            wealth: vec![x],
        });

        let mut j = 0;
        for (k, sd) in self.steps.iter().enumerate() {
            for i in 0..self.substeps {
                let t = self.time(k, i);
                dw.fill(0.0);
                for _ in 0..self.refinement {
                    for w in dw.iter_mut() {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *w += z;
                    }
                }
                for w in dw.iter_mut() {
                    *w *= self.noise_scale;
                }

                policy.allocate(k, t, x, &y_hat, &mut pi);
                if let Some(ctx) = optimal {
                    ctx.exposure(k, &y_hat, &mut wu);
                }

                for r in 0..m {
                    let mut acc = self.a[r];
                    for c in 0..n {
                        acc += self.loading[r * n + c] * y[c];
                    }
                    mu[r] = acc;
                    let mut s = 0.0;
                    for c in 0..dim {
                        s += sd.sigma[r * dim + c] * dw[c];
                    }
                    sdw[r] = s;
                }

                let mut gain = 0.0;
                for r in 0..m {
                    gain += pi[r] * ((mu[r] - sd.rate) * self.h + sdw[r]);
                }
                x = x * sd.growth + gain;

                for r in 0..n {
                    let mut acc = self.drift[r];
                    for c in 0..n {
                        acc += self.mean_rev[r * n + c] * y[c];
                    }
                    let mut noise = 0.0;
                    for c in 0..dim {
                        noise += self.factor_vol[r * dim + c] * dw[c];
                    }
                    y_next[r] = y[r] + acc * self.h + noise;
                }
                y.copy_from_slice(&y_next);

                for r in 0..m {
                    let next = log_s[r] + (mu[r] - sd.half_var[r]) * self.h + sdw[r];
                    dy[r] = next - log_s[r];
                    log_s[r] = next;
                }

                if optimal.is_some() {
                    // Excess drift seen by the filter and Sigma W u, both at the old estimate.
                    let mut lever = 0.0;
                    let mut spread = 0.0;
                    for r in 0..m {
                        let mut b = self.a[r] - sd.rate;
                        for c in 0..n {
                            b += self.loading[r * n + c] * y_hat[c];
                        }
                        lever += wu[r] * b;
                    }
                    self.kernel.update(k, &mut y_hat, &dy, self.h, &mut dv, &mut scratch);
                    let mut stoch = 0.0;
                    for r in 0..m {
                        let mut s = 0.0;
                        for c in 0..m {
                            s += sd.root[r * m + c] * wu[c];
                        }
                        spread += s * s;
                        stoch += s * dv[r];
                    }
                    xi += (sd.rate - lever - 0.5 * spread) * self.h - stoch;
                } else {
                    self.kernel.update(k, &mut y_hat, &dy, self.h, &mut dv, &mut scratch);
                }

                j += 1;
                let t_next = self.time(k, i + 1);
                if !x.is_finite() {
                    return Err(Error::NonFinite { path, t: t_next });
                }
                for &c in &self.checkpoints {
                    if c == j {
                        cps.extend(y.iter().zip(&y_hat).map(|(a, b)| a - b));
                        cps.extend_from_slice(&dv);
                    }
                }
                if let Some(rec) = rec.as_mut() {
                    rec.t.push(t_next);
                    rec.y.push(DVector::from_column_slice(&y));
                    rec.log_prices.push(DVector::from_column_slice(&log_s));
                    rec.y_hat.push(DVector::from_column_slice(&y_hat));
                    rec.innovations.push(DVector::from_column_slice(&dv));
                    rec.wealth.push(x);
                }
            }
        }

        let moments = optimal.map(|ctx| {
            let z0 = ctx.centred(0, 0.0, self.model.x0);
            let z_end = ctx.centred(self.fs.grid.steps(), self.fs.grid.horizon(), x);
            ((2.0 * xi).exp(), (z_end / z0).powi(2))
        });
        Ok(PathOut {
            terminal: x,
            moments,
            checkpoints: cps,
            record: rec,
        })
    }
}

/// Mean with standard error, shifted by the first sample so that identical
/// samples give their common value and zero spread exactly.
fn mean_estimate(xs: &[f64]) -> Estimate {
    let n = xs.len() as f64;
    let shift = xs[0];
    let mean = shift + xs.iter().map(|x| x - shift).sum::<f64>() / n;
    let se = (xs.len() > 1).then(|| {
        let ss: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
        (ss / (n - 1.0) / n).sqrt()
    });
    Estimate { value: mean, se }
}

/// Unbiased sample variance; its standard error uses the fourth central moment.
fn variance_estimate(xs: &[f64]) -> Estimate {
    let count = xs.len();
    if count < 2 {
        return Estimate { value: 0.0, se: None };
    }
    let n = count as f64;
    let mean = mean_estimate(xs).value;
    let (mut m2, mut m4) = (0.0, 0.0);
    for x in xs {
        let d2 = (x - mean).powi(2);
        m2 += d2;
        m4 += d2 * d2;
    }
    let var = m2 / (n - 1.0);
    let m4 = m4 / n;
    let se = (count > 3).then(|| ((m4 - var * var * (n - 3.0) / (n - 1.0)) / n).max(0.0).sqrt());
    Estimate { value: var, se }
}

/// Covariance of the columns `[off, off + dim)` of row-major samples, with
/// entrywise standard errors of the mean and covariance.
fn block_stats(rows: &[&[f64]], off: usize, dim: usize) -> (DVector<f64>, DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
    let col = |i: usize| -> Vec<f64> { rows.iter().map(|r| r[off + i]).collect() };
    let cols: Vec<Vec<f64>> = (0..dim).map(col).collect();
    let means: Vec<Estimate> = cols.iter().map(|c| mean_estimate(c)).collect();
    let mean = DVector::from_iterator(dim, means.iter().map(|e| e.value));
    let mean_se = DVector::from_iterator(dim, means.iter().map(|e| e.se.unwrap_or(f64::NAN)));
    let mut cov = DMatrix::zeros(dim, dim);
    let mut cov_se = DMatrix::from_element(dim, dim, f64::NAN);
    for i in 0..dim {
        for j in 0..=i {
            let prods: Vec<f64> = cols[i]
                .iter()
                .zip(&cols[j])
                .map(|(a, b)| (a - mean[i]) * (b - mean[j]))
                .collect();
            let n = prods.len() as f64;
            let est = mean_estimate(&prods);
            let value = if n > 1.0 { est.value * n / (n - 1.0) } else { 0.0 };
            cov[(i, j)] = value;
            cov[(j, i)] = value;
            if let Some(se) = est.se {
                cov_se[(i, j)] = se;
                cov_se[(j, i)] = se;
            }
        }
    }
    (mean, mean_se, cov, cov_se)
}

fn simulate_inner<P: Policy + ?Sized>(
    model: &MarketModel,
    fs: &FilterSolution,
    policy: &P,
    optimal: Option<&PolicyContext>,
    cfg: &SimConfig,
) -> Result<SimResult> {
    if model.m != fs.gain[0].ncols() || model.n != fs.gain[0].nrows() {
        return Err(Error::DimensionMismatch("filter solution does not match the model".to_string()));
    }
    let engine = Engine::new(model, fs, cfg)?;
    let outs: Vec<Result<PathOut>> = (0..cfg.paths)
        .into_par_iter()
        .map(|i| engine.run(policy, optimal, i, cfg.seed, cfg.record_path && i == 0))
        .collect();
    let mut outs = outs.into_iter().collect::<Result<Vec<_>>>()?;

    let terminal: Vec<f64> = outs.iter().map(|o| o.terminal).collect();
    let e2xi = match optimal {
        Some(ctx) if ctx.centred(0, 0.0, model.x0) != 0.0 => {
            let direct: Vec<f64> = outs.iter().filter_map(|o| o.moments.map(|m| m.0)).collect();
            let wealth: Vec<f64> = outs.iter().filter_map(|o| o.moments.map(|m| m.1)).collect();
            Some(E2xiEstimate {
                direct: mean_estimate(&direct),
                wealth: mean_estimate(&wealth),
            })
        }
        _ => None,
    };

    let (m, n) = (model.m, model.n);
    let rows: Vec<&[f64]> = outs.iter().map(|o| o.checkpoints.as_slice()).collect();
    let checkpoints = engine
        .checkpoints
        .iter()
        .enumerate()
        .map(|(c, &j)| {
            let t = cfg.checkpoints[c];
            let base = c * (n + m);
            let (error_mean, error_mean_se, error_cov, error_cov_se) = block_stats(&rows, base, n);
            let (_, _, innovation_cov, innovation_cov_se) = block_stats(&rows, base + n, m);
            let beta = fs.beta[j / engine.substeps].clone();
            CheckpointStats {
                t,
                beta,
                error_mean,
                error_mean_se,
                error_cov,
                error_cov_se,
                innovation_cov,
                innovation_cov_se,
                innovation_dt: engine.h,
            }
        })
        .collect();

    Ok(SimResult {
        paths: cfg.paths,
        step: engine.h,
        terminal_mean: mean_estimate(&terminal),
        terminal_variance: variance_estimate(&terminal),
        checkpoints,
        e2xi,
        terminal: cfg.record_terminal.then_some(terminal),
        path: outs.first_mut().and_then(|o| o.record.take()),
    })
}

/// Simulates `cfg.paths` paths under `policy`.
pub fn simulate_paths<P: Policy + ?Sized>(
    model: &MarketModel,
    fs: &FilterSolution,
    policy: &P,
    cfg: &SimConfig,
) -> Result<SimResult> {
    simulate_inner(model, fs, policy, None, cfg)
}

/// Simulates under the optimal rule, also estimating `E[exp(2 xi_T)]` when `z0 != 0`.
pub fn simulate_optimal(model: &MarketModel, ctx: &PolicyContext, cfg: &SimConfig) -> Result<SimResult> {
    simulate_inner(model, &ctx.filter, ctx, Some(ctx), cfg)
}

/// Both Monte Carlo estimators of `E[exp(2 xi_T)]` under the optimal rule.
pub fn estimate_e2xi_mc(model: &MarketModel, ctx: &PolicyContext, cfg: &SimConfig) -> Result<E2xiEstimate> {
    if ctx.centred(0, 0.0, model.x0) == 0.0 {
        return Err(Error::ZeroInitialZ);
    }
    let res = simulate_optimal(model, ctx, cfg)?;
    res.e2xi.ok_or(Error::ZeroInitialZ)
}

/// Filter diagnostics at a set of checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterReport {
    pub checkpoints: Vec<CheckpointStats>,
}

impl FilterReport {
    pub fn max_covariance_deviation(&self) -> f64 {
        self.checkpoints.iter().map(|c| c.covariance_deviation()).fold(0.0, f64::max)
    }

    pub fn max_mean_deviation(&self) -> f64 {
        self.checkpoints.iter().map(|c| c.mean_deviation()).fold(0.0, f64::max)
    }

    pub fn max_innovation_deviation(&self) -> f64 {
        self.checkpoints.iter().map(|c| c.innovation_deviation()).fold(0.0, f64::max)
    }
}

/// Compares the empirical error of the filter with `beta`. The trading rule
/// does not affect the filter, so paths run bond-only.
pub fn verify_filter_consistency(
    model: &MarketModel,
    fs: &FilterSolution,
    cfg: &SimConfig,
    checkpoints: &[f64],
) -> Result<FilterReport> {
    let cfg = SimConfig {
        checkpoints: checkpoints.to_vec(),
        record_terminal: false,
        record_path: false,
        ..cfg.clone()
    };
    let res = simulate_paths(model, fs, &BondOnly, &cfg)?;
    Ok(FilterReport {
        checkpoints: res.checkpoints,
    })
}

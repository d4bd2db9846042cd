//! Market and factor parameters, time grids and the small deterministic
//! helpers (volatility square root, discount factors) shared by every solver.
//!
//! The market has one bond with a deterministic short rate `r(t)`, `m` stocks
//! with appreciation rates `a + A y(t)` and volatility `sigma(t)`, and `n`
//! Gaussian factors `dy = (d + D y) dt + Lambda dW` driven by the same
//! `(n + m)`-dimensional Brownian motion as the stocks. The rate and the
//! volatility are piecewise constant; everything else is constant.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative eigenvalue floor used to declare `sigma sigma^T` positive definite.
pub const EPS_PD: f64 = 1e-10;

/// A right-continuous step function on `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseConstant<T> {
    starts: Vec<f64>,
    values: Vec<T>,
}

impl<T> PiecewiseConstant<T> {
    pub fn constant(value: T) -> Self {
        Self {
            starts: vec![0.0],
            values: vec![value],
        }
    }

    /// `starts[0]` must be 0 and the starts strictly increasing and below `horizon`.
    pub fn new(starts: Vec<f64>, values: Vec<T>, horizon: f64) -> Result<Self> {
        if starts.is_empty() || starts.len() != values.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} breakpoints for {} values",
                starts.len(),
                values.len()
            )));
        }
        if starts[0] != 0.0 {
            return Err(Error::InvalidParameter(
                "first breakpoint must be 0".to_string(),
            ));
        }
        if starts.windows(2).any(|w| w[1] <= w[0]) || starts.iter().any(|&s| s >= horizon) {
            return Err(Error::InvalidParameter(
                "breakpoints must be strictly increasing and inside [0, T)".to_string(),
            ));
        }
        Ok(Self { starts, values })
    }

    pub fn starts(&self) -> &[f64] {
        &self.starts
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the piece active at `t`.
    pub fn index_at(&self, t: f64) -> usize {
        self.starts.partition_point(|&s| s <= t).saturating_sub(1)
    }

    pub fn at(&self, t: f64) -> &T {
        &self.values[self.index_at(t)]
    }
}

impl PiecewiseConstant<f64> {
    /// Exact integral over `[lo, hi]` inside `[0, horizon]`.
    pub fn integral(&self, lo: f64, hi: f64, horizon: f64) -> f64 {
        let mut total = 0.0;
        for (i, &v) in self.values.iter().enumerate() {
            let start = self.starts[i];
            let end = self.starts.get(i + 1).copied().unwrap_or(horizon);
            let overlap = end.min(hi) - start.max(lo);
            if overlap > 0.0 {
                total += v * overlap;
            }
        }
        total
    }
}

/// Either a single value or an explicit step function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Schedule<T> {
    Constant(T),
    Piecewise { breakpoints: Vec<f64>, values: Vec<T> },
}

/// Raw parameter bundle as it appears in a config file. Matrices are
/// row-major nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    pub r: Schedule<f64>,
    pub a: Vec<f64>,
    #[serde(rename = "A")]
    pub big_a: Vec<Vec<f64>>,
    pub d: Vec<f64>,
    #[serde(rename = "D")]
    pub big_d: Vec<Vec<f64>>,
    #[serde(rename = "Lambda")]
    pub lambda: Vec<Vec<f64>>,
    pub sigma: Schedule<Vec<Vec<f64>>>,
    pub x0: f64,
    pub y0: Vec<f64>,
    #[serde(default = "default_price")]
    pub s0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<Vec<f64>>,
    #[serde(rename = "T")]
    pub horizon: f64,
}

fn default_price() -> f64 {
    1.0
}

/// Quantities derived from one volatility piece.
#[derive(Debug, Clone, PartialEq)]
pub struct VolRegime {
    /// `sigma`, m x (n+m).
    pub sigma: DMatrix<f64>,
    /// `Gamma = sigma sigma^T`.
    pub gamma: DMatrix<f64>,
    pub gamma_inv: DMatrix<f64>,
    /// Principal square root `Sigma` of `Gamma`.
    pub root: DMatrix<f64>,
    pub root_inv: DMatrix<f64>,
    /// Diagonal of `Gamma` (the Ito correction of the log prices).
    pub gamma_diag: DVector<f64>,
}

impl VolRegime {
    fn new(sigma: DMatrix<f64>) -> Result<Self> {
        let gamma = &sigma * sigma.transpose();
        let root = gamma_sqrt(&gamma)?;
        let gamma_inv = symmetric_inverse(&gamma)?;
        let root_inv = symmetric_inverse(&root)?;
        let gamma_diag = gamma.diagonal();
        Ok(Self {
            sigma,
            gamma,
            gamma_inv,
            root,
            root_inv,
            gamma_diag,
        })
    }
}

/// A validated market model.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketModel {
    /// Number of stocks.
    pub m: usize,
    /// Number of factors.
    pub n: usize,
    pub rate: PiecewiseConstant<f64>,
    /// Constant part `a` of the appreciation rates.
    pub a: DVector<f64>,
    /// Factor loading `A` of the appreciation rates, m x n.
    pub loading: DMatrix<f64>,
    /// Factor drift constant `d`.
    pub factor_drift: DVector<f64>,
    /// Factor mean-reversion matrix `D`, n x n.
    pub factor_matrix: DMatrix<f64>,
    /// Factor diffusion `Lambda`, n x (n+m).
    pub factor_vol: DMatrix<f64>,
    pub regimes: PiecewiseConstant<VolRegime>,
    pub x0: f64,
    pub y0: DVector<f64>,
    pub s0: f64,
    pub s: DVector<f64>,
    pub horizon: f64,
}

fn matrix_from_rows(name: &str, rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        let got_cols = rows.first().map_or(0, |r| r.len());
        return Err(Error::DimensionMismatch(format!(
            "{name} must be {nrows}x{ncols}, got {}x{got_cols}",
            rows.len()
        )));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn rows_from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn positive(name: &str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveScalar {
            name: name.to_string(),
            value,
        })
    }
}

/// Validates a raw parameter bundle into a [`MarketModel`].
pub fn validate_model(raw: &ModelParams) -> Result<MarketModel> {
    let m = raw.a.len();
    let n = raw.d.len();
    if m == 0 || n == 0 {
        return Err(Error::DimensionMismatch(
            "need at least one stock and one factor".to_string(),
        ));
    }
    if raw.m.is_some_and(|v| v != m) || raw.n.is_some_and(|v| v != n) {
        return Err(Error::DimensionMismatch(format!(
            "declared (m, n) = ({:?}, {:?}) but a has {m} and d has {n} entries",
            raw.m, raw.n
        )));
    }
    positive("T", raw.horizon)?;
    positive("x0", raw.x0)?;
    positive("s0", raw.s0)?;
    let horizon = raw.horizon;

    let loading = matrix_from_rows("A", &raw.big_a, m, n)?;
    let factor_matrix = matrix_from_rows("D", &raw.big_d, n, n)?;
    let factor_vol = matrix_from_rows("Lambda", &raw.lambda, n, n + m)?;
    if raw.y0.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "y0 must have {n} entries, got {}",
            raw.y0.len()
        )));
    }
    let s = match &raw.s {
        Some(s) => {
            if s.len() != m {
                return Err(Error::DimensionMismatch(format!(
                    "s must have {m} entries, got {}",
                    s.len()
                )));
            }
            s.clone()
        }
        None => vec![1.0; m],
    };
    for (i, &si) in s.iter().enumerate() {
        positive(&format!("s[{i}]"), si)?;
    }

    let rate = match &raw.r {
        Schedule::Constant(r) => PiecewiseConstant::constant(*r),
        Schedule::Piecewise { breakpoints, values } => {
            PiecewiseConstant::new(breakpoints.clone(), values.clone(), horizon)?
        }
    };
    if rate.values().iter().any(|r| !r.is_finite()) {
        return Err(Error::InvalidParameter("r must be finite".to_string()));
    }

    let (starts, sigmas) = match &raw.sigma {
        Schedule::Constant(s) => (vec![0.0], vec![s.clone()]),
        Schedule::Piecewise { breakpoints, values } => (breakpoints.clone(), values.clone()),
    };
    let regimes = sigmas
        .iter()
        .map(|rows| matrix_from_rows("sigma", rows, m, n + m).and_then(VolRegime::new))
        .collect::<Result<Vec<_>>>()?;
    let regimes = PiecewiseConstant::new(starts, regimes, horizon)?;

    let all_finite = raw.a.iter().chain(&raw.d).chain(&raw.y0).all(|v| v.is_finite())
        && loading.iter().chain(factor_matrix.iter()).chain(factor_vol.iter()).all(|v| v.is_finite());
    if !all_finite {
        return Err(Error::InvalidParameter("parameters must be finite".to_string()));
    }

    Ok(MarketModel {
        m,
        n,
        rate,
        a: DVector::from_vec(raw.a.clone()),
        loading,
        factor_drift: DVector::from_vec(raw.d.clone()),
        factor_matrix,
        factor_vol,
        regimes,
        x0: raw.x0,
        y0: DVector::from_vec(raw.y0.clone()),
        s0: raw.s0,
        s: DVector::from_vec(s),
        horizon,
    })
}

impl MarketModel {
    /// The raw bundle this model was validated from.
    pub fn params(&self) -> ModelParams {
        let r = if self.rate.len() == 1 {
            Schedule::Constant(self.rate.values()[0])
        } else {
            Schedule::Piecewise {
                breakpoints: self.rate.starts().to_vec(),
                values: self.rate.values().to_vec(),
            }
        };
        let sigmas: Vec<_> = self
            .regimes
            .values()
            .iter()
            .map(|reg| rows_from_matrix(&reg.sigma))
            .collect();
        let sigma = if sigmas.len() == 1 {
            Schedule::Constant(sigmas[0].clone())
        } else {
            Schedule::Piecewise {
                breakpoints: self.regimes.starts().to_vec(),
                values: sigmas,
            }
        };
        ModelParams {
            m: Some(self.m),
            n: Some(self.n),
            r,
            a: self.a.iter().copied().collect(),
            big_a: rows_from_matrix(&self.loading),
            d: self.factor_drift.iter().copied().collect(),
            big_d: rows_from_matrix(&self.factor_matrix),
            lambda: rows_from_matrix(&self.factor_vol),
            sigma,
            x0: self.x0,
            y0: self.y0.iter().copied().collect(),
            s0: self.s0,
            s: Some(self.s.iter().copied().collect()),
            horizon: self.horizon,
        }
    }

    /// Short rate in force at `t`.
    pub fn rate_at(&self, t: f64) -> f64 {
        *self.rate.at(t)
    }

    pub fn regime_at(&self, t: f64) -> &VolRegime {
        self.regimes.at(t)
    }

    /// `int_lo^hi r(s) ds`.
    pub fn rate_integral(&self, lo: f64, hi: f64) -> f64 {
        self.rate.integral(lo, hi, self.horizon)
    }

    /// `x0 * exp(int_0^T r)`: the terminal wealth of the bond-only strategy.
    pub fn bond_growth(&self) -> f64 {
        self.x0 * self.rate_integral(0.0, self.horizon).exp()
    }

    /// Every point where `r` or `sigma` may jump.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut all: Vec<f64> = self
            .rate
            .starts()
            .iter()
            .chain(self.regimes.starts())
            .copied()
            .collect();
        all.sort_by(f64::total_cmp);
        all.dedup();
        all
    }

    /// True when `sigma` has a single piece.
    pub fn has_constant_volatility(&self) -> bool {
        self.regimes.len() == 1
    }
}

/// Uniform grid `0 = t_0 < ... < t_N = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    nodes: Vec<f64>,
    step: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        positive("T", horizon)?;
        if steps == 0 {
            return Err(Error::InvalidParameter("grid needs at least one step".to_string()));
        }
        let step = horizon / steps as f64;
        let mut nodes: Vec<f64> = (0..=steps).map(|k| k as f64 * step).collect();
        nodes[steps] = horizon;
        Ok(Self { nodes, step })
    }

    /// A grid on `[0, T]` whose nodes include every breakpoint of the model.
    pub fn for_model(model: &MarketModel, steps: usize) -> Result<Self> {
        let grid = Self::new(model.horizon, steps)?;
        for bp in model.breakpoints() {
            grid.node_index(bp).map_err(|_| {
                Error::InvalidParameter(format!(
                    "breakpoint {bp} is not a node of the {steps}-step grid"
                ))
            })?;
        }
        Ok(grid)
    }

    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn horizon(&self) -> f64 {
        self.nodes[self.steps()]
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn t(&self, k: usize) -> f64 {
        self.nodes[k]
    }

    /// Index of the node equal to `t` (up to rounding).
    pub fn node_index(&self, t: f64) -> Result<usize> {
        let x = t / self.step;
        let k = x.round();
        if (x - k).abs() > 1e-7 || k < 0.0 || k as usize > self.steps() {
            return Err(Error::GridMismatch { t });
        }
        Ok(k as usize)
    }

    /// Midpoint of step `k`, used to pick the coefficient piece of `[t_k, t_{k+1})`.
    pub fn midpoint(&self, k: usize) -> f64 {
        0.5 * (self.nodes[k] + self.nodes[k + 1])
    }
}

fn symmetric_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let inv = m.clone().try_inverse().ok_or_else(|| Error::Singular {
        what: "matrix".to_string(),
        t: f64::NAN,
    })?;
    Ok(0.5 * (&inv + inv.transpose()))
}

/// Principal symmetric square root of a symmetric positive definite matrix.
pub fn gamma_sqrt(gamma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !gamma.is_square() {
        return Err(Error::DimensionMismatch("Gamma must be square".to_string()));
    }
    let sym = 0.5 * (gamma + gamma.transpose());
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let threshold = EPS_PD * max.abs();
    if !(max > 0.0) || min <= threshold {
        return Err(Error::NotPositiveDefinite {
            what: "sigma sigma^T".to_string(),
            min_eig: min,
            threshold,
        });
    }
    let roots = eig.eigenvalues.map(f64::sqrt);
    let v = &eig.eigenvectors;
    let root = v * DMatrix::from_diagonal(&roots) * v.transpose();
    Ok(0.5 * (&root + root.transpose()))
}

/// `exp(-int_t^T r(s) ds)`.
pub fn discount(t: f64, model: &MarketModel) -> Result<f64> {
    let horizon = model.horizon;
    let tol = 1e-12 * horizon;
    if !(t >= -tol && t <= horizon + tol) {
        return Err(Error::OutOfHorizon { t, horizon });
    }
    let t = t.clamp(0.0, horizon);
    Ok((-model.rate_integral(t, horizon)).exp())
}

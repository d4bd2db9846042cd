//! Conditional-mean filter for the unobserved factors.
//!
//! The error covariance `beta` solves a forward matrix Riccati equation that
//! does not depend on the observations, so it is integrated once on the
//! solver grid. The filter itself is an explicit Euler scheme on
//!
//! ```text
//! dy_hat = (d + D y_hat) dt + (Lambda sigma^T + beta A^T) Sigma^{-1} dv
//! dv     = Sigma^{-1} [dY - (a + A y_hat - diag(Gamma)/2) dt]
//! ```
//!
//! where `Y = log S` are the observed log prices.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::model::{MarketModel, TimeGrid, VolRegime};
use crate::ode::{asymmetry, hermite_mid, rk4_step, symmetrize, Stage};

/// Error covariance and gain on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterSolution {
    pub grid: TimeGrid,
    /// `beta(t_k)`, one per node.
    pub beta: Vec<DMatrix<f64>>,
    /// `beta` at the midpoint of each step (cubic Hermite from the RK4 nodes).
    pub beta_mid: Vec<DMatrix<f64>>,
    /// Gain `(Lambda sigma^T + beta A^T) Sigma^{-1}` at each node, n x m.
    pub gain: Vec<DMatrix<f64>>,
}

impl FilterSolution {
    /// Volatility piece used on `[t_k, t_{k+1})`; the last node reuses the last step.
    pub fn regime<'a>(&self, model: &'a MarketModel, k: usize) -> &'a VolRegime {
        let k = k.min(self.grid.steps() - 1);
        model.regime_at(self.grid.midpoint(k))
    }

    /// Short rate on `[t_k, t_{k+1})`.
    pub fn rate(&self, model: &MarketModel, k: usize) -> f64 {
        let k = k.min(self.grid.steps() - 1);
        model.rate_at(self.grid.midpoint(k))
    }
}

/// `Lambda sigma^T + beta A^T`, the covariation of factor and price noise
/// seen through the filter (n x m).
pub fn cross_covariance(model: &MarketModel, regime: &VolRegime, beta: &DMatrix<f64>) -> DMatrix<f64> {
    &model.factor_vol * regime.sigma.transpose() + beta * model.loading.transpose()
}

fn beta_rhs(model: &MarketModel, regime: &VolRegime, beta: &DMatrix<f64>) -> DMatrix<f64> {
    let dm = &model.factor_matrix;
    let k = cross_covariance(model, regime, beta);
    dm * beta + beta * dm.transpose() + &model.factor_vol * model.factor_vol.transpose()
        - &k * &regime.gamma_inv * k.transpose()
}

fn check_covariance(beta: &DMatrix<f64>, t: f64) -> Result<()> {
    let coarse = || Error::StepTooCoarse {
        what: "filter covariance".to_string(),
        t,
    };
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(coarse());
    }
    let scale = beta.norm().max(1.0);
    if asymmetry(beta) > 1e-10 {
        return Err(coarse());
    }
    let sym = 0.5 * (beta + beta.transpose());
    if SymmetricEigen::new(sym).eigenvalues.min() < -1e-10 * scale {
        return Err(coarse());
    }
    Ok(())
}

/// Integrates the covariance Riccati equation forward from `beta(0) = 0`.
pub fn solve_beta(model: &MarketModel, grid: &TimeGrid) -> Result<FilterSolution> {
    let n = model.n;
    let steps = grid.steps();
    let h = grid.step();
    let mut beta = Vec::with_capacity(steps + 1);
    let mut beta_mid = Vec::with_capacity(steps);
    beta.push(DMatrix::zeros(n, n));
    for k in 0..steps {
        let regime = model.regime_at(grid.midpoint(k));
        let rhs = |_: Stage, b: &DMatrix<f64>| beta_rhs(model, regime, b);
        let current = &beta[k];
        let mut next = rk4_step(rhs, current, h);
        check_covariance(&next, grid.t(k + 1))?;
        symmetrize(&mut next);
        let mid = hermite_mid(
            current,
            &next,
            &beta_rhs(model, regime, current),
            &beta_rhs(model, regime, &next),
            h,
        );
        beta_mid.push(mid);
        beta.push(next);
    }
    let gain = (0..=steps)
        .map(|k| {
            let regime = model.regime_at(grid.midpoint(k.min(steps - 1)));
            cross_covariance(model, regime, &beta[k]) * &regime.root_inv
        })
        .collect();
    Ok(FilterSolution {
        grid: grid.clone(),
        beta,
        beta_mid,
        gain,
    })
}

/// Independent route to `beta(t)` through the linear Hamiltonian system
/// (constant volatility only). With `F = D - Lambda sigma^T Gamma^{-1} A`,
/// `S = A^T Gamma^{-1} A` and `Q = Lambda (I - sigma^T Gamma^{-1} sigma) Lambda^T`,
/// the pair `(K, L)` solves
/// `d/ds [K; L] = [[F^T, -S], [-Q, -F]] [K; L]` with `(K, L)(T) = (I, 0)`,
/// and `beta(t) = L(T - t) K(T - t)^{-1}`. The propagator is evaluated with a
/// matrix exponential.
pub fn beta_hamiltonian(model: &MarketModel, t: f64) -> Result<DMatrix<f64>> {
    if !model.has_constant_volatility() {
        return Err(Error::Unsupported(
            "Hamiltonian covariance needs a single volatility piece".to_string(),
        ));
    }
    let horizon = model.horizon;
    if !(0.0..=horizon).contains(&t) {
        return Err(Error::OutOfHorizon { t, horizon });
    }
    let n = model.n;
    let reg = &model.regimes.values()[0];
    let lam = &model.factor_vol;
    let load = &model.loading;
    let f = &model.factor_matrix - lam * reg.sigma.transpose() * &reg.gamma_inv * load;
    let s = load.transpose() * &reg.gamma_inv * load;
    let q = lam * lam.transpose()
        - lam * reg.sigma.transpose() * &reg.gamma_inv * &reg.sigma * lam.transpose();

    let mut ham = DMatrix::zeros(2 * n, 2 * n);
    ham.view_mut((0, 0), (n, n)).copy_from(&f.transpose());
    ham.view_mut((0, n), (n, n)).copy_from(&(-&s));
    ham.view_mut((n, 0), (n, n)).copy_from(&(-&q));
    ham.view_mut((n, n), (n, n)).copy_from(&(-&f));

    let prop = (ham * (-t)).exp();
    let k_blk = prop.view((0, 0), (n, n)).into_owned();
    let l_blk = prop.view((n, 0), (n, n)).into_owned();
    let k_inv = k_blk.try_inverse().ok_or_else(|| Error::Singular {
        what: "Hamiltonian factor K".to_string(),
        t,
    })?;
    let mut beta = l_blk * k_inv;
    symmetrize(&mut beta);
    Ok(beta)
}

/// Running filter state.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub t: f64,
    pub y_hat: DVector<f64>,
    /// Innovation increments seen so far.
    pub innovations: Vec<DVector<f64>>,
}

impl FilterState {
    pub fn new(model: &MarketModel) -> Self {
        Self {
            t: 0.0,
            y_hat: model.y0.clone(),
            innovations: Vec::new(),
        }
    }
}

/// Per-node filter coefficients flattened row-major for the hot loops.
#[derive(Debug, Clone)]
pub(crate) struct NodeFilter {
    /// `Sigma^{-1}`, m x m.
    pub root_inv: Vec<f64>,
    /// `a - diag(Gamma)/2`.
    pub obs_drift: Vec<f64>,
    /// Gain, n x m.
    pub gain: Vec<f64>,
}

/// Allocation-free Euler filter shared by [`filter_step`], [`run_filter`] and
/// the simulator, so all three produce bit-identical paths.
#[derive(Debug, Clone)]
pub(crate) struct FilterKernel {
    pub m: usize,
    pub n: usize,
    /// `A`, m x n row-major.
    pub loading: Vec<f64>,
    pub drift: Vec<f64>,
    /// `D`, n x n row-major.
    pub mean_rev: Vec<f64>,
    pub nodes: Vec<NodeFilter>,
}

pub(crate) fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

impl FilterKernel {
    pub fn new(model: &MarketModel, fs: &FilterSolution) -> Self {
        let nodes = (0..=fs.grid.steps())
            .map(|k| {
                let reg = fs.regime(model, k);
                NodeFilter {
                    root_inv: row_major(&reg.root_inv),
                    obs_drift: (&model.a - &reg.gamma_diag * 0.5).iter().copied().collect(),
                    gain: row_major(&fs.gain[k]),
                }
            })
            .collect();
        Self {
            m: model.m,
            n: model.n,
            loading: row_major(&model.loading),
            drift: model.factor_drift.iter().copied().collect(),
            mean_rev: row_major(&model.factor_matrix),
            nodes,
        }
    }

    /// Advances `y_hat` over one observation increment `dy` of length `dt`
    /// using the coefficients of node `k`; writes the innovation to `dv`.
    /// `scratch` needs `m + n` entries.
    #[inline]
    pub fn update(&self, k: usize, y_hat: &mut [f64], dy: &[f64], dt: f64, dv: &mut [f64], scratch: &mut [f64]) {
        let (m, n) = (self.m, self.n);
        let node = &self.nodes[k];
        let (resid, drift) = scratch.split_at_mut(m);
        for i in 0..m {
            let mut pred = node.obs_drift[i];
            for j in 0..n {
                pred += self.loading[i * n + j] * y_hat[j];
            }
            resid[i] = dy[i] - pred * dt;
        }
        for i in 0..m {
            let mut acc = 0.0;
            for j in 0..m {
                acc += node.root_inv[i * m + j] * resid[j];
            }
            dv[i] = acc;
        }
        for i in 0..n {
            let mut acc = self.drift[i];
            for j in 0..n {
                acc += self.mean_rev[i * n + j] * y_hat[j];
            }
            drift[i] = acc * dt;
            for j in 0..m {
                drift[i] += node.gain[i * m + j] * dv[j];
            }
        }
        for i in 0..n {
            y_hat[i] += drift[i];
        }
    }
}

/// One Euler step of the filter over a full grid step starting at `state.t`.
pub fn filter_step(
    state: &FilterState,
    model: &MarketModel,
    fs: &FilterSolution,
    dy: &DVector<f64>,
    dt: f64,
) -> Result<(FilterState, DVector<f64>)> {
    let k = fs.grid.node_index(state.t)?;
    let h = fs.grid.step();
    if k >= fs.grid.steps() || (dt - h).abs() > 1e-9 * h {
        return Err(Error::GridMismatch { t: state.t + dt });
    }
    if dy.len() != model.m {
        return Err(Error::DimensionMismatch(format!(
            "observation increment has {} entries, expected {}",
            dy.len(),
            model.m
        )));
    }
    let kernel = FilterKernel::new(model, fs);
    let mut y_hat = state.y_hat.clone();
    let mut dv = DVector::zeros(model.m);
    let mut scratch = vec![0.0; model.m + model.n];
    kernel.update(k, y_hat.as_mut_slice(), dy.as_slice(), h, dv.as_mut_slice(), &mut scratch);
    let mut innovations = state.innovations.clone();
    innovations.push(dv.clone());
    Ok((
        FilterState {
            t: fs.grid.t(k + 1),
            y_hat,
            innovations,
        },
        dv,
    ))
}

/// Filter output aligned with the grid. `innovations[0]` is zero; entry `k`
/// is the increment over `[t_{k-1}, t_k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterPath {
    pub y_hat: Vec<DVector<f64>>,
    pub innovations: Vec<DVector<f64>>,
}

/// Runs the filter over a log-price series with one entry per grid node.
pub fn run_filter(model: &MarketModel, fs: &FilterSolution, log_prices: &[DVector<f64>]) -> Result<FilterPath> {
    let nodes = fs.grid.steps() + 1;
    if log_prices.len() != nodes {
        return Err(Error::LengthMismatch {
            expected: nodes,
            got: log_prices.len(),
        });
    }
    if let Some(bad) = log_prices.iter().find(|p| p.len() != model.m) {
        return Err(Error::DimensionMismatch(format!(
            "log-price row has {} entries, expected {}",
            bad.len(),
            model.m
        )));
    }
    let kernel = FilterKernel::new(model, fs);
    let h = fs.grid.step();
    let mut y_hat = model.y0.clone();
    let mut scratch = vec![0.0; model.m + model.n];
    let mut dy = DVector::zeros(model.m);
    let mut out_y = Vec::with_capacity(nodes);
    let mut out_v = Vec::with_capacity(nodes);
    out_y.push(y_hat.clone());
    out_v.push(DVector::zeros(model.m));
    for k in 0..fs.grid.steps() {
        dy.copy_from(&(&log_prices[k + 1] - &log_prices[k]));
        let mut dv = DVector::zeros(model.m);
        kernel.update(k, y_hat.as_mut_slice(), dy.as_slice(), h, dv.as_mut_slice(), &mut scratch);
        out_y.push(y_hat.clone());
        out_v.push(dv);
    }
    Ok(FilterPath {
        y_hat: out_y,
        innovations: out_v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::scalar_params;
    use crate::model::{validate_model, ModelParams, Schedule};
    use approx::assert_relative_eq;

    pub(crate) fn two_factor_params() -> ModelParams {
        ModelParams {
            m: None,
            n: None,
            r: Schedule::Constant(0.03),
            a: vec![0.08, 0.06],
            big_a: vec![vec![0.6, 0.2], vec![-0.3, 0.5]],
            d: vec![0.05, -0.02],
            big_d: vec![vec![-0.8, 0.2], vec![0.1, -0.5]],
            lambda: vec![vec![0.3, 0.1, 0.2, 0.0], vec![0.0, 0.25, -0.1, 0.15]],
            sigma: Schedule::Constant(vec![
                vec![0.1, 0.0, 0.25, 0.05],
                vec![0.0, -0.05, 0.08, 0.3],
            ]),
            x0: 1.0,
            y0: vec![0.1, -0.05],
            s0: 1.0,
            s: None,
            horizon: 1.0,
        }
    }

    fn beta_closed_form(t: f64) -> f64 {
        0.16 * (1.0 - (-t).exp())
    }

    #[test]
    fn zero_factor_noise_keeps_beta_zero() {
        let mut p = two_factor_params();
        p.lambda = vec![vec![0.0; 4]; 2];
        let model = validate_model(&p).unwrap();
        let fs = solve_beta(&model, &TimeGrid::new(1.0, 50).unwrap()).unwrap();
        assert!(fs.beta.iter().all(|b| b.norm() == 0.0));
    }

    #[test]
    fn scalar_beta_matches_closed_form() {
        let model = validate_model(&scalar_params()).unwrap();
        let grid = TimeGrid::new(1.0, 200).unwrap();
        let fs = solve_beta(&model, &grid).unwrap();
        for (k, b) in fs.beta.iter().enumerate() {
            assert!((b[(0, 0)] - beta_closed_form(grid.t(k))).abs() < 1e-8);
        }
        for (k, b) in fs.beta_mid.iter().enumerate() {
            assert!((b[(0, 0)] - beta_closed_form(grid.midpoint(k))).abs() < 1e-8);
        }
        for t in [0.0, 0.3, 1.0] {
            let hb = beta_hamiltonian(&model, t).unwrap();
            assert!((hb[(0, 0)] - beta_closed_form(t)).abs() < 1e-6);
        }
    }

    #[test]
    fn hamiltonian_agrees_on_two_factors() {
        let model = validate_model(&two_factor_params()).unwrap();
        let grid = TimeGrid::new(1.0, 400).unwrap();
        let fs = solve_beta(&model, &grid).unwrap();
        assert_eq!(beta_hamiltonian(&model, 0.0).unwrap(), DMatrix::zeros(2, 2));
        for k in [100, 200, 400] {
            let hb = beta_hamiltonian(&model, grid.t(k)).unwrap();
            assert!((&hb - &fs.beta[k]).norm() < 1e-6);
        }
    }

    #[test]
    fn hamiltonian_rejects_time_varying_volatility() {
        let mut p = scalar_params();
        p.sigma = Schedule::Piecewise {
            breakpoints: vec![0.0, 0.5],
            values: vec![vec![vec![1.0, 0.0]], vec![vec![0.5, 0.5]]],
        };
        let model = validate_model(&p).unwrap();
        assert!(matches!(beta_hamiltonian(&model, 0.2), Err(Error::Unsupported(_))));
        let model = validate_model(&scalar_params()).unwrap();
        assert!(matches!(beta_hamiltonian(&model, 2.0), Err(Error::OutOfHorizon { .. })));
    }

    #[test]
    fn beta_stays_symmetric_psd() {
        let model = validate_model(&two_factor_params()).unwrap();
        let fs = solve_beta(&model, &TimeGrid::new(1.0, 100).unwrap()).unwrap();
        for b in &fs.beta {
            assert!(asymmetry(b) < 1e-10);
            assert!(SymmetricEigen::new(b.clone()).eigenvalues.min() >= -1e-10);
        }
    }

    #[test]
    fn beta_refinement_is_fourth_order() {
        let model = validate_model(&two_factor_params()).unwrap();
        let end = |n| {
            let fs = solve_beta(&model, &TimeGrid::new(1.0, n).unwrap()).unwrap();
            fs.beta[n].clone()
        };
        let (b1, b2, b3) = (end(10), end(20), end(40));
        let ratio = (&b1 - &b2).norm() / (&b2 - &b3).norm();
        assert!((13.0..20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn coarse_step_is_reported() {
        let mut p = scalar_params();
        p.big_d = vec![vec![-400.0]];
        let model = validate_model(&p).unwrap();
        let res = solve_beta(&model, &TimeGrid::new(1.0, 2).unwrap());
        assert!(matches!(res, Err(Error::StepTooCoarse { .. })));
    }

    #[test]
    fn gain_vanishes_without_loading_or_correlation() {
        let mut p = two_factor_params();
        p.big_a = vec![vec![0.0; 2]; 2];
        // Lambda rows orthogonal to sigma rows.
        p.lambda = vec![vec![0.3, 0.1, 0.0, 0.0], vec![0.0, 0.0, 0.0, 0.0]];
        p.sigma = Schedule::Constant(vec![vec![0.0, 0.0, 0.25, 0.05], vec![0.0, 0.0, 0.08, 0.3]]);
        let model = validate_model(&p).unwrap();
        let fs = solve_beta(&model, &TimeGrid::new(1.0, 20).unwrap()).unwrap();
        assert!(fs.gain.iter().all(|g| g.norm() == 0.0));

        // The filter then ignores the observations entirely.
        let mut prices = vec![DVector::zeros(2); 21];
        let quiet = run_filter(&model, &fs, &prices).unwrap();
        for (k, p) in prices.iter_mut().enumerate() {
            *p = DVector::from_vec(vec![(k as f64).sin(), (k as f64 * 0.3).cos()]);
        }
        let noisy = run_filter(&model, &fs, &prices).unwrap();
        assert_eq!(quiet.y_hat, noisy.y_hat);
    }

    #[test]
    fn matched_drift_gives_zero_innovation() {
        let mut p = two_factor_params();
        p.lambda = vec![vec![0.0; 4]; 2];
        let model = validate_model(&p).unwrap();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let fs = solve_beta(&model, &grid).unwrap();
        let h = grid.step();
        let state = FilterState::new(&model);
        let reg = fs.regime(&model, 0);
        let dy = (&model.a + &model.loading * &state.y_hat - &reg.gamma_diag * 0.5) * h;
        let (next, dv) = filter_step(&state, &model, &fs, &dy, h).unwrap();
        assert!(dv.norm() < 1e-15);
        let expected = &state.y_hat + (&model.factor_drift + &model.factor_matrix * &state.y_hat) * h;
        assert_relative_eq!(next.y_hat, expected, epsilon = 1e-15);
        assert_eq!(next.t, grid.t(1));
        assert_eq!(next.innovations.len(), 1);
    }

    #[test]
    fn filter_step_rejects_off_grid_times() {
        let model = validate_model(&scalar_params()).unwrap();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let fs = solve_beta(&model, &grid).unwrap();
        let mut state = FilterState::new(&model);
        let dy = DVector::zeros(1);
        assert!(matches!(
            filter_step(&state, &model, &fs, &dy, 0.05),
            Err(Error::GridMismatch { .. })
        ));
        state.t = 0.05;
        assert!(matches!(
            filter_step(&state, &model, &fs, &dy, 0.1),
            Err(Error::GridMismatch { .. })
        ));
    }

    #[test]
    fn constant_prices_with_zero_predicted_drift() {
        // a = diag(Gamma)/2 and A = 0 make the predicted log-price drift zero.
        let mut p = scalar_params();
        p.a = vec![0.5];
        let model = validate_model(&p).unwrap();
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let fs = solve_beta(&model, &grid).unwrap();
        let prices = vec![DVector::from_element(1, 0.7); 9];
        let path = run_filter(&model, &fs, &prices).unwrap();
        assert!(path.innovations.iter().all(|v| v.norm() == 0.0));
        assert!(matches!(
            run_filter(&model, &fs, &prices[..5]),
            Err(Error::LengthMismatch { expected: 9, got: 5 })
        ));
    }

    #[test]
    fn deterministic_filter_without_noise_or_loading() {
        let mut p = scalar_params();
        p.lambda = vec![vec![0.0, 0.0]];
        p.y0 = vec![1.0];
        p.d = vec![0.2];
        let model = validate_model(&p).unwrap();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let fs = solve_beta(&model, &grid).unwrap();
        let prices: Vec<_> = (0..5).map(|k| DVector::from_element(1, k as f64 * 0.37)).collect();
        let path = run_filter(&model, &fs, &prices).unwrap();
        let mut y = 1.0;
        for k in 0..4 {
            y += (0.2 - 0.5 * y) * 0.25;
            assert_relative_eq!(path.y_hat[k + 1][0], y, epsilon = 1e-15);
        }
    }
}

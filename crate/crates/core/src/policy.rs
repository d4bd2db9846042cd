//! Optimal allocation, Lagrange multiplier and efficient frontier.
//!
//! For a target mean `x_bar` the constrained problem is relaxed with a
//! multiplier `gamma`; the relaxed problem tracks the shifted target
//! `alpha = x_bar + gamma`, and its optimal value involves `f(0, y0)`, which
//! equals `E[exp(2 xi_T)]` under the optimal strategy.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::filterbank::{row_major, FilterSolution};
use crate::hjbsolve::{f_value, HjbCoefficients};
use crate::model::{discount, MarketModel};

/// A state-feedback trading rule.
///
/// `node` is the solver step containing `t` (the left node), `y_hat` the
/// filtered factors, and `out` receives the amount held in each stock.
pub trait Policy: Sync {
    fn allocate(&self, node: usize, t: f64, wealth: f64, y_hat: &[f64], out: &mut [f64]);
}

/// Holds everything in the bond.
#[derive(Debug, Clone, Copy, Default)]
pub struct BondOnly;

impl Policy for BondOnly {
    fn allocate(&self, _: usize, _: f64, _: f64, _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// Adapts a closure `(t, wealth, y_hat, out)`.
pub struct FnPolicy<F>(pub F);

impl<F> Policy for FnPolicy<F>
where
    F: Fn(f64, f64, &[f64], &mut [f64]) + Sync,
{
    fn allocate(&self, _: usize, t: f64, wealth: f64, y_hat: &[f64], out: &mut [f64]) {
        (self.0)(t, wealth, y_hat, out)
    }
}

/// `W V` and `W U` at one node, row-major.
#[derive(Debug, Clone)]
pub(crate) struct NodePolicy {
    pub wv: Vec<f64>,
    /// m x n.
    pub wu: Vec<f64>,
}

/// The optimal feedback rule for one shifted target.
#[derive(Debug, Clone)]
pub struct PolicyContext {
    pub coeffs: HjbCoefficients,
    pub filter: FilterSolution,
    /// Shifted target `x_bar + gamma*`.
    pub alpha: f64,
    /// `exp(-int_{t_k}^T r)` per node.
    pub discount: Vec<f64>,
    rates: Vec<f64>,
    pub(crate) nodes: Vec<NodePolicy>,
    m: usize,
    n: usize,
}

impl PolicyContext {
    /// Context for the efficient strategy reaching mean `x_bar`.
    pub fn new(model: &MarketModel, fs: &FilterSolution, coeffs: &HjbCoefficients, x_bar: f64) -> Result<Self> {
        let e2xi = expected_e2xi(coeffs, &model.y0)?;
        let gamma = gamma_star(x_bar, model, e2xi)?;
        Self::with_alpha(model, fs, coeffs, x_bar + gamma)
    }

    /// Context tracking an arbitrary quadratic target `alpha`.
    pub fn with_alpha(model: &MarketModel, fs: &FilterSolution, coeffs: &HjbCoefficients, alpha: f64) -> Result<Self> {
        if !alpha.is_finite() {
            return Err(Error::InvalidParameter(format!("target {alpha} is not finite")));
        }
        if coeffs.grid != fs.grid {
            return Err(Error::InvalidParameter(
                "coefficients and filter were solved on different grids".to_string(),
            ));
        }
        let grid = &fs.grid;
        let discount = grid
            .nodes()
            .iter()
            .map(|&t| discount(t, model))
            .collect::<Result<Vec<_>>>()?;
        let rates = (0..=grid.steps()).map(|k| fs.rate(model, k)).collect();
        let nodes = (0..=grid.steps())
            .map(|k| {
                let w = &fs.regime(model, k).gamma_inv;
                NodePolicy {
                    wv: (w * &coeffs.v[k]).iter().copied().collect(),
                    wu: row_major(&(w * &coeffs.u[k])),
                }
            })
            .collect();
        Ok(Self {
            coeffs: coeffs.clone(),
            filter: fs.clone(),
            alpha,
            discount,
            rates,
            nodes,
            m: model.m,
            n: model.n,
        })
    }

    /// `exp(-int_t^T r)` for `t` inside step `node`.
    #[inline]
    pub fn discount_at(&self, node: usize, t: f64) -> f64 {
        let dt = t - self.filter.grid.t(node);
        if dt == 0.0 {
            self.discount[node]
        } else {
            self.discount[node] * (self.rates[node] * dt).exp()
        }
    }

    /// Centred wealth `z = X - alpha exp(-int_t^T r)`.
    #[inline]
    pub fn centred(&self, node: usize, t: f64, wealth: f64) -> f64 {
        wealth - self.alpha * self.discount_at(node, t)
    }

    /// Writes `W (V + U y_hat)` into `out`.
    #[inline]
    pub(crate) fn exposure(&self, node: usize, y_hat: &[f64], out: &mut [f64]) {
        let p = &self.nodes[node];
        for (i, o) in out.iter_mut().enumerate().take(self.m) {
            let mut acc = p.wv[i];
            for (j, y) in y_hat.iter().enumerate().take(self.n) {
                acc += p.wu[i * self.n + j] * y;
            }
            *o = acc;
        }
    }
}

impl Policy for PolicyContext {
    fn allocate(&self, node: usize, t: f64, wealth: f64, y_hat: &[f64], out: &mut [f64]) {
        let z = self.centred(node, t, wealth);
        self.exposure(node, y_hat, out);
        for o in out.iter_mut() {
            *o *= -z;
        }
    }
}

/// `pi = -W (V + U y_hat) (X - alpha exp(-int_t^T r))` at a grid node.
pub fn optimal_pi(ctx: &PolicyContext, t: f64, wealth: f64, y_hat: &DVector<f64>) -> Result<DVector<f64>> {
    let k = ctx.filter.grid.node_index(t)?;
    if y_hat.len() != ctx.n {
        return Err(Error::DimensionMismatch(format!(
            "factor estimate has {} entries, expected {}",
            y_hat.len(),
            ctx.n
        )));
    }
    let mut out = DVector::zeros(ctx.m);
    ctx.allocate(k, t, wealth, y_hat.as_slice(), out.as_mut_slice());
    Ok(out)
}

/// `E[exp(2 xi_T)] = f(0, y0)`.
pub fn expected_e2xi(coeffs: &HjbCoefficients, y0: &DVector<f64>) -> Result<f64> {
    f_value(coeffs, 0.0, y0)
}

/// Relaxed objective `½ [x0 - (x_bar + gamma) e^{-int_0^T r}]^2 e2xi - ½ gamma^2`.
pub fn lagrangian(gamma: f64, x_bar: f64, model: &MarketModel, e2xi: f64) -> f64 {
    let d0 = (-model.rate_integral(0.0, model.horizon)).exp();
    let gap = model.x0 - (x_bar + gamma) * d0;
    0.5 * gap * gap * e2xi - 0.5 * gamma * gamma
}

/// Discounted second-moment ratio `rho = e^{-2 int_0^T r} e2xi`.
fn moment_ratio(model: &MarketModel, e2xi: f64) -> f64 {
    (-2.0 * model.rate_integral(0.0, model.horizon)).exp() * e2xi
}

/// Excess of the target over bond growth, rejecting targets below it.
fn excess_target(x_bar: f64, model: &MarketModel) -> Result<f64> {
    let bond_growth = model.bond_growth();
    let delta = x_bar - bond_growth;
    if !x_bar.is_finite() || delta < -1e-12 * bond_growth.abs().max(1.0) {
        return Err(Error::TargetBelowBondGrowth { x_bar, bond_growth });
    }
    Ok(delta.max(0.0))
}

/// Margin below 1 required of the discounted moment ratio.
pub const RHO_MARGIN: f64 = 1e-12;

/// Maximizer `gamma* = Delta rho / (1 - rho)` of [`lagrangian`], with
/// `Delta = x_bar - x0 e^{int_0^T r}`.
pub fn gamma_star(x_bar: f64, model: &MarketModel, e2xi: f64) -> Result<f64> {
    if !(e2xi > 0.0 && e2xi.is_finite()) {
        return Err(Error::InvalidParameter(format!("moment E[exp(2 xi)] = {e2xi} must be positive")));
    }
    let delta = excess_target(x_bar, model)?;
    let rho = moment_ratio(model, e2xi);
    // Within solver precision of 1 the multiplier is pure rounding noise.
    if rho >= 1.0 - RHO_MARGIN {
        return Err(Error::DegenerateMarket { rho });
    }
    Ok(delta * rho / (1.0 - rho))
}

/// One point of the efficient frontier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrontierPoint {
    pub x_bar: f64,
    pub gamma_star: f64,
    /// Minimal terminal variance.
    pub variance: f64,
    pub e2xi: f64,
}

impl FrontierPoint {
    pub fn stdev(&self) -> f64 {
        self.variance.sqrt()
    }
}

fn point_from_moment(x_bar: f64, model: &MarketModel, e2xi: f64) -> Result<FrontierPoint> {
    let gamma = gamma_star(x_bar, model, e2xi)?;
    let delta = excess_target(x_bar, model)?;
    let rho = moment_ratio(model, e2xi);
    // Twice the optimal relaxed objective, written around the bond growth so
    // that it vanishes exactly at Delta = 0.
    let shifted = delta + gamma;
    let variance = (rho * shifted * shifted - gamma * gamma).max(0.0);
    Ok(FrontierPoint {
        x_bar,
        gamma_star: gamma,
        variance,
        e2xi,
    })
}

pub fn frontier_point(x_bar: f64, model: &MarketModel, coeffs: &HjbCoefficients) -> Result<FrontierPoint> {
    let e2xi = expected_e2xi(coeffs, &model.y0)?;
    point_from_moment(x_bar, model, e2xi)
}

pub fn frontier_sweep(targets: &[f64], model: &MarketModel, coeffs: &HjbCoefficients) -> Result<Vec<FrontierPoint>> {
    let e2xi = expected_e2xi(coeffs, &model.y0)?;
    targets.iter().map(|&x| point_from_moment(x, model, e2xi)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hjbsolve::tests::{classical_params, scalar_factor_params, solve_all};
    use crate::model::{validate_model, Schedule};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn classical_theta2(model: &MarketModel) -> f64 {
        let c = model.a.add_scalar(-0.03);
        c.dot(&(&model.regime_at(0.0).gamma_inv * &c))
    }

    fn golden_argmax(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        let phi = 0.5 * (5f64.sqrt() - 1.0);
        let mut a = hi - phi * (hi - lo);
        let mut b = lo + phi * (hi - lo);
        let (mut fa, mut fb) = (f(a), f(b));
        while hi - lo > 1e-10 {
            if fa < fb {
                lo = a;
                a = b;
                fa = fb;
                b = lo + phi * (hi - lo);
                fb = f(b);
            } else {
                hi = b;
                b = a;
                fb = fa;
                a = hi - phi * (hi - lo);
                fa = f(a);
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn on_target_wealth_holds_no_stock() {
        let (model, fs, c) = solve_all(&scalar_factor_params(), 100);
        let ctx = PolicyContext::new(&model, &fs, &c, 1.1).unwrap();
        for k in [0, 37, 100] {
            let t = fs.grid.t(k);
            let x = ctx.alpha * ctx.discount[k];
            let pi = optimal_pi(&ctx, t, x, &DVector::from_element(1, 0.3)).unwrap();
            assert_eq!(pi, DVector::zeros(1));
        }
    }

    #[test]
    fn classical_policy_matches_textbook_form() {
        let (model, fs, c) = solve_all(&classical_params(), 50);
        let x_bar = 1.12;
        let ctx = PolicyContext::new(&model, &fs, &c, x_bar).unwrap();
        let theta2 = classical_theta2(&model);
        let (r, t_end) = (0.03, 1.0);
        // Textbook target: (x_bar e^{theta^2 T} - x0 e^{rT}) / (e^{theta^2 T} - 1).
        let big = (theta2 * t_end).exp();
        let alpha = (x_bar * big - (r * t_end).exp()) / (big - 1.0);
        assert_relative_eq!(ctx.alpha, alpha, max_relative = 1e-12);
        let w = &model.regime_at(0.0).gamma_inv;
        let excess = model.a.add_scalar(-r);
        for k in [0, 20, 49] {
            let t = fs.grid.t(k);
            let x = 0.93;
            let expected = -(w * &excess) * (x - alpha * (-r * (t_end - t)).exp());
            let pi = optimal_pi(&ctx, t, x, &DVector::zeros(1)).unwrap();
            assert!((pi - expected).norm() < 1e-12);
        }
    }

    #[test]
    fn allocation_is_linear_in_centred_wealth() {
        let (model, fs, c) = solve_all(&scalar_factor_params(), 40);
        let ctx = PolicyContext::new(&model, &fs, &c, 1.2).unwrap();
        let y = DVector::from_element(1, -0.1);
        let t = fs.grid.t(10);
        let base = ctx.alpha * ctx.discount[10];
        let one = optimal_pi(&ctx, t, base + 0.25, &y).unwrap();
        let two = optimal_pi(&ctx, t, base + 0.5, &y).unwrap();
        assert_relative_eq!(two[0], 2.0 * one[0], max_relative = 1e-14);
        assert!(matches!(optimal_pi(&ctx, 0.0101, 1.0, &y), Err(Error::GridMismatch { .. })));
    }

    #[test]
    fn classical_moment_is_closed_form() {
        let (model, _, c) = solve_all(&classical_params(), 50);
        let theta2 = classical_theta2(&model);
        let e = expected_e2xi(&c, &model.y0).unwrap();
        assert_relative_eq!(e, (0.06 - theta2).exp(), max_relative = 1e-13);
    }

    #[test]
    fn riskless_drift_gives_bond_moment() {
        let mut p = classical_params();
        p.a = vec![0.03, 0.03];
        let (model, _, c) = solve_all(&p, 20);
        assert_relative_eq!(expected_e2xi(&c, &model.y0).unwrap(), 0.06f64.exp(), max_relative = 1e-14);
    }

    #[test]
    fn classical_multiplier_and_frontier() {
        let (model, _, c) = solve_all(&classical_params(), 50);
        let theta2 = classical_theta2(&model);
        let x_bar = 1.1;
        let delta = x_bar - 0.03f64.exp();
        let pt = frontier_point(x_bar, &model, &c).unwrap();
        let rho = (-theta2).exp();
        assert_relative_eq!(pt.gamma_star, delta * rho / (1.0 - rho), max_relative = 1e-12);
        assert_relative_eq!(pt.variance, delta * delta / (theta2.exp() - 1.0), max_relative = 1e-12);
    }

    #[test]
    fn printed_denominator_misses_the_classical_frontier() {
        let (model, _, c) = solve_all(&classical_params(), 50);
        let theta2 = classical_theta2(&model);
        let x_bar = 1.1;
        let e = expected_e2xi(&c, &model.y0).unwrap();
        let growth = (2.0 * 0.03f64).exp();
        let delta = x_bar - 0.03f64.exp();
        let printed = delta * e / (growth * e - 1.0);
        let variance = |g: f64| 2.0 * lagrangian(g, x_bar, &model, e);
        let target = delta * delta / (theta2.exp() - 1.0);
        let derived = gamma_star(x_bar, &model, e).unwrap();
        assert_relative_eq!(variance(derived), target, max_relative = 1e-10);
        assert!((variance(printed) - target).abs() > 1e-3 * target);
    }

    #[test]
    fn gamma_star_is_the_numeric_argmax() {
        let (model, _, c) = solve_all(&scalar_factor_params(), 200);
        let e = expected_e2xi(&c, &model.y0).unwrap();
        for x_bar in [1.05, 1.2, 1.6] {
            let g = gamma_star(x_bar, &model, e).unwrap();
            let num = golden_argmax(|gm| lagrangian(gm, x_bar, &model, e), -50.0, 50.0);
            // Plain f64 evaluation flattens the top of the parabola; this
            // bound is the double-precision resolution of the argmax.
            assert!((g - num).abs() < 1e-6 * (1.0 + g.abs()), "{g} vs {num}");
        }
    }

    #[test]
    fn bond_target_is_riskless() {
        let (model, fs, c) = solve_all(&scalar_factor_params(), 50);
        let pt = frontier_point(model.bond_growth(), &model, &c).unwrap();
        assert_eq!(pt.gamma_star, 0.0);
        assert_eq!(pt.variance, 0.0);
        let ctx = PolicyContext::new(&model, &fs, &c, model.bond_growth()).unwrap();
        let pi = optimal_pi(&ctx, 0.0, model.x0, &model.y0).unwrap();
        assert!(pi.norm() < 1e-15);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let (model, _, _) = solve_all(&scalar_factor_params(), 10);
        let growth = model.bond_growth();
        assert!(matches!(
            gamma_star(growth * 1.1, &model, 2.0 * (0.06f64).exp()),
            Err(Error::DegenerateMarket { .. })
        ));
        assert!(matches!(
            gamma_star(growth - 0.01, &model, 1.0),
            Err(Error::TargetBelowBondGrowth { .. })
        ));
    }

    #[test]
    fn riskless_drift_is_degenerate() {
        let mut p = classical_params();
        p.a = vec![0.03, 0.03];
        let (model, _, c) = solve_all(&p, 50);
        assert!(matches!(
            frontier_point(1.1, &model, &c),
            Err(Error::DegenerateMarket { .. })
        ));
    }

    #[test]
    fn frontier_is_one_quadratic() {
        let (model, _, c) = solve_all(&scalar_factor_params(), 100);
        let g = model.bond_growth();
        let targets: Vec<f64> = (0..10).map(|i| g + 0.05 * i as f64).collect();
        let pts = frontier_sweep(&targets, &model, &c).unwrap();
        assert_eq!(pts[0].variance, 0.0);
        let slope = pts[1].variance / (targets[1] - g).powi(2);
        for (p, x) in pts.iter().zip(&targets).skip(1) {
            assert_relative_eq!(p.variance / (x - g).powi(2), slope, max_relative = 1e-12);
        }
        assert!(pts.windows(2).all(|w| w[1].variance > w[0].variance));
        let mut reversed = targets.clone();
        reversed.reverse();
        let mut back = frontier_sweep(&reversed, &model, &c).unwrap();
        back.reverse();
        assert_eq!(back, pts);
    }

    #[test]
    fn time_varying_rate_uses_the_integral() {
        let mut p = scalar_factor_params();
        p.r = Schedule::Piecewise {
            breakpoints: vec![0.0, 0.5],
            values: vec![0.01, 0.05],
        };
        let model = validate_model(&p).unwrap();
        let (_, fs, c) = solve_all(&p, 100);
        let ctx = PolicyContext::new(&model, &fs, &c, 1.1).unwrap();
        assert_relative_eq!(ctx.discount[0], (-0.03f64).exp(), max_relative = 1e-14);
        assert_relative_eq!(ctx.discount_at(10, 0.125), (-0.02875f64).exp(), max_relative = 1e-14);
    }

    proptest! {
        #[test]
        fn multiplier_maximizes_the_relaxation(excess in 0.0f64..2.0, log_e in -0.5f64..-0.01) {
            let (model, _, _) = solve_all(&classical_params(), 4);
            let e = (0.06 + log_e).exp();
            let x_bar = model.bond_growth() + excess;
            let g = gamma_star(x_bar, &model, e).unwrap();
            let top = lagrangian(g, x_bar, &model, e);
            for step in [1e-3, 1e-1, 1.0] {
                prop_assert!(top >= lagrangian(g + step, x_bar, &model, e) - 1e-14);
                prop_assert!(top >= lagrangian(g - step, x_bar, &model, e) - 1e-14);
            }
            let pt = point_from_moment(x_bar, &model, e).unwrap();
            prop_assert!(pt.variance >= 0.0);
            prop_assert!((pt.variance - 2.0 * top).abs() < 1e-10 * (1.0 + pt.variance));
        }
    }
}

//! Deterministic coefficient ODEs of the value function.
//!
//! Writing the value of the auxiliary quadratic problem as
//! `H = f(t, y_hat) z^2 / 2` with `z = X - alpha e^{-int_t^T r}` and
//! `f = exp{p + q^T y_hat + y_hat^T G y_hat}` turns the HJB equation into three
//! backward ODEs. With `K = Lambda sigma^T + beta A^T`, `W = Gamma^{-1}`,
//! `M = K W K^T` and `c = a - r 1`:
//!
//! ```text
//! dG/dt = A^T W A + (2 A^T W K^T - D^T) G + G (2 K W A - D) + 2 G M G
//! dq/dt = -D^T q - 2 G d + 2 G M q + 2 A^T W c + 4 G K W c + 2 A^T W K^T q
//! dp/dt = -2 r - d^T q - tr(M G) + q^T M q / 2 + c^T W c + 2 c^T W K^T q
//! ```
//!
//! with `G(T) = 0`, `q(T) = 0`, `p(T) = 0`. The optimal allocation is
//! `pi = -W (V + U y_hat) z` with `V = c + K^T q` and `U = A + 2 K^T G`.
//!
//! All three are integrated by RK4 in reversed time on the filter grid. Mid
//! stage values of `beta`, and of `G` and `q` when they feed the later
//! equations, come from cubic Hermite interpolation so the scheme stays
//! fourth order.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::filterbank::{cross_covariance, FilterSolution};
use crate::model::{MarketModel, TimeGrid};
use crate::ode::{asymmetry, hermite_mid, rk4_step, symmetrize, Stage};

/// Solved coefficient paths, one entry per grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct HjbCoefficients {
    pub grid: TimeGrid,
    pub g: Vec<DMatrix<f64>>,
    pub q: Vec<DVector<f64>>,
    pub p: Vec<f64>,
    /// `V(t_k) = a - r 1 + K^T q`.
    pub v: Vec<DVector<f64>>,
    /// `U(t_k) = A + 2 K^T G`, m x n.
    pub u: Vec<DMatrix<f64>>,
}

/// Coefficients frozen at one stage time.
#[derive(Debug, Clone)]
struct StageCoeffs {
    r: f64,
    w: DMatrix<f64>,
    k: DMatrix<f64>,
    /// `K W`.
    kw: DMatrix<f64>,
    /// `K W K^T`.
    m: DMatrix<f64>,
    /// `a - r 1`.
    c: DVector<f64>,
}

impl StageCoeffs {
    fn new(model: &MarketModel, r: f64, regime: &crate::model::VolRegime, beta: &DMatrix<f64>) -> Self {
        let k = cross_covariance(model, regime, beta);
        let w = regime.gamma_inv.clone();
        let kw = &k * &w;
        let m = &kw * k.transpose();
        let c = model.a.add_scalar(-r);
        Self { r, w, k, kw, m, c }
    }
}

/// Stage coefficients for every step: `[at t_k, at midpoint, at t_{k+1}]`,
/// all using the rate and volatility of `[t_k, t_{k+1})`.
struct CoefficientTable {
    steps: Vec<[StageCoeffs; 3]>,
}

impl CoefficientTable {
    fn new(model: &MarketModel, fs: &FilterSolution) -> Self {
        let steps = (0..fs.grid.steps())
            .map(|k| {
                let reg = fs.regime(model, k);
                let r = fs.rate(model, k);
                [
                    StageCoeffs::new(model, r, reg, &fs.beta[k]),
                    StageCoeffs::new(model, r, reg, &fs.beta_mid[k]),
                    StageCoeffs::new(model, r, reg, &fs.beta[k + 1]),
                ]
            })
            .collect();
        Self { steps }
    }

    /// Backward step `k` runs from `t_{k+1}` to `t_k`.
    fn backward(&self, k: usize, stage: Stage) -> &StageCoeffs {
        let s = &self.steps[k];
        match stage {
            Stage::Start => &s[2],
            Stage::Mid => &s[1],
            Stage::End => &s[0],
        }
    }
}

fn g_rhs(model: &MarketModel, c: &StageCoeffs, g: &DMatrix<f64>) -> DMatrix<f64> {
    let a = &model.loading;
    let wa = &c.w * a;
    let coupling = &c.kw * a * 2.0 - &model.factor_matrix;
    a.transpose() * &wa + coupling.transpose() * g + g * &coupling + g * &c.m * g * 2.0
}

fn q_rhs(model: &MarketModel, c: &StageCoeffs, g: &DMatrix<f64>, q: &DVector<f64>) -> DVector<f64> {
    let a = &model.loading;
    let wc = &c.w * &c.c;
    -model.factor_matrix.transpose() * q - g * &model.factor_drift * 2.0
        + g * (&c.m * q) * 2.0
        + a.transpose() * &wc * 2.0
        + g * (&c.k * &wc) * 4.0
        + a.transpose() * (c.kw.transpose() * q) * 2.0
}

fn p_rhs(model: &MarketModel, c: &StageCoeffs, g: &DMatrix<f64>, q: &DVector<f64>) -> f64 {
    let wc = &c.w * &c.c;
    -2.0 * c.r - model.factor_drift.dot(q) - (&c.m * g).trace()
        + 0.5 * q.dot(&(&c.m * q))
        + c.c.dot(&wc)
        + 2.0 * wc.dot(&(c.k.transpose() * q))
}

fn col(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

fn coarse(what: &str, t: f64) -> Error {
    Error::StepTooCoarse {
        what: what.to_string(),
        t,
    }
}

/// Integrates the `G` equation backward from `G(T) = 0`.
pub fn solve_g(model: &MarketModel, fs: &FilterSolution) -> Result<Vec<DMatrix<f64>>> {
    let table = CoefficientTable::new(model, fs);
    solve_g_with(model, fs, &table)
}

fn solve_g_with(model: &MarketModel, fs: &FilterSolution, table: &CoefficientTable) -> Result<Vec<DMatrix<f64>>> {
    let steps = fs.grid.steps();
    let h = fs.grid.step();
    let mut path = vec![DMatrix::zeros(model.n, model.n); steps + 1];
    for k in (0..steps).rev() {
        let rhs = |stage, g: &DMatrix<f64>| g_rhs(model, table.backward(k, stage), g);
        let mut next = rk4_step(rhs, &path[k + 1], -h);
        if next.iter().any(|v| !v.is_finite()) || asymmetry(&next) > 1e-10 {
            return Err(coarse("G", fs.grid.t(k)));
        }
        symmetrize(&mut next);
        path[k] = next;
    }
    Ok(path)
}

fn g_midpoints(model: &MarketModel, fs: &FilterSolution, table: &CoefficientTable, g: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    let h = fs.grid.step();
    (0..fs.grid.steps())
        .map(|k| {
            let d0 = g_rhs(model, &table.steps[k][0], &g[k]);
            let d1 = g_rhs(model, &table.steps[k][2], &g[k + 1]);
            hermite_mid(&g[k], &g[k + 1], &d0, &d1, h)
        })
        .collect()
}

fn check_len<T>(what: &[T], fs: &FilterSolution) -> Result<()> {
    let nodes = fs.grid.steps() + 1;
    if what.len() != nodes {
        return Err(Error::LengthMismatch {
            expected: nodes,
            got: what.len(),
        });
    }
    Ok(())
}

/// Integrates the linear `q` equation backward from `q(T) = 0` given `G`.
pub fn solve_q(model: &MarketModel, fs: &FilterSolution, g: &[DMatrix<f64>]) -> Result<Vec<DVector<f64>>> {
    check_len(g, fs)?;
    let table = CoefficientTable::new(model, fs);
    solve_q_with(model, fs, &table, g)
}

fn solve_q_with(
    model: &MarketModel,
    fs: &FilterSolution,
    table: &CoefficientTable,
    g: &[DMatrix<f64>],
) -> Result<Vec<DVector<f64>>> {
    let steps = fs.grid.steps();
    let h = fs.grid.step();
    let g_mid = g_midpoints(model, fs, table, g);
    let mut path = vec![DVector::zeros(model.n); steps + 1];
    for k in (0..steps).rev() {
        let g_at = |stage| match stage {
            Stage::Start => &g[k + 1],
            Stage::Mid => &g_mid[k],
            Stage::End => &g[k],
        };
        let rhs = |stage, q: &DMatrix<f64>| {
            col(&q_rhs(model, table.backward(k, stage), g_at(stage), &q.column(0).into_owned()))
        };
        let next = rk4_step(rhs, &col(&path[k + 1]), -h);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(coarse("q", fs.grid.t(k)));
        }
        path[k] = next.column(0).into_owned();
    }
    Ok(path)
}

/// Integrates the `p` equation backward from `p(T) = 0` given `G` and `q`.
pub fn solve_p(model: &MarketModel, fs: &FilterSolution, g: &[DMatrix<f64>], q: &[DVector<f64>]) -> Result<Vec<f64>> {
    check_len(g, fs)?;
    check_len(q, fs)?;
    let table = CoefficientTable::new(model, fs);
    solve_p_with(model, fs, &table, g, q)
}

fn solve_p_with(
    model: &MarketModel,
    fs: &FilterSolution,
    table: &CoefficientTable,
    g: &[DMatrix<f64>],
    q: &[DVector<f64>],
) -> Result<Vec<f64>> {
    let steps = fs.grid.steps();
    let h = fs.grid.step();
    let g_mid = g_midpoints(model, fs, table, g);
    let q_mid: Vec<DVector<f64>> = (0..steps)
        .map(|k| {
            let d0 = q_rhs(model, &table.steps[k][0], &g[k], &q[k]);
            let d1 = q_rhs(model, &table.steps[k][2], &g[k + 1], &q[k + 1]);
            hermite_mid(&col(&q[k]), &col(&q[k + 1]), &col(&d0), &col(&d1), h)
                .column(0)
                .into_owned()
        })
        .collect();
    let mut path = vec![0.0; steps + 1];
    for k in (0..steps).rev() {
        let at = |stage| match stage {
            Stage::Start => (&g[k + 1], &q[k + 1]),
            Stage::Mid => (&g_mid[k], &q_mid[k]),
            Stage::End => (&g[k], &q[k]),
        };
        let rhs = |stage, _: &DMatrix<f64>| {
            let (gs, qs) = at(stage);
            DMatrix::from_element(1, 1, p_rhs(model, table.backward(k, stage), gs, qs))
        };
        let next = rk4_step(rhs, &DMatrix::from_element(1, 1, path[k + 1]), -h)[(0, 0)];
        if !next.is_finite() {
            return Err(coarse("p", fs.grid.t(k)));
        }
        path[k] = next;
    }
    Ok(path)
}

/// Solves `G`, `q`, `p` in turn and assembles the policy matrices.
pub fn solve_hjb(model: &MarketModel, fs: &FilterSolution) -> Result<HjbCoefficients> {
    let table = CoefficientTable::new(model, fs);
    let g = solve_g_with(model, fs, &table)?;
    let q = solve_q_with(model, fs, &table, &g)?;
    let p = solve_p_with(model, fs, &table, &g, &q)?;
    let mut v = Vec::with_capacity(g.len());
    let mut u = Vec::with_capacity(g.len());
    for k in 0..g.len() {
        let reg = fs.regime(model, k);
        let kt = cross_covariance(model, reg, &fs.beta[k]).transpose();
        v.push(model.a.add_scalar(-fs.rate(model, k)) + &kt * &q[k]);
        u.push(&model.loading + kt * &g[k] * 2.0);
    }
    Ok(HjbCoefficients {
        grid: fs.grid.clone(),
        g,
        q,
        p,
        v,
        u,
    })
}

/// `vec` stacks columns; nalgebra storage is column-major already.
fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

fn unvec(v: &DVector<f64>, n: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(n, n, v.as_slice())
}

/// Independent route to `G` through `vec(G)` when the filter coupling `K`
/// vanishes (the quadratic term `2 G M G` is then absent and the equation is
/// a Lyapunov equation). On each step the coefficients are constant, so
/// `d vec(G)/dt = P1 vec(G) + P2` with `P1 = I (x) Ã^T + Ã^T (x) I`,
/// `Ã = -D` and `P2 = vec(A^T W A)`; the variation-of-constants solution is
/// evaluated exactly through the exponential of the augmented matrix
/// `[[-P1, -P2], [0, 0]]` in reversed time.
pub fn solve_g_kron(model: &MarketModel, fs: &FilterSolution) -> Result<Vec<DMatrix<f64>>> {
    let n = model.n;
    let steps = fs.grid.steps();
    let h = fs.grid.step();
    let table = CoefficientTable::new(model, fs);
    let coupled = table
        .steps
        .iter()
        .flatten()
        .any(|c| c.k.norm() > 1e-14 * (1.0 + model.factor_vol.norm()));
    if coupled {
        return Err(Error::Unsupported(
            "Kronecker form needs Lambda sigma^T + beta A^T = 0; the G equation is then linear".to_string(),
        ));
    }
    let eye = DMatrix::<f64>::identity(n, n);
    let mut path = vec![DMatrix::zeros(n, n); steps + 1];
    let mut current = DVector::zeros(n * n);
    for k in (0..steps).rev() {
        let c = &table.steps[k][0];
        let a = &model.loading;
        let at = -model.factor_matrix.transpose();
        let p1 = eye.kronecker(&at) + at.kronecker(&eye);
        let p2 = vec_of(&(a.transpose() * &c.w * a));
        let dim = n * n;
        let mut aug = DMatrix::zeros(dim + 1, dim + 1);
        aug.view_mut((0, 0), (dim, dim)).copy_from(&(-p1));
        aug.view_mut((0, dim), (dim, 1)).copy_from(&(-p2));
        let prop = (aug * h).exp();
        let mut ext = DVector::from_element(dim + 1, 1.0);
        ext.rows_mut(0, dim).copy_from(&current);
        current = (prop * ext).rows(0, dim).into_owned();
        let mut g = unvec(&current, n);
        symmetrize(&mut g);
        path[k] = g;
    }
    Ok(path)
}

/// Independent route to `G` for the general (Riccati) case through the
/// linear system `G = Y X^{-1}`: in reversed time `s = T - t`,
/// `dX/ds = Ã X + 2 M Y`, `dY/ds = -A^T W A X - Ã^T Y`, `X(0) = I`, `Y(0) = 0`,
/// with `Ã = 2 K W A - D`.
pub fn solve_g_hamiltonian(model: &MarketModel, fs: &FilterSolution) -> Result<Vec<DMatrix<f64>>> {
    let n = model.n;
    let steps = fs.grid.steps();
    let h = fs.grid.step();
    let table = CoefficientTable::new(model, fs);
    let a = &model.loading;
    let rhs_for = |c: &StageCoeffs, z: &DMatrix<f64>| {
        let x = z.rows(0, n);
        let y = z.rows(n, n);
        let at = &c.kw * a * 2.0 - &model.factor_matrix;
        let src = a.transpose() * &c.w * a;
        let mut out = DMatrix::zeros(2 * n, n);
        out.rows_mut(0, n).copy_from(&(&at * x + &c.m * y * 2.0));
        out.rows_mut(n, n).copy_from(&(-(src * x) - at.transpose() * y));
        out
    };
    let mut z = DMatrix::zeros(2 * n, n);
    z.rows_mut(0, n).fill_with_identity();
    let mut path = vec![DMatrix::zeros(n, n); steps + 1];
    for k in (0..steps).rev() {
        // Stepping s forward is stepping t backward, so stages run t_{k+1} -> t_k.
        z = rk4_step(|stage, z| rhs_for(table.backward(k, stage), z), &z, h);
        let x = z.rows(0, n).into_owned();
        let x_inv = x.try_inverse().ok_or_else(|| Error::Singular {
            what: "Riccati factor X".to_string(),
            t: fs.grid.t(k),
        })?;
        let mut g = z.rows(n, n) * x_inv;
        symmetrize(&mut g);
        path[k] = g;
    }
    Ok(path)
}

/// `exp{p(t) + q(t)^T y + y^T G(t) y}` at a grid node.
pub fn f_value(coeffs: &HjbCoefficients, t: f64, y_hat: &DVector<f64>) -> Result<f64> {
    let k = coeffs.grid.node_index(t)?;
    Ok(f_at(coeffs, k, y_hat))
}

fn f_at(coeffs: &HjbCoefficients, k: usize, y: &DVector<f64>) -> f64 {
    (coeffs.p[k] + coeffs.q[k].dot(y) + y.dot(&(&coeffs.g[k] * y))).exp()
}

/// Maximal normalized residual of the reduced HJB equation
///
/// ```text
/// f_t + 2 r f + f_y^T (d + D y) + tr(M f_yy) / 2
///     - (b + K^T f_y / f)^T W (b + K^T f_y / f) f = 0,   b = a + A y - r 1,
/// ```
///
/// over `points`. Spatial derivatives use central differences with step
/// `h_fd`; the time derivative is the five-point (three-point next to the
/// ends) difference of `f` along the grid. Sample times must be interior
/// grid nodes away from coefficient jumps.
pub fn hjb_residual(
    model: &MarketModel,
    fs: &FilterSolution,
    coeffs: &HjbCoefficients,
    points: &[(f64, DVector<f64>)],
    h_fd: f64,
) -> Result<f64> {
    let grid = &coeffs.grid;
    let steps = grid.steps();
    let dt = grid.step();
    let n = model.n;
    let mut worst = 0.0f64;
    for (t, y) in points {
        let k = grid.node_index(*t)?;
        if k == 0 || k >= steps {
            return Err(Error::InvalidParameter(format!(
                "residual sample t={t} must be an interior node"
            )));
        }
        let f = |kk: usize, yy: &DVector<f64>| f_at(coeffs, kk, yy);
        let f0 = f(k, y);
        let f_t = if k >= 2 && k + 2 <= steps {
            (-f(k + 2, y) + 8.0 * f(k + 1, y) - 8.0 * f(k - 1, y) + f(k - 2, y)) / (12.0 * dt)
        } else {
            (f(k + 1, y) - f(k - 1, y)) / (2.0 * dt)
        };
        let shifted = |i: usize, s: f64| {
            let mut yy = y.clone();
            yy[i] += s;
            yy
        };
        let mut grad = DVector::zeros(n);
        let mut hess = DMatrix::zeros(n, n);
        for i in 0..n {
            let fp = f(k, &shifted(i, h_fd));
            let fm = f(k, &shifted(i, -h_fd));
            grad[i] = (fp - fm) / (2.0 * h_fd);
            hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h_fd * h_fd);
            for j in 0..i {
                let corner = |si: f64, sj: f64| {
                    let mut yy = y.clone();
                    yy[i] += si;
                    yy[j] += sj;
                    f(k, &yy)
                };
                let mixed = (corner(h_fd, h_fd) - corner(h_fd, -h_fd) - corner(-h_fd, h_fd)
                    + corner(-h_fd, -h_fd))
                    / (4.0 * h_fd * h_fd);
                hess[(i, j)] = mixed;
                hess[(j, i)] = mixed;
            }
        }
        let reg = fs.regime(model, k);
        let r = fs.rate(model, k);
        let kx = cross_covariance(model, reg, &fs.beta[k]);
        let w = &reg.gamma_inv;
        let m = &kx * w * kx.transpose();
        let b = (&model.a + &model.loading * y).add_scalar(-r);
        let lever = &b + kx.transpose() * &grad / f0;
        let res = f_t + 2.0 * r * f0
            + grad.dot(&(&model.factor_drift + &model.factor_matrix * y))
            + 0.5 * (&m * &hess).trace()
            - lever.dot(&(w * &lever)) * f0;
        worst = worst.max((res / f0).abs());
    }
    Ok(worst)
}

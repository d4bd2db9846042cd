use nalgebra::DMatrix;

/// Stage position inside one integration step, relative to the direction of
/// travel: `Start` is where the step begins (the later node when stepping
/// backward).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Stage {
    Start,
    Mid,
    End,
}

/// One classical Runge-Kutta step. `h` may be negative.
pub(crate) fn rk4_step<F>(rhs: F, y: &DMatrix<f64>, h: f64) -> DMatrix<f64>
where
    F: Fn(Stage, &DMatrix<f64>) -> DMatrix<f64>,
{
    let k1 = rhs(Stage::Start, y);
    let k2 = rhs(Stage::Mid, &(y + &k1 * (0.5 * h)));
    let k3 = rhs(Stage::Mid, &(y + &k2 * (0.5 * h)));
    let k4 = rhs(Stage::End, &(y + &k3 * h));
    y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Cubic Hermite value at the midpoint of `[t0, t0 + h]` from the end values
/// and derivatives. Fourth-order accurate, which keeps RK4 at full order when
/// a previously solved path feeds the mid stages of another ODE.
pub(crate) fn hermite_mid(
    y0: &DMatrix<f64>,
    y1: &DMatrix<f64>,
    dy0: &DMatrix<f64>,
    dy1: &DMatrix<f64>,
    h: f64,
) -> DMatrix<f64> {
    (y0 + y1) * 0.5 + (dy0 - dy1) * (h / 8.0)
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Relative asymmetry `|M - M^T| / max(1, |M|)`.
pub(crate) fn asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).norm() / m.norm().max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rk4_is_fourth_order_on_exponential() {
        let exact = 1.0f64.exp();
        let err = |n: usize| {
            let h = 1.0 / n as f64;
            let mut y = DMatrix::from_element(1, 1, 1.0);
            for _ in 0..n {
                y = rk4_step(|_, y| y.clone(), &y, h);
            }
            (y[(0, 0)] - exact).abs()
        };
        let ratio = err(10) / err(20);
        assert!((ratio - 16.0).abs() < 1.0, "ratio {ratio}");
    }

    #[test]
    fn hermite_is_exact_on_cubics() {
        let f = |t: f64| 2.0 * t * t * t - t * t + 3.0;
        let df = |t: f64| 6.0 * t * t - 2.0 * t;
        let one = |v: f64| DMatrix::from_element(1, 1, v);
        let mid = hermite_mid(&one(f(0.2)), &one(f(0.7)), &one(df(0.2)), &one(df(0.7)), 0.5);
        assert!((mid[(0, 0)] - f(0.45)).abs() < 1e-14);
    }
}

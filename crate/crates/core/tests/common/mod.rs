#![allow(dead_code)]

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use pimv::config::RunConfig;
use pimv::filterbank::{solve_beta, FilterSolution};
use pimv::hjbsolve::{solve_hjb, HjbCoefficients};
use pimv::model::{validate_model, MarketModel, ModelParams, TimeGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SHIPPED: [&str; 3] = ["classical", "scalar", "factor2"];

pub fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(format!("{name}.json"))
}

pub fn config(name: &str) -> RunConfig {
    RunConfig::load(&config_path(name)).unwrap()
}

pub struct Solved {
    pub model: MarketModel,
    pub fs: FilterSolution,
    pub coeffs: HjbCoefficients,
}

pub fn solve(params: &ModelParams, steps: usize) -> Solved {
    let model = validate_model(params).unwrap();
    let grid = TimeGrid::for_model(&model, steps).unwrap();
    let fs = solve_beta(&model, &grid).unwrap();
    let coeffs = solve_hjb(&model, &fs).unwrap();
    Solved { model, fs, coeffs }
}

/// Copy of `params` without factor noise.
pub fn noiseless(params: &ModelParams) -> ModelParams {
    let mut p = params.clone();
    for row in p.lambda.iter_mut() {
        row.fill(0.0);
    }
    p
}

/// Random `(t, y)` samples on interior nodes, `y` within one unit of `y0`.
pub fn random_points(model: &MarketModel, grid: &TimeGrid, count: usize, seed: u64) -> Vec<(f64, DVector<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let k = rng.random_range(1..grid.steps());
            let y = DVector::from_fn(model.n, |i, _| model.y0[i] + rng.random_range(-1.0..1.0));
            (grid.t(k), y)
        })
        .collect()
}

/// Double-double number `hi + lo`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Dd {
    hi: f64,
    lo: f64,
}

impl Dd {
    pub fn new(x: f64) -> Self {
        Self { hi: x, lo: 0.0 }
    }

    fn two_sum(a: f64, b: f64) -> Self {
        let s = a + b;
        let bb = s - a;
        let e = (a - (s - bb)) + (b - bb);
        Self { hi: s, lo: e }
    }

    fn renorm(hi: f64, lo: f64) -> Self {
        let s = hi + lo;
        Self { hi: s, lo: lo - (s - hi) }
    }

    pub fn add(self, o: Self) -> Self {
        let s = Self::two_sum(self.hi, o.hi);
        Self::renorm(s.hi, s.lo + self.lo + o.lo)
    }

    pub fn neg(self) -> Self {
        Self { hi: -self.hi, lo: -self.lo }
    }

    pub fn mul(self, o: Self) -> Self {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        Self::renorm(p, e + self.hi * o.lo + self.lo * o.hi)
    }
}

/// `½ [x0 - (x_bar + g) d0]^2 e2xi - ½ g^2` evaluated in double-double, so
/// its argmax is resolved far below double-precision flatness.
pub fn relaxed_objective(g: f64, x0: f64, x_bar: f64, d0: f64, e2xi: f64) -> Dd {
    let gap = Dd::new(x0).add(Dd::new(x_bar).add(Dd::new(g)).mul(Dd::new(d0)).neg());
    let half = Dd::new(0.5);
    let gg = Dd::new(g);
    half.mul(gap).mul(gap).mul(Dd::new(e2xi)).add(half.mul(gg).mul(gg).neg())
}

/// Golden-section search for the maximizer of a unimodal function.
pub fn golden_argmax(f: impl Fn(f64) -> Dd, mut lo: f64, mut hi: f64) -> f64 {
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut a = hi - phi * (hi - lo);
    let mut b = lo + phi * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    for _ in 0..200 {
        if hi - lo <= 1e-13 * (1.0 + lo.abs().max(hi.abs())) {
            break;
        }
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

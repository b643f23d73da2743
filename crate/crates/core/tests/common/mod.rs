//! Oracles shared by several test targets.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use quadtank::rng::NormalRng;
use quadtank::solvers::qp::objective;

pub fn random_qp(rng: &mut NormalRng, n: usize) -> (DMatrix<f64>, DVector<f64>, DVector<f64>, DVector<f64>) {
    let m = DMatrix::from_fn(n, n, |_, _| rng.standard_normal());
    let h = &m * m.transpose() + DMatrix::identity(n, n) * 0.05;
    let g = DVector::from_fn(n, |_, _| 3.0 * rng.standard_normal());
    let mut lower = DVector::zeros(n);
    let mut upper = DVector::zeros(n);
    for i in 0..n {
        let c = rng.standard_normal();
        let w = 0.1 + 2.0 * rng.uniform();
        lower[i] = if rng.uniform() < 0.15 { f64::NEG_INFINITY } else { c - w };
        upper[i] = if rng.uniform() < 0.15 { f64::INFINITY } else { c + w };
    }
    (h, g, lower, upper)
}

/// Minimum over all 3ⁿ faces of the box: each coordinate is free, at its
/// lower bound or at its upper bound; free coordinates solve the reduced
/// stationarity system and the candidate is kept if it is feasible.
pub fn enumerate_box_qp(h: &DMatrix<f64>, g: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> (DVector<f64>, f64) {
    let n = g.len();
    let mut best = (DVector::zeros(n), f64::INFINITY);
    'face: for code in 0..3usize.pow(n as u32) {
        let mut x = DVector::zeros(n);
        let mut free = Vec::new();
        let mut c = code;
        for i in 0..n {
            match c % 3 {
                0 => free.push(i),
                1 if lo[i].is_finite() => x[i] = lo[i],
                2 if hi[i].is_finite() => x[i] = hi[i],
                _ => continue 'face,
            }
            c /= 3;
        }
        if !free.is_empty() {
            let k = free.len();
            let hff = DMatrix::from_fn(k, k, |a, b| h[(free[a], free[b])]);
            let rhs = DVector::from_fn(k, |a, _| -g[free[a]] - (0..n).filter(|j| !free.contains(j)).map(|j| h[(free[a], j)] * x[j]).sum::<f64>());
            let xf = hff.lu().solve(&rhs).expect("positive definite");
            for (a, &i) in free.iter().enumerate() {
                x[i] = xf[a];
            }
        }
        if (0..n).any(|i| x[i] < lo[i] - 1e-12 || x[i] > hi[i] + 1e-12) {
            continue;
        }
        let v = objective(h, g, &x);
        if v < best.1 {
            best = (x, v);
        }
    }
    best
}

//! Dense box-constrained convex QP: `min ½ x'Hx + g'x  s.t.  lb ≤ x ≤ ub`.
//!
//! Primal active-set method. The working set holds the coordinates fixed at a
//! bound; the Cholesky factor of the free block `H_FF` is updated by column
//! insertion/removal when the set changes, so each change costs O(n²).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bound {
    Free,
    Lower,
    Upper,
}

#[derive(Clone, Debug)]
pub struct BoxQp<'a> {
    pub h: &'a DMatrix<f64>,
    pub g: &'a DVector<f64>,
    pub lower: &'a DVector<f64>,
    pub upper: &'a DVector<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QpOptions {
    /// Stationarity and multiplier-sign tolerance, relative to `1 + ‖g‖∞`.
    pub tol: f64,
    /// Working-set changes allowed; `None` means `3n`.
    pub max_iter: Option<usize>,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self { tol: 1e-9, max_iter: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub active: Vec<Bound>,
    pub objective: f64,
    /// Largest violation of the KKT conditions at `x`.
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl QpSolution {
    /// Converged solutions pass through; otherwise the best iterate is
    /// reported as an error.
    pub fn into_result(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::MalformedQp(format!(
                "iteration cap reached after {} working-set changes (KKT residual {:.3e})",
                self.iterations, self.kkt_residual
            )))
        }
    }
}

pub fn objective(h: &DMatrix<f64>, g: &DVector<f64>, x: &DVector<f64>) -> f64 {
    0.5 * x.dot(&(h * x)) + g.dot(x)
}

/// KKT residual of `x` for the box QP: stationarity on free coordinates,
/// sign-violations of the bound multipliers on fixed ones, and bound violations.
pub fn kkt_residual(qp: &BoxQp, x: &DVector<f64>, active: &[Bound]) -> f64 {
    let grad = qp.h * x + qp.g;
    let mut r: f64 = 0.0;
    for i in 0..x.len() {
        r = r.max(qp.lower[i] - x[i]).max(x[i] - qp.upper[i]);
        r = r.max(match active[i] {
            Bound::Free => grad[i].abs(),
            Bound::Lower => (-grad[i]).max(0.0),
            Bound::Upper => grad[i].max(0.0),
        });
    }
    r
}

fn validate(qp: &BoxQp) -> Result<usize> {
    let n = qp.g.len();
    if qp.h.shape() != (n, n) || qp.lower.len() != n || qp.upper.len() != n {
        return Err(Error::MalformedQp(format!(
            "inconsistent dimensions: H {:?}, g {}, bounds {}/{}",
            qp.h.shape(),
            n,
            qp.lower.len(),
            qp.upper.len()
        )));
    }
    let all_finite = qp.h.iter().chain(qp.g.iter()).all(|v| v.is_finite())
        && qp.lower.iter().chain(qp.upper.iter()).all(|v| !v.is_nan());
    if !all_finite {
        return Err(Error::MalformedQp("non-finite data".into()));
    }
    if let Some(i) = (0..n).find(|&i| qp.lower[i] > qp.upper[i]) {
        return Err(Error::MalformedQp(format!("lower bound exceeds upper bound at {i}")));
    }
    let scale = 1.0 + qp.h.amax();
    for i in 0..n {
        for j in 0..i {
            if (qp.h[(i, j)] - qp.h[(j, i)]).abs() > 1e-10 * scale {
                return Err(Error::MalformedQp(format!("H is not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(n)
}

/// Factor of `H` restricted to an ordered list of free coordinates.
struct FreeFactor {
    free: Vec<usize>,
    chol: Option<Cholesky<f64, Dyn>>,
}

impl FreeFactor {
    fn build(h: &DMatrix<f64>, free: Vec<usize>, full: Option<&Cholesky<f64, Dyn>>) -> Result<Self> {
        let n = h.nrows();
        let fixed = n - free.len();
        if free.is_empty() {
            return Ok(Self { free, chol: None });
        }
        // Downdating a cached full factor pays off only when few coordinates are fixed.
        if let Some(full) = full.filter(|_| fixed * 4 <= n) {
            let mut chol = full.clone();
            for i in (0..n).rev() {
                if free.binary_search(&i).is_err() {
                    chol = chol.remove_column(i);
                }
            }
            return Ok(Self { free, chol: Some(chol) });
        }
        let sub = h.select_rows(&free).select_columns(&free);
        let chol = factor(sub)?;
        Ok(Self { free, chol: Some(chol) })
    }

    fn add(&mut self, h: &DMatrix<f64>, i: usize) -> Result<()> {
        let mut col = DVector::zeros(self.free.len() + 1);
        for (p, &f) in self.free.iter().enumerate() {
            col[p] = h[(f, i)];
        }
        col[self.free.len()] = h[(i, i)];
        self.free.push(i);
        let updated = match &self.chol {
            None => factor(DMatrix::from_element(1, 1, h[(i, i)]))?,
            Some(c) => {
                let c = c.insert_column(self.free.len() - 1, col);
                let last = self.free.len() - 1;
                let d = c.l_dirty()[(last, last)];
                if d.is_finite() && d > 0.0 {
                    c
                } else {
                    factor(h.select_rows(&self.free).select_columns(&self.free))?
                }
            }
        };
        self.chol = Some(updated);
        Ok(())
    }

    fn remove(&mut self, i: usize) {
        let p = self.free.iter().position(|&f| f == i).expect("coordinate is free");
        self.free.remove(p);
        self.chol = if self.free.is_empty() {
            None
        } else {
            self.chol.take().map(|c| c.remove_column(p))
        };
    }

    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        match &self.chol {
            Some(c) => c.solve(rhs),
            None => DVector::zeros(0),
        }
    }
}

/// Cholesky with the `1e-10·I` regularization fallback.
fn factor(m: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let n = m.nrows();
    let scale = 1.0f64.max(m.diagonal().amax());
    Cholesky::new(m + DMatrix::identity(n, n) * (1e-10 * scale))
        .ok_or_else(|| Error::MalformedQp("H is not positive definite".into()))
}

/// Solves the box QP. `warm` seeds the working set (for example the previous
/// sample's active set); `full_factor` may hold a cached factorization of the
/// whole `H` to speed up the first solve of the free block.
pub fn solve_box_qp(
    qp: &BoxQp,
    warm: Option<&[Bound]>,
    full_factor: Option<&Cholesky<f64, Dyn>>,
    opts: &QpOptions,
) -> Result<QpSolution> {
    let n = validate(qp)?;
    let max_iter = opts.max_iter.unwrap_or(3 * n).max(1);
    let tol = opts.tol * (1.0 + qp.g.amax() + qp.h.amax());

    let mut active: Vec<Bound> = match warm {
        Some(w) if w.len() == n => w
            .iter()
            .enumerate()
            .map(|(i, b)| match b {
                Bound::Lower if qp.lower[i].is_finite() => Bound::Lower,
                Bound::Upper if qp.upper[i].is_finite() => Bound::Upper,
                _ => Bound::Free,
            })
            .collect(),
        _ => vec![Bound::Free; n],
    };
    for i in 0..n {
        if qp.lower[i] == qp.upper[i] {
            active[i] = Bound::Lower;
        }
    }
    let mut x = DVector::from_fn(n, |i, _| match active[i] {
        Bound::Lower => qp.lower[i],
        Bound::Upper => qp.upper[i],
        Bound::Free => 0.0f64.clamp(qp.lower[i], qp.upper[i]),
    });
    let free: Vec<usize> = (0..n).filter(|&i| active[i] == Bound::Free).collect();
    let mut fac = FreeFactor::build(qp.h, free, full_factor)?;

    let mut iterations = 0;
    loop {
        let grad = qp.h * &x + qp.g;
        let grad_free = DVector::from_iterator(fac.free.len(), fac.free.iter().map(|&i| grad[i]));
        let step = -fac.solve(&grad_free);
        let step_norm = step.amax();

        if step_norm <= tol * (1.0 + x.amax()) {
            // Stationary on the working set: check multiplier signs.
            let mut worst: Option<(usize, f64)> = None;
            for i in 0..n {
                let lambda = match active[i] {
                    Bound::Free => continue,
                    Bound::Lower => grad[i],
                    Bound::Upper => -grad[i],
                };
                if qp.lower[i] == qp.upper[i] {
                    continue;
                }
                if lambda < -tol && worst.is_none_or(|(_, w)| lambda < w) {
                    worst = Some((i, lambda));
                }
            }
            match worst {
                None => {
                    return Ok(finish(qp, x, active, iterations, true));
                }
                Some((i, _)) => {
                    if iterations >= max_iter {
                        return Ok(finish(qp, x, active, iterations, false));
                    }
                    iterations += 1;
                    active[i] = Bound::Free;
                    fac.add(qp.h, i)?;
                }
            }
            continue;
        }

        // Longest feasible fraction of the step, and the bound that blocks it.
        let mut alpha = 1.0;
        let mut blocking: Option<(usize, Bound)> = None;
        for (p, &i) in fac.free.iter().enumerate() {
            let s = step[p];
            let (ratio, bound) = if s < 0.0 {
                ((qp.lower[i] - x[i]) / s, Bound::Lower)
            } else if s > 0.0 {
                ((qp.upper[i] - x[i]) / s, Bound::Upper)
            } else {
                continue;
            };
            let ratio = ratio.max(0.0);
            if ratio < alpha {
                alpha = ratio;
                blocking = Some((i, bound));
            }
        }
        for (p, &i) in fac.free.iter().enumerate() {
            x[i] = (x[i] + alpha * step[p]).clamp(qp.lower[i], qp.upper[i]);
        }
        if let Some((i, bound)) = blocking {
            if iterations >= max_iter {
                return Ok(finish(qp, x, active, iterations, false));
            }
            iterations += 1;
            x[i] = if bound == Bound::Lower { qp.lower[i] } else { qp.upper[i] };
            active[i] = bound;
            fac.remove(i);
        }
    }
}

fn finish(qp: &BoxQp, x: DVector<f64>, active: Vec<Bound>, iterations: usize, converged: bool) -> QpSolution {
    QpSolution {
        objective: objective(qp.h, qp.g, &x),
        kkt_residual: kkt_residual(qp, &x, &active),
        x,
        active,
        iterations,
        converged,
    }
}

//! Closed-loop performance measures.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simulator::TrajectoryLog;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean squared tracking error [cm²].
    pub nise: f64,
    /// Mean absolute tracking error [cm].
    pub niae: f64,
    /// Mean squared input increment [(cm³/s)²].
    pub nisdu: f64,
}

/// Tracking errors use the measured lower-tank levels:
/// `ē_k = z̄_k − [y1; y2]`, `NISE = Σ‖ē_k‖²/N`, `NIAE = Σ‖ē_k‖₁/N`,
/// `NISΔU = Σ_{k≥1} ‖u_k − u_{k−1}‖² / (M − 1)`.
pub fn compute_metrics(log: &TrajectoryLog) -> Result<Metrics> {
    let n = log.len();
    if n < 2 || log.u.len() != n || log.y.len() != n || log.zbar.len() != n {
        return Err(Error::InvalidInput(format!(
            "metrics need at least two aligned samples, got {n}"
        )));
    }
    let (mut se, mut ae) = (0.0, 0.0);
    for (y, zbar) in log.y.iter().zip(&log.zbar) {
        let e = [zbar[0] - y[0], zbar[1] - y[1]];
        se += e[0] * e[0] + e[1] * e[1];
        ae += e[0].abs() + e[1].abs();
    }
    let sdu: f64 = log
        .u
        .windows(2)
        .map(|w| (w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2))
        .sum();
    Ok(Metrics {
        nise: se / n as f64,
        niae: ae / n as f64,
        nisdu: sdu / (n - 1) as f64,
    })
}

/// Sample mean and standard deviation (n − 1 denominator; zero for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

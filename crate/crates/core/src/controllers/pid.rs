//! Discrete PID with a filtered derivative on the measurement and
//! back-calculation anti-windup, SIMC tuning, and the decentralized pairing.

use nalgebra::{Vector2, Vector4};
use serde::{Deserialize, Serialize};

use super::{Controller, SetpointPreview};
use crate::error::{Error, Result};
use crate::model::{cross_coupling_tfs, LinearModel, SecondOrderTf};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    pub kp: f64,
    pub tau_i: f64,
    pub tau_d: f64,
    pub n_filter: f64,
    /// Back-calculation (tracking) time constant.
    pub tau_t: f64,
    /// Input bias, normally the steady-state input.
    pub u_bar: f64,
    pub u_min: f64,
    pub u_max: f64,
}

impl PidGains {
    pub fn validate(&self) -> Result<()> {
        let ok = self.kp.is_finite()
            && self.tau_i > 0.0
            && self.tau_d >= 0.0
            && self.tau_t > 0.0
            && self.n_filter > 0.0
            && self.u_min <= self.u_max;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid PID gains {self:?}")))
        }
    }
}

/// SIMC rules for `k / ((τ1 s + 1)(τ2 s + 1))` with closed-loop time constant
/// `tc`, converted from cascade to parallel form. The bias is zero and the
/// bounds are open; callers set them for the loop at hand.
pub fn simc_tune(tf: &SecondOrderTf, tc: f64, n_filter: f64) -> Result<PidGains> {
    if tf.k == 0.0 || !tf.k.is_finite() {
        return Err(Error::InvalidParameter(format!("process gain must be nonzero, got {}", tf.k)));
    }
    if !(tc > 0.0) {
        return Err(Error::InvalidParameter(format!("closed-loop time constant must be positive, got {tc}")));
    }
    let kp_c = tf.tau1 / (tf.k * tc);
    let ti_c = tf.tau1.min(4.0 * tc);
    let td_c = tf.tau2;
    let alpha = 1.0 + td_c / ti_c;
    let tau_i = ti_c * alpha;
    Ok(PidGains {
        kp: kp_c * alpha,
        tau_i,
        tau_d: td_c / alpha,
        n_filter,
        tau_t: 0.5 * tau_i,
        u_bar: 0.0,
        u_min: f64::NEG_INFINITY,
        u_max: f64::INFINITY,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PidState {
    pub i: f64,
    pub d_prev: f64,
    /// `None` before the first sample, meaning "use the current measurement".
    pub y_prev: Option<f64>,
}

/// One PID sample; returns the clipped input and the next state.
pub fn pid_step(state: &PidState, gains: &PidGains, setpoint: f64, y: f64, ts: f64) -> (f64, PidState) {
    let e = setpoint - y;
    let y_prev = state.y_prev.unwrap_or(y);
    let p = gains.kp * e;
    let denom = gains.tau_d + gains.n_filter * ts;
    let d = gains.tau_d / denom * state.d_prev - gains.kp * gains.tau_d * gains.n_filter / denom * (y - y_prev);
    let v = gains.u_bar + p + state.i + d;
    let u = v.clamp(gains.u_min, gains.u_max);
    let i = state.i + ts * gains.kp / gains.tau_i * e + ts / gains.tau_t * (u - v);
    (
        u,
        PidState {
            i,
            d_prev: d,
            y_prev: Some(y),
        },
    )
}

/// Two SISO loops: `(y1, z̄1) → u2` and `(y2, z̄2) → u1`.
#[derive(Clone, Debug)]
pub struct DecentralizedPid {
    /// Loop driving `u2` from tank 1, then loop driving `u1` from tank 2.
    pub loops: [PidGains; 2],
    pub states: [PidState; 2],
    pub ts: f64,
}

impl DecentralizedPid {
    pub fn new(loops: [PidGains; 2], ts: f64) -> Result<Self> {
        for g in &loops {
            g.validate()?;
        }
        if !(ts > 0.0) {
            return Err(Error::InvalidParameter(format!("sample time must be positive, got {ts}")));
        }
        Ok(Self {
            loops,
            states: [PidState::default(); 2],
            ts,
        })
    }

    /// SIMC tuning on the cross-coupling transfer functions of `lm`, biased
    /// at its steady-state inputs.
    pub fn tuned(lm: &LinearModel, tc: f64, n_filter: f64, ts: f64, u_min: Vector2<f64>, u_max: Vector2<f64>) -> Result<Self> {
        let (g12, g21) = cross_coupling_tfs(lm)?;
        let mut loop_u2 = simc_tune(&g12, tc, n_filter)?;
        loop_u2.u_bar = lm.op.u_s[1];
        loop_u2.u_min = u_min[1];
        loop_u2.u_max = u_max[1];
        let mut loop_u1 = simc_tune(&g21, tc, n_filter)?;
        loop_u1.u_bar = lm.op.u_s[0];
        loop_u1.u_min = u_min[0];
        loop_u1.u_max = u_max[0];
        Self::new([loop_u2, loop_u1], ts)
    }

    pub fn control(&mut self, y: &Vector4<f64>, setpoint: &Vector2<f64>) -> Vector2<f64> {
        let (u2, s0) = pid_step(&self.states[0], &self.loops[0], setpoint[0], y[0], self.ts);
        let (u1, s1) = pid_step(&self.states[1], &self.loops[1], setpoint[1], y[1], self.ts);
        self.states = [s0, s1];
        Vector2::new(u1, u2)
    }
}

impl Controller for DecentralizedPid {
    fn name(&self) -> &'static str {
        "pid"
    }

    fn reset(&mut self) {
        self.states = [PidState::default(); 2];
    }

    fn step(&mut self, y: &Vector4<f64>, preview: &SetpointPreview, _t: f64) -> Vector2<f64> {
        self.control(y, &preview.current())
    }
}

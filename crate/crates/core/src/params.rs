//! Physical and stochastic parameters of the quadruple-tank process, with the
//! named presets and the TOML parameter-file format.
//!
//! Units follow the process: areas in cm², density in g/cm³, gravity in
//! cm/s², flows in cm³/s, masses in g and levels in cm.

use std::path::Path;

use nalgebra::{Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical parameters of the four tanks and the two flow-splitting valves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Outlet cross-sections [cm²].
    pub a: [f64; 4],
    /// Tank cross-sections [cm²].
    #[serde(rename = "A")]
    pub area: [f64; 4],
    /// Valve fractions routed to the lower tanks.
    pub gamma: [f64; 2],
    /// Density [g/cm³].
    pub rho: f64,
    /// Gravitational acceleration [cm/s²].
    pub g_a: f64,
}

impl ModelParams {
    /// Measured dimensions of the laboratory rig.
    pub fn nominal() -> Self {
        Self {
            a: [1.13; 4],
            area: [380.13; 4],
            gamma: [0.35, 0.35],
            rho: 1.0,
            g_a: 981.0,
        }
    }

    /// Maximum-likelihood estimates obtained from rig data.
    pub fn identified() -> Self {
        Self {
            a: [1.01, 1.25, 1.32, 1.55],
            area: [379.84, 378.03, 466.30, 523.12],
            gamma: [0.260, 0.353],
            rho: 1.0,
            g_a: 981.0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "nominal" => Ok(Self::nominal()),
            "identified" => Ok(Self::identified()),
            other => Err(Error::UnknownPreset(other.to_string())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{name} must be positive and finite, got {v}")))
            }
        };
        for i in 0..4 {
            positive(&format!("a{}", i + 1), self.a[i])?;
            positive(&format!("A{}", i + 1), self.area[i])?;
        }
        for (j, g) in self.gamma.iter().enumerate() {
            if !(g.is_finite() && *g > 0.0 && *g < 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "gamma{} must lie in (0, 1), got {g}",
                    j + 1
                )));
            }
        }
        positive("rho", self.rho)?;
        positive("g_a", self.g_a)
    }

    pub fn a_vec(&self) -> Vector4<f64> {
        Vector4::from(self.a)
    }

    pub fn area_vec(&self) -> Vector4<f64> {
        Vector4::from(self.area)
    }

    pub fn gamma_vec(&self) -> Vector2<f64> {
        Vector2::from(self.gamma)
    }
}

impl Default for ModelParams {
    fn default() -> Self {
        Self::nominal()
    }
}

/// Diffusion coefficients and measurement-noise variances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    /// State diffusion [g/√s].
    pub sigma: [f64; 4],
    /// Disturbance diffusion of the integrating disturbance model.
    pub sigma_d: [f64; 4],
    /// Measurement-noise variances [cm²].
    pub r2: [f64; 4],
}

impl NoiseParams {
    pub fn new(sigma: [f64; 4], sigma_d: [f64; 4], r2: [f64; 4]) -> Result<Self> {
        let n = Self { sigma, sigma_d, r2 };
        n.validate()?;
        Ok(n)
    }

    pub fn zero() -> Self {
        Self {
            sigma: [0.0; 4],
            sigma_d: [0.0; 4],
            r2: [0.0; 4],
        }
    }

    /// Unit diffusion on all eight augmented states and R = 0.02 I, used both
    /// to simulate the plant and to tune the filters in the simulation studies.
    pub fn simulation_default() -> Self {
        Self {
            sigma: [1.0; 4],
            sigma_d: [1.0; 4],
            r2: [0.02; 4],
        }
    }

    /// Diffusion and measurement-noise estimates for the disturbance-augmented
    /// filter (the rig's tuning; `r2` is in cm²).
    pub fn identified() -> Self {
        Self {
            sigma: [7.25, 14.92, 8.98, 14.50],
            sigma_d: [0.47, 3.08, 3.92, 3.42],
            r2: [1.44e-2, 1.34e-2, 1.00e-5, 1.00e-5],
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "zero" => Ok(Self::zero()),
            "simulation" => Ok(Self::simulation_default()),
            "identified" => Ok(Self::identified()),
            other => Err(Error::UnknownPreset(other.to_string())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.sigma.iter().chain(&self.sigma_d).chain(&self.r2);
        for v in all {
            if !(v.is_finite() && *v >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "noise parameters must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Diagonal of the augmented diffusion matrix `[sigma; sigma_d]`.
    pub fn sigma_augmented(&self) -> [f64; 8] {
        let mut s = [0.0; 8];
        s[..4].copy_from_slice(&self.sigma);
        s[4..].copy_from_slice(&self.sigma_d);
        s
    }
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self::simulation_default()
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialModelParams {
    a: Option<[f64; 4]>,
    #[serde(rename = "A")]
    area: Option<[f64; 4]>,
    gamma: Option<[f64; 2]>,
    rho: Option<f64>,
    g_a: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsFile {
    preset: Option<String>,
    params: Option<PartialModelParams>,
    noise: Option<NoiseParams>,
}

/// Parses a parameter file: an optional `preset` name, then `[params]`
/// entries overriding it key by key, and an optional `[noise]` table.
pub fn parse_params_toml(text: &str) -> Result<(ModelParams, Option<NoiseParams>)> {
    let file: ParamsFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let mut p = match file.preset.as_deref() {
        Some(name) => ModelParams::preset(name)?,
        None => ModelParams::nominal(),
    };
    if let Some(o) = file.params {
        if let Some(v) = o.a {
            p.a = v;
        }
        if let Some(v) = o.area {
            p.area = v;
        }
        if let Some(v) = o.gamma {
            p.gamma = v;
        }
        if let Some(v) = o.rho {
            p.rho = v;
        }
        if let Some(v) = o.g_a {
            p.g_a = v;
        }
    }
    p.validate()?;
    if let Some(n) = &file.noise {
        n.validate()?;
    }
    Ok((p, file.noise))
}

pub fn load_params_file(path: impl AsRef<Path>) -> Result<(ModelParams, Option<NoiseParams>)> {
    let text = std::fs::read_to_string(path)?;
    parse_params_toml(&text)
}

/// Writes a fully explicit parameter file that [`parse_params_toml`] reads back.
pub fn params_to_toml(p: &ModelParams, noise: Option<&NoiseParams>) -> Result<String> {
    #[derive(Serialize)]
    struct Out<'a> {
        params: &'a ModelParams,
        #[serde(skip_serializing_if = "Option::is_none")]
        noise: Option<&'a NoiseParams>,
    }
    toml::to_string(&Out { params: p, noise }).map_err(|e| Error::Config(e.to_string()))
}

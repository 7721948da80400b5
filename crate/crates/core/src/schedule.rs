//! Diffusion constants: β, α, ᾱ, the noise scale γ and reverse-step coefficients.
//!
//! Steps are 1-based throughout (`k ∈ [1, K]`), matching the chain
//! `A^K → … → A^0`.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

const LINEAR_BETA_START: f64 = 1e-4;
const LINEAR_BETA_END: f64 = 0.02;
const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

pub const DEFAULT_STEPS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::BadParameter(format!("unknown schedule kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    gamma: f64,
    /// Per-component multipliers on γ, `[u_x, u_y, u_z, ω_x, ω_y, ω_z]`.
    axis_scales: [f64; 6],
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(steps: usize, kind: ScheduleKind, gamma: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::BadParameter("schedule needs K >= 1".into()));
        }
        let beta = match kind {
            ScheduleKind::Linear => linear_betas(steps),
            ScheduleKind::Cosine => cosine_betas(steps),
        };
        Self::from_betas(kind, gamma, beta)
    }

    fn from_betas(kind: ScheduleKind, gamma: f64, beta: Vec<f64>) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::BadParameter(format!("gamma must be positive, got {gamma}")));
        }
        if beta.is_empty() || beta.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::BadParameter("every beta must lie in (0, 1)".into()));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            kind,
            gamma,
            axis_scales: [1.0; 6],
            beta,
            alpha,
            alpha_bar,
        })
    }

    /// Separate scales for the translational and rotational noise components.
    pub fn with_axis_scales(mut self, scales: [f64; 6]) -> Result<Self> {
        if scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::BadParameter("axis scales must be positive".into()));
        }
        self.axis_scales = scales;
        Ok(self)
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn axis_scales(&self) -> [f64; 6] {
        self.axis_scales
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k < 1 || k > self.steps() {
            return Err(Error::BadParameter(format!("step {k} outside [1, {}]", self.steps())));
        }
        Ok(())
    }

    pub fn alpha_bar(&self, k: usize) -> Result<f64> {
        self.check_step(k)?;
        Ok(self.alpha_bar[k - 1])
    }

    /// Per-component standard deviation `γ·s_j·sqrt(1 − ᾱ_k)` of the forward perturbation.
    pub fn noise_std(&self, k: usize) -> Result<[f64; 6]> {
        let sigma = self.gamma * (1.0 - self.alpha_bar(k)?).sqrt();
        Ok(self.axis_scales.map(|s| s * sigma))
    }

    /// Per-component standard deviation of the terminal distribution at the identity.
    pub fn prior_std(&self) -> [f64; 6] {
        self.axis_scales.map(|s| s * self.gamma)
    }

    /// Posterior-mean mixing weights `(λ0, λ1)` for the step `k → k − 1`.
    ///
    /// They satisfy `λ0 + λ1·sqrt(ᾱ_k) = sqrt(ᾱ_{k−1})`.
    pub fn reverse_coefficients(&self, k: usize) -> Result<(f64, f64)> {
        if k < 2 || k > self.steps() {
            return Err(Error::BadParameter(format!(
                "reverse step {k} outside [2, {}]",
                self.steps()
            )));
        }
        let ab = self.alpha_bar[k - 1];
        let ab_prev = self.alpha_bar[k - 2];
        let a = self.alpha[k - 1];
        let lambda0 = ab_prev.sqrt() * (1.0 - a) / (1.0 - ab);
        let lambda1 = a.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        Ok((lambda0, lambda1))
    }
}

fn linear_betas(steps: usize) -> Vec<f64> {
    if steps == 1 {
        return vec![LINEAR_BETA_START];
    }
    let span = LINEAR_BETA_END - LINEAR_BETA_START;
    (0..steps)
        .map(|i| LINEAR_BETA_START + span * i as f64 / (steps - 1) as f64)
        .collect()
}

fn cosine_betas(steps: usize) -> Vec<f64> {
    let f = |k: usize| {
        let x = (k as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * FRAC_PI_2;
        x.cos().powi(2)
    };
    (1..=steps)
        .map(|k| (1.0 - f(k) / f(k - 1)).clamp(f64::MIN_POSITIVE, MAX_BETA))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ScheduleRecord {
    #[serde(rename = "K")]
    steps: usize,
    kind: ScheduleKind,
    gamma: f64,
    #[serde(default = "unit_scales")]
    axis_scales: [f64; 6],
    beta: Vec<f64>,
}

fn unit_scales() -> [f64; 6] {
    [1.0; 6]
}

impl Serialize for NoiseSchedule {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        ScheduleRecord {
            steps: self.steps(),
            kind: self.kind,
            gamma: self.gamma,
            axis_scales: self.axis_scales,
            beta: self.beta.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for NoiseSchedule {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let rec = ScheduleRecord::deserialize(deserializer)?;
        if rec.beta.len() != rec.steps {
            return Err(D::Error::custom("schedule K does not match beta length"));
        }
        NoiseSchedule::from_betas(rec.kind, rec.gamma, rec.beta)
            .and_then(|s| s.with_axis_scales(rec.axis_scales))
            .map_err(D::Error::custom)
    }
}

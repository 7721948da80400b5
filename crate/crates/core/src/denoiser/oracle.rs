//! A denoiser that knows the clean chunk and returns the exact relative transforms.

use crate::diffusion::{ActionSequence, Observation};
use crate::error::{Error, Result};
use crate::se3::SE3Pose;

use super::Denoiser;

/// Supplies the ground-truth chunk `A^0` for an observation.
pub trait TargetProvider {
    fn target(&self, obs: &Observation) -> Result<ActionSequence>;
}

impl<P: TargetProvider + ?Sized> TargetProvider for &P {
    fn target(&self, obs: &Observation) -> Result<ActionSequence> {
        (**self).target(obs)
    }
}

/// Exact-match lookup table of observation → target.
#[derive(Clone, Debug, Default)]
pub struct FixedTargets {
    entries: Vec<(Observation, ActionSequence)>,
}

impl FixedTargets {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn single(obs: Observation, target: ActionSequence) -> Self {
        Self {
            entries: vec![(obs, target)],
        }
    }

    pub fn insert(&mut self, obs: Observation, target: ActionSequence) {
        self.entries.push((obs, target));
    }
}

impl TargetProvider for FixedTargets {
    fn target(&self, obs: &Observation) -> Result<ActionSequence> {
        self.entries
            .iter()
            .find(|(o, _)| o == obs)
            .map(|(_, a)| a.clone())
            .ok_or(Error::UnknownObservation)
    }
}

#[derive(Clone, Debug)]
pub struct OracleDenoiser<P> {
    provider: P,
    horizon: usize,
}

pub fn make_oracle<P: TargetProvider>(provider: P, horizon: usize) -> OracleDenoiser<P> {
    OracleDenoiser { provider, horizon }
}

impl<P: TargetProvider> OracleDenoiser<P> {
    fn relative(&self, obs: &Observation, noisy: &ActionSequence) -> Result<Vec<SE3Pose>> {
        let target = self.provider.target(obs)?;
        if target.horizon() != noisy.horizon() {
            return Err(Error::HorizonMismatch {
                expected: target.horizon(),
                got: noisy.horizon(),
            });
        }
        Ok(target
            .poses()
            .iter()
            .zip(noisy.poses())
            .map(|(h0, hk)| h0.compose(&hk.inverse()))
            .collect())
    }
}

impl<P: TargetProvider> Denoiser for OracleDenoiser<P> {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn eval_invariant(&self, obs: &Observation, noisy: &ActionSequence, _k: usize, _steps: usize) -> Result<Vec<SE3Pose>> {
        self.relative(obs, noisy)
    }

    fn eval_equivariant(&self, obs: &Observation, noisy: &ActionSequence) -> Result<Vec<SE3Pose>> {
        self.relative(obs, noisy)
    }
}

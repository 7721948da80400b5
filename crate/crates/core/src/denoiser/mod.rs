//! Denoising models: the learned frame regressor and the exact oracle.

mod checkpoint;
mod frame;
mod mlp;
mod oracle;
mod regressor;

pub use checkpoint::{Architecture, Checkpoint};
pub use frame::{
    compute_frame, frame_from_bundle, gram_schmidt, gram_schmidt_backward, CanonicalFrame, FeatureBundle,
    FeatureConfig, FrameSpec,
};
pub use mlp::{Adam, Dense, Mlp, MlpTrace};
pub use oracle::{make_oracle, FixedTargets, OracleDenoiser, TargetProvider};
pub use regressor::{fit, FitConfig, FitReport, FrameRegressor, ModelConfig, PreparedObservation, RegressorGrads};

use crate::diffusion::{ActionSequence, Observation};
use crate::error::Result;
use crate::se3::SE3Pose;

/// The two evaluation modes a diffusion policy needs.
///
/// `eval_invariant` must return the same relative transforms when the
/// observation is rigidly moved; `eval_equivariant` must left-multiply its
/// output by the same motion.
pub trait Denoiser {
    fn horizon(&self) -> usize;

    fn eval_invariant(&self, obs: &Observation, noisy: &ActionSequence, k: usize, steps: usize) -> Result<Vec<SE3Pose>>;

    fn eval_equivariant(&self, obs: &Observation, noisy: &ActionSequence) -> Result<Vec<SE3Pose>>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn horizon(&self) -> usize {
        (**self).horizon()
    }

    fn eval_invariant(&self, obs: &Observation, noisy: &ActionSequence, k: usize, steps: usize) -> Result<Vec<SE3Pose>> {
        (**self).eval_invariant(obs, noisy, k, steps)
    }

    fn eval_equivariant(&self, obs: &Observation, noisy: &ActionSequence) -> Result<Vec<SE3Pose>> {
        (**self).eval_equivariant(obs, noisy)
    }
}

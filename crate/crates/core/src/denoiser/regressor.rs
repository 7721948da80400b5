//! Frame regressor: a denoiser that is invariant or equivariant by construction.
//!
//! Both heads are per-pose MLPs over rigid-motion-invariant inputs: the pooled
//! radial descriptor of the cloud, the noisy pose itself (which never moves
//! with the observation), the pose index and, for the invariant head, the
//! noise level. Each emits nine numbers `(a, b, offset)`.
//!
//! * invariant head: the clean pose `D = (GS(a, b), offset)`, returned as the
//!   relative transform `D · (H^k)^{-1}`.
//! * equivariant head: `R = GS(F_R a, F_R b)`, `t = M + F_R offset`, where
//!   `(M, F_R)` is the canonical frame of the cloud.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::frame::{
    frame_from_bundle, gram_schmidt, gram_schmidt_backward, CanonicalFrame, FeatureBundle, FeatureConfig, FrameSpec,
};
use super::mlp::{Adam, Mlp};
use super::Denoiser;
use crate::diffusion::{sample_training_pair, sequence_loss, ActionSequence, DiffusionLoss, Observation, TrainingSample};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::se3::{skew, Mat3, SE3Pose, Vec3};

const POSE_FEATURES: usize = 12;
const STEP_FEATURES: usize = 3;
const HEAD_OUTPUTS: usize = 9;
const GRAD_CHECK_FLOOR: f64 = 1e-4;
const IDENTITY_BIAS: [f64; HEAD_OUTPUTS] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub horizon: usize,
    pub hidden: Vec<usize>,
    /// Multiplier on the initial output-layer weights.
    pub output_scale: f64,
    pub features: FeatureConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            horizon: 7,
            hidden: vec![64, 64],
            output_scale: 0.1,
            features: FeatureConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRegressor {
    horizon: usize,
    features: FeatureConfig,
    frame_spec: FrameSpec,
    invariant_head: Mlp,
    equivariant_head: Mlp,
}

/// Cloud quantities shared by every pose and step of one observation.
#[derive(Clone, Debug)]
pub struct PreparedObservation {
    cloud: Vec<f64>,
    frame: CanonicalFrame,
}

impl PreparedObservation {
    pub fn frame(&self) -> &CanonicalFrame {
        &self.frame
    }

    pub fn descriptor(&self) -> &[f64] {
        &self.cloud
    }
}

/// Parameter gradients, shaped like the two heads.
#[derive(Clone, Debug)]
pub struct RegressorGrads {
    pub invariant: Mlp,
    pub equivariant: Mlp,
}

impl RegressorGrads {
    fn add(&mut self, other: &RegressorGrads, scale: f64) {
        self.invariant.add_scaled(&other.invariant, scale);
        self.equivariant.add_scaled(&other.equivariant, scale);
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.invariant.params().chain(self.equivariant.params())
    }
}

fn head_sizes(input: usize, hidden: &[usize]) -> Vec<usize> {
    let mut sizes = vec![input];
    sizes.extend_from_slice(hidden);
    sizes.push(HEAD_OUTPUTS);
    sizes
}

impl FrameRegressor {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.features.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let cloud = cfg.features.cloud_feature_len();
        let inv = Mlp::new(
            &head_sizes(cloud + POSE_FEATURES + STEP_FEATURES + 1, &cfg.hidden),
            cfg.output_scale,
            &IDENTITY_BIAS,
            &mut rng,
        )?;
        let eqv = Mlp::new(
            &head_sizes(cloud + POSE_FEATURES + 1, &cfg.hidden),
            cfg.output_scale,
            &IDENTITY_BIAS,
            &mut rng,
        )?;
        Self::from_parts(cfg.horizon, cfg.features.clone(), FrameSpec::radial_profile(&cfg.features), inv, eqv)
    }

    pub fn from_parts(
        horizon: usize,
        features: FeatureConfig,
        frame_spec: FrameSpec,
        invariant_head: Mlp,
        equivariant_head: Mlp,
    ) -> Result<Self> {
        features.validate()?;
        frame_spec.validate(&features)?;
        let cloud = features.cloud_feature_len();
        let expect = [
            (&invariant_head, cloud + POSE_FEATURES + STEP_FEATURES + 1, "invariant"),
            (&equivariant_head, cloud + POSE_FEATURES + 1, "equivariant"),
        ];
        for (head, input, name) in expect {
            if head.input_len() != input || head.output_len() != HEAD_OUTPUTS {
                return Err(Error::BadParameter(format!(
                    "{name} head is {:?}, expected {input} inputs and {HEAD_OUTPUTS} outputs",
                    head.sizes()
                )));
            }
        }
        Ok(Self {
            horizon,
            features,
            frame_spec,
            invariant_head,
            equivariant_head,
        })
    }

    pub fn feature_config(&self) -> &FeatureConfig {
        &self.features
    }

    pub fn frame_spec(&self) -> &FrameSpec {
        &self.frame_spec
    }

    pub fn invariant_head(&self) -> &Mlp {
        &self.invariant_head
    }

    pub fn equivariant_head(&self) -> &Mlp {
        &self.equivariant_head
    }

    /// Mutable access to the head weights; shapes must be preserved.
    pub fn heads_mut(&mut self) -> (&mut Mlp, &mut Mlp) {
        (&mut self.invariant_head, &mut self.equivariant_head)
    }

    pub fn num_params(&self) -> usize {
        self.invariant_head.num_params() + self.equivariant_head.num_params()
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.invariant_head.params().chain(self.equivariant_head.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.invariant_head.params_mut().chain(self.equivariant_head.params_mut())
    }

    pub fn zero_grads(&self) -> RegressorGrads {
        RegressorGrads {
            invariant: self.invariant_head.zeros_like(),
            equivariant: self.equivariant_head.zeros_like(),
        }
    }

    pub fn prepare(&self, obs: &Observation) -> Result<PreparedObservation> {
        let bundle = FeatureBundle::from_observation(obs, &self.features);
        let frame = frame_from_bundle(&bundle, &self.frame_spec)?;
        Ok(PreparedObservation {
            cloud: bundle.pooled(&self.features),
            frame,
        })
    }

    fn index_feature(&self, i: usize) -> f64 {
        i as f64 / self.horizon.max(1) as f64
    }

    fn invariant_input(&self, prep: &PreparedObservation, pose: &SE3Pose, i: usize, k: usize, steps: usize) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.invariant_head.input_len());
        x.extend_from_slice(&prep.cloud);
        push_pose(&mut x, pose);
        let phase = k as f64 / steps as f64;
        x.extend_from_slice(&[phase, (std::f64::consts::PI * phase).cos(), (std::f64::consts::PI * phase).sin()]);
        x.push(self.index_feature(i));
        x
    }

    fn equivariant_input(&self, prep: &PreparedObservation, pose: &SE3Pose, i: usize) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.equivariant_head.input_len());
        x.extend_from_slice(&prep.cloud);
        push_pose(&mut x, pose);
        x.push(self.index_feature(i));
        x
    }

    fn check_horizon(&self, noisy: &ActionSequence) -> Result<()> {
        if noisy.horizon() != self.horizon {
            return Err(Error::HorizonMismatch {
                expected: self.horizon,
                got: noisy.horizon(),
            });
        }
        Ok(())
    }

    /// Predicted relative transforms for the chunk at noise level `k`.
    pub fn predict_prepared(
        &self,
        prep: &PreparedObservation,
        noisy: &ActionSequence,
        k: usize,
        steps: usize,
    ) -> Result<Vec<SE3Pose>> {
        self.check_horizon(noisy)?;
        noisy
            .poses()
            .iter()
            .enumerate()
            .map(|(i, pose)| {
                if k == 1 {
                    let out = self.equivariant_head.forward(&self.equivariant_input(prep, pose, i));
                    decode_equivariant(&out, &prep.frame).map(|d| d.pose)
                } else {
                    let out = self.invariant_head.forward(&self.invariant_input(prep, pose, i, k, steps));
                    decode_invariant(&out, pose).map(|d| d.pose)
                }
            })
            .collect()
    }

    pub fn sample_loss(
        &self,
        prep: &PreparedObservation,
        sample: &TrainingSample,
        steps: usize,
        rotation_weight: f64,
    ) -> Result<DiffusionLoss> {
        let pred = self.predict_prepared(prep, &sample.noisy, sample.k, steps)?;
        Ok(sequence_loss(&pred, &sample.target, rotation_weight))
    }

    /// Loss of one sample, adding its parameter gradient into `grads`.
    pub fn accumulate_gradient(
        &self,
        prep: &PreparedObservation,
        sample: &TrainingSample,
        steps: usize,
        rotation_weight: f64,
        grads: &mut RegressorGrads,
    ) -> Result<DiffusionLoss> {
        self.check_horizon(&sample.noisy)?;
        let mut rot = 0.0;
        let mut trans = 0.0;
        for (i, (pose, target)) in sample.noisy.poses().iter().zip(&sample.target).enumerate() {
            let equivariant = sample.k == 1;
            let (head, input) = if equivariant {
                (&self.equivariant_head, self.equivariant_input(prep, pose, i))
            } else {
                (&self.invariant_head, self.invariant_input(prep, pose, i, sample.k, steps))
            };
            let trace = head.trace(&input);
            let out = trace.output();
            let frame_rot = equivariant.then_some(prep.frame.axes);
            let decoded = match frame_rot {
                Some(_) => decode_equivariant(out, &prep.frame)?,
                None => decode_invariant(out, pose)?,
            };
            let (angle, d_rot) = angle_gradient(target.rotation(), decoded.pose.rotation());
            let diff = decoded.pose.translation() - target.translation();
            rot += angle;
            trans += diff.norm_squared();

            // pose = D · Q with D = (GS(a, b), t_D)
            let gt = diff * 2.0;
            let q = &decoded.right;
            let d_rot_base = d_rot * rotation_weight * q.rotation().transpose() + gt * q.translation().transpose();
            let base_rot = decoded.pose.rotation() * q.rotation().transpose();
            let (ga, gb) = gram_schmidt_backward(&decoded.a, &decoded.b, &base_rot, &d_rot_base);
            let (ga, gb, gt) = match frame_rot {
                Some(f) => (f.transpose() * ga, f.transpose() * gb, f.transpose() * gt),
                None => (ga, gb, gt),
            };
            let mut grad_out = [0.0; HEAD_OUTPUTS];
            grad_out[..3].copy_from_slice(ga.as_slice());
            grad_out[3..6].copy_from_slice(gb.as_slice());
            grad_out[6..].copy_from_slice(gt.as_slice());
            let target_grads = if equivariant { &mut grads.equivariant } else { &mut grads.invariant };
            head.backward(&trace, &grad_out, target_grads);
        }
        Ok(DiffusionLoss::new(rot, trans, rotation_weight))
    }

    /// Largest relative error between analytic and central-difference
    /// gradients over `count` randomly chosen parameters. Gradients smaller
    /// than 1e-4 are measured against that floor, since the central
    /// difference itself carries about 1e-10 of rounding noise.
    pub fn gradient_check<R: Rng + ?Sized>(
        &self,
        prep: &PreparedObservation,
        sample: &TrainingSample,
        steps: usize,
        rotation_weight: f64,
        count: usize,
        rng: &mut R,
    ) -> Result<f64> {
        let mut grads = self.zero_grads();
        self.accumulate_gradient(prep, sample, steps, rotation_weight, &mut grads)?;
        let analytic: Vec<f64> = grads.values().copied().collect();
        // only the head used at this k receives gradient
        let (lo, hi) = if sample.k == 1 {
            (self.invariant_head.num_params(), self.num_params())
        } else {
            (0, self.invariant_head.num_params())
        };
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for _ in 0..count {
            let idx = rng.random_range(lo..hi);
            let mut plus = self.clone();
            *plus.params_mut().nth(idx).unwrap() += h;
            let mut minus = self.clone();
            *minus.params_mut().nth(idx).unwrap() -= h;
            let fd = (plus.sample_loss(prep, sample, steps, rotation_weight)?.total
                - minus.sample_loss(prep, sample, steps, rotation_weight)?.total)
                / (2.0 * h);
            let err = (fd - analytic[idx]).abs() / fd.abs().max(analytic[idx].abs()).max(GRAD_CHECK_FLOOR);
            worst = worst.max(err);
        }
        Ok(worst)
    }
}

fn push_pose(x: &mut Vec<f64>, pose: &SE3Pose) {
    let r = pose.rotation();
    for i in 0..3 {
        for j in 0..3 {
            x.push(r[(i, j)]);
        }
    }
    x.extend_from_slice(pose.translation().as_slice());
}

struct Decoded {
    pose: SE3Pose,
    /// Gram–Schmidt inputs in world coordinates.
    a: Vec3,
    b: Vec3,
    /// Fixed right factor `Q` in `pose = D · Q`.
    right: SE3Pose,
}

fn split_output(out: &[f64]) -> (Vec3, Vec3, Vec3) {
    (
        Vec3::new(out[0], out[1], out[2]),
        Vec3::new(out[3], out[4], out[5]),
        Vec3::new(out[6], out[7], out[8]),
    )
}

/// The head predicts the clean pose `D`; the relative transform is `D · (H^k)^{-1}`.
fn decode_invariant(out: &[f64], noisy: &SE3Pose) -> Result<Decoded> {
    let (a, b, t) = split_output(out);
    let r = gram_schmidt(&a, &b)?;
    let right = noisy.inverse();
    Ok(Decoded {
        pose: SE3Pose::from_parts_unchecked(r, t).compose(&right),
        a,
        b,
        right,
    })
}

fn decode_equivariant(out: &[f64], frame: &CanonicalFrame) -> Result<Decoded> {
    let (a, b, offset) = split_output(out);
    let a = frame.axes * a;
    let b = frame.axes * b;
    let r = gram_schmidt(&a, &b)?;
    Ok(Decoded {
        pose: SE3Pose::from_parts_unchecked(r, frame.origin + frame.axes * offset),
        a,
        b,
        right: SE3Pose::identity(),
    })
}

/// Geodesic angle between `target` and `pred`, and its gradient with respect to `pred`.
fn angle_gradient(target: &Mat3, pred: &Mat3) -> (f64, Mat3) {
    let m = target.transpose() * pred;
    let c = 0.5 * (m.trace() - 1.0);
    let w = 0.5 * Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
    let s = w.norm();
    let angle = s.atan2(c);
    let denom = s * s + c * c;
    let ds = if s > 1e-12 { skew(&w) * (0.5 / s) } else { Mat3::zeros() };
    let dm = (ds * c - Mat3::identity() * (0.5 * s)) / denom;
    (angle, target * dm)
}

impl Denoiser for FrameRegressor {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn eval_invariant(&self, obs: &Observation, noisy: &ActionSequence, k: usize, steps: usize) -> Result<Vec<SE3Pose>> {
        if k < 2 {
            return Err(Error::BadParameter("invariant head is used for k > 1".into()));
        }
        self.predict_prepared(&self.prepare(obs)?, noisy, k, steps)
    }

    fn eval_equivariant(&self, obs: &Observation, noisy: &ActionSequence) -> Result<Vec<SE3Pose>> {
        self.predict_prepared(&self.prepare(obs)?, noisy, 1, 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Cosine annealing floor as a fraction of `learning_rate`; 1 keeps the rate constant.
    pub final_lr_fraction: f64,
    pub rotation_weight: f64,
    pub seed: u64,
    /// Size of the fixed (demo, k, ε) set used for the before/after loss.
    pub probe_samples: usize,
    /// Parameters checked against finite differences before the first update.
    pub gradient_checks: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            learning_rate: 2e-3,
            final_lr_fraction: 0.05,
            rotation_weight: 1.0,
            seed: 0,
            probe_samples: 256,
            gradient_checks: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean batch loss before each update.
    pub curve: Vec<f64>,
    pub gradient_check_error: Option<f64>,
}

fn probe_loss(
    model: &FrameRegressor,
    prepared: &[PreparedObservation],
    probes: &[(usize, TrainingSample)],
    steps: usize,
    rotation_weight: f64,
) -> Result<f64> {
    let losses = probes
        .par_iter()
        .map(|(d, s)| model.sample_loss(&prepared[*d], s, steps, rotation_weight).map(|l| l.total))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Minimizes the diffusion loss with Adam over freshly drawn `(demo, k, ε)` batches.
///
/// Batches are drawn sequentially from one seeded stream; per-sample gradients
/// are computed in parallel and summed in sample order, so the result does
/// not depend on the thread count.
pub fn fit(
    model: &mut FrameRegressor,
    dataset: &[(Observation, ActionSequence)],
    schedule: &NoiseSchedule,
    cfg: &FitConfig,
) -> Result<FitReport> {
    if dataset.is_empty() {
        return Err(Error::BadParameter("empty training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::BadParameter("batch size must be positive".into()));
    }
    for (_, a) in dataset {
        model.check_horizon(a)?;
    }
    let prepared = dataset
        .iter()
        .map(|(o, _)| model.prepare(o))
        .collect::<Result<Vec<_>>>()?;
    let steps = schedule.steps();
    let w = cfg.rotation_weight;

    let mut probe_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let probes = (0..cfg.probe_samples)
        .map(|_| {
            let d = probe_rng.random_range(0..dataset.len());
            sample_training_pair(&dataset[d].1, schedule, &mut probe_rng).map(|s| (d, s))
        })
        .collect::<Result<Vec<_>>>()?;
    let initial_loss = probe_loss(model, &prepared, &probes, steps, w)?;
    if !initial_loss.is_finite() {
        return Err(Error::NonFiniteLoss { batch: 0 });
    }

    let gradient_check_error = match probes.first() {
        Some((d, s)) if cfg.gradient_checks > 0 => {
            Some(model.gradient_check(&prepared[*d], s, steps, w, cfg.gradient_checks, &mut probe_rng)?)
        }
        _ => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate, model.num_params());
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = (0..cfg.batch_size)
            .map(|_| {
                let d = rng.random_range(0..dataset.len());
                sample_training_pair(&dataset[d].1, schedule, &mut rng).map(|s| (d, s))
            })
            .collect::<Result<Vec<_>>>()?;
        let snapshot: &FrameRegressor = model;
        let per_sample = batch
            .par_iter()
            .map(|(d, s)| {
                let mut g = snapshot.zero_grads();
                snapshot
                    .accumulate_gradient(&prepared[*d], s, steps, w, &mut g)
                    .map(|l| (l.total, g))
            })
            .collect::<Result<Vec<_>>>()?;
        let scale = 1.0 / cfg.batch_size as f64;
        let mut grads = model.zero_grads();
        let mut loss = 0.0;
        for (l, g) in &per_sample {
            loss += l * scale;
            grads.add(g, scale);
        }
        if !loss.is_finite() || grads.values().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { batch: step });
        }
        curve.push(loss);
        let progress = step as f64 / cfg.steps as f64;
        let floor = cfg.final_lr_fraction;
        adam.learning_rate =
            cfg.learning_rate * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        adam.update(model.params_mut(), grads.values());
    }

    let final_loss = probe_loss(model, &prepared, &probes, steps, w)?;
    if !final_loss.is_finite() {
        return Err(Error::NonFiniteLoss { batch: cfg.steps });
    }
    Ok(FitReport {
        initial_loss,
        final_loss,
        curve,
        gradient_check_error,
    })
}

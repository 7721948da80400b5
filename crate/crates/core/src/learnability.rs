//! Invariant vs equivariant targets under the same model class and budget.
//!
//! Every network here is a per-point MLP over rotation-invariant point
//! features. An invariant output mean-pools the per-point outputs; an
//! equivariant output uses them as weights on the centered points,
//! `V = mean_i r_i w_iᵀ`, which rotates with the cloud.
//!
//! The single-step fit regresses a constant matrix (invariant) or the cloud's
//! rotation (equivariant). The multi-step fit learns a short rotation chain
//! `y^k = Exp((k/K)·ω)` two ways: invariant steps on `y^k` followed by one
//! equivariant step to the cloud rotation, or equivariant steps throughout on
//! `R·y^k`. Both chains end at the cloud rotation.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Adam, FeatureBundle, FeatureConfig, Mlp, MlpTrace};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};
use crate::se3::{so3_exp, Mat3, Vec3};
use crate::tasks::{sample_new_pose, Split, TaskName, TaskSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnabilityConfig {
    pub task: TaskName,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub jitter: f64,
    pub train_clouds: usize,
    pub eval_clouds: usize,
    /// Chain length of the multi-step variant; 0 skips it.
    pub chain_steps: usize,
    /// Std of each component of the chain's starting rotation vector.
    pub chain_spread: f64,
    pub eval_every: usize,
}

impl Default for LearnabilityConfig {
    fn default() -> Self {
        Self {
            task: TaskName::ScrewCap,
            seeds: (0..5).collect(),
            steps: 600,
            batch_size: 8,
            learning_rate: 3e-3,
            hidden: vec![32, 32],
            jitter: 0.005,
            train_clouds: 128,
            eval_clouds: 32,
            chain_steps: 4,
            chain_spread: 0.6,
            eval_every: 50,
        }
    }
}

impl LearnabilityConfig {
    fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.steps == 0 || self.batch_size == 0 {
            return Err(Error::BadParameter("learnability needs seeds, steps and a batch".into()));
        }
        if self.train_clouds == 0 || self.eval_clouds == 0 || self.eval_every == 0 {
            return Err(Error::BadParameter("cloud counts and eval_every must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.jitter >= 0.0) || !(self.chain_spread >= 0.0) {
            return Err(Error::BadParameter("learning rate, jitter and spread must be non-negative".into()));
        }
        Ok(())
    }
}

/// A posed copy of the task cloud, reduced to what the networks see.
#[derive(Clone, Debug)]
pub struct Cloud {
    pub features: Vec<Vec<f64>>,
    /// Centered points divided by the RMS radius.
    pub rel: Vec<Vec3>,
    pub pooled: Vec<f64>,
    pub rotation: Mat3,
}

impl Cloud {
    pub fn sample(task: &TaskSpec, seed: u64, jitter: f64, features: &FeatureConfig) -> Result<Self> {
        let pose = sample_new_pose(&mut stream(seed, 0));
        let demo = task.demo_with_pose(Split::TestNp, seed, pose, jitter)?;
        let bundle = FeatureBundle::from_observation(&demo.observation, features);
        let rms = (bundle.radii.iter().map(|r| r * r).sum::<f64>() / bundle.len() as f64).sqrt();
        Ok(Self {
            pooled: bundle.pooled(features),
            rel: bundle.type1.iter().map(|v| v[0] / rms).collect(),
            features: bundle.type0,
            rotation: *pose.rotation(),
        })
    }
}

fn mat_to_vec(m: &Mat3) -> [f64; 9] {
    std::array::from_fn(|i| m[(i / 3, i % 3)])
}

fn frob2(m: &Mat3) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// Mean-pooled per-point outputs.
fn pooled_forward(net: &Mlp, inputs: &[Vec<f64>]) -> (Vec<MlpTrace>, Vec<f64>) {
    let n = inputs.len() as f64;
    let traces: Vec<MlpTrace> = inputs.iter().map(|x| net.trace(x)).collect();
    let mut out = vec![0.0; net.output_len()];
    for t in &traces {
        for (o, v) in out.iter_mut().zip(t.output()) {
            *o += v / n;
        }
    }
    (traces, out)
}

fn pooled_backward(net: &Mlp, traces: &[MlpTrace], grad: &[f64], grads: &mut Mlp) {
    let n = traces.len() as f64;
    let g: Vec<f64> = grad.iter().map(|v| v / n).collect();
    for t in traces {
        net.backward(t, &g, grads);
    }
}

/// `V = mean_i rel_i w_iᵀ` with `w_i` the three per-point outputs.
fn vector_forward(net: &Mlp, inputs: &[Vec<f64>], rel: &[Vec3]) -> (Vec<MlpTrace>, Mat3) {
    let n = rel.len() as f64;
    let traces: Vec<MlpTrace> = inputs.iter().map(|x| net.trace(x)).collect();
    let mut v = Mat3::zeros();
    for (t, r) in traces.iter().zip(rel) {
        let w = t.output();
        for a in 0..3 {
            v.column_mut(a).axpy(w[a] / n, r, 1.0);
        }
    }
    (traces, v)
}

fn vector_backward(net: &Mlp, traces: &[MlpTrace], rel: &[Vec3], grad: &Mat3, grads: &mut Mlp) {
    let n = rel.len() as f64;
    for (t, r) in traces.iter().zip(rel) {
        let gw = grad.transpose() * r / n;
        net.backward(t, gw.as_slice(), grads);
    }
}

fn point_net<R: Rng + ?Sized>(inputs: usize, hidden: &[usize], outputs: usize, rng: &mut R) -> Result<Mlp> {
    let mut sizes = vec![inputs];
    sizes.extend_from_slice(hidden);
    sizes.push(outputs);
    Mlp::new(&sizes, 1.0, &vec![0.0; outputs], rng)
}

/// Squared Frobenius error of the pooled 9-vector against a constant matrix, averaged over clouds.
pub fn invariant_loss(net: &Mlp, clouds: &[Cloud], target: &Mat3) -> f64 {
    let t = mat_to_vec(target);
    let total: f64 = clouds
        .iter()
        .map(|c| {
            let (_, out) = pooled_forward(net, &c.features);
            out.iter().zip(&t).map(|(o, t)| (o - t).powi(2)).sum::<f64>()
        })
        .sum();
    total / clouds.len() as f64
}

/// Squared Frobenius error of the equivariant output against each cloud's rotation.
pub fn equivariant_loss(net: &Mlp, clouds: &[Cloud]) -> f64 {
    let total: f64 = clouds
        .iter()
        .map(|c| frob2(&(vector_forward(net, &c.features, &c.rel).1 - c.rotation)))
        .sum();
    total / clouds.len() as f64
}

fn step(net: &mut Mlp, adam: &mut Adam, grads: &Mlp, scale: f64) {
    let mut g = grads.zeros_like();
    g.add_scaled(grads, scale);
    adam.update(net.params_mut(), g.params());
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingleStepSeed {
    pub seed: u64,
    pub invariant_initial: f64,
    pub invariant_final: f64,
    pub equivariant_initial: f64,
    pub equivariant_final: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiStepSeed {
    pub seed: u64,
    /// Training step after which each curve point was measured.
    pub steps: Vec<usize>,
    /// Final-step rollout loss of the invariant chain closed by one equivariant step.
    pub inv_eqv: Vec<f64>,
    /// Final-step rollout loss of the all-equivariant chain.
    pub pure_eqv: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnabilityReport {
    pub config: LearnabilityConfig,
    pub single_step: Vec<SingleStepSeed>,
    pub invariant_median: f64,
    pub equivariant_median: f64,
    /// Median invariant final loss strictly below the equivariant one.
    pub ordering_holds: bool,
    pub multi_step: Vec<MultiStepSeed>,
    pub inv_eqv_final_median: Option<f64>,
    pub pure_eqv_final_median: Option<f64>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn sample_clouds(task: &TaskSpec, seed: u64, tag: u64, count: usize, cfg: &LearnabilityConfig, fc: &FeatureConfig) -> Result<Vec<Cloud>> {
    (0..count)
        .map(|i| Cloud::sample(task, derive_seed(derive_seed(seed, tag), i as u64), cfg.jitter, fc))
        .collect()
}

pub fn single_step(cfg: &LearnabilityConfig, seed: u64) -> Result<SingleStepSeed> {
    cfg.validate()?;
    let fc = FeatureConfig::default();
    let task = TaskSpec::new(cfg.task, 1);
    let train = sample_clouds(&task, seed, 1, cfg.train_clouds, cfg, &fc)?;
    let eval = sample_clouds(&task, seed, 2, cfg.eval_clouds, cfg, &fc)?;
    let inputs = fc.point_feature_len();
    let mut init = stream(seed, 3);
    let mut inv = point_net(inputs, &cfg.hidden, 9, &mut init)?;
    let mut eqv = point_net(inputs, &cfg.hidden, 3, &mut init)?;
    let target = Mat3::identity();
    let t = mat_to_vec(&target);
    let (invariant_initial, equivariant_initial) = (invariant_loss(&inv, &eval, &target), equivariant_loss(&eqv, &eval));

    let mut inv_adam = Adam::new(cfg.learning_rate, inv.num_params());
    let mut eqv_adam = Adam::new(cfg.learning_rate, eqv.num_params());
    let mut batches = stream(seed, 4);
    for _ in 0..cfg.steps {
        let mut g_inv = inv.zeros_like();
        let mut g_eqv = eqv.zeros_like();
        for _ in 0..cfg.batch_size {
            let c = &train[batches.random_range(0..train.len())];
            let (traces, out) = pooled_forward(&inv, &c.features);
            let grad: Vec<f64> = out.iter().zip(&t).map(|(o, t)| 2.0 * (o - t)).collect();
            pooled_backward(&inv, &traces, &grad, &mut g_inv);
            let (traces, v) = vector_forward(&eqv, &c.features, &c.rel);
            vector_backward(&eqv, &traces, &c.rel, &(2.0 * (v - c.rotation)), &mut g_eqv);
        }
        let scale = 1.0 / cfg.batch_size as f64;
        step(&mut inv, &mut inv_adam, &g_inv, scale);
        step(&mut eqv, &mut eqv_adam, &g_eqv, scale);
    }
    let invariant_final = invariant_loss(&inv, &eval, &target);
    let equivariant_final = equivariant_loss(&eqv, &eval);
    if !invariant_final.is_finite() || !equivariant_final.is_finite() {
        return Err(Error::NonFiniteLoss { batch: cfg.steps });
    }
    Ok(SingleStepSeed {
        seed,
        invariant_initial,
        invariant_final,
        equivariant_initial,
        equivariant_final,
    })
}

struct ChainNets {
    /// `[pooled cloud, y^k, k/K] → y^{k−1}`.
    p1: Mlp,
    /// `[f_i, y^1] → weights`, equivariant output.
    p2: Mlp,
    /// `[f_i, x^kᵀ rel_i, k/K] → weights`, equivariant output.
    p3: Mlp,
}

fn p1_input(c: &Cloud, y: &Mat3, k: usize, kk: usize) -> Vec<f64> {
    let mut x = c.pooled.clone();
    x.extend_from_slice(&mat_to_vec(y));
    x.push(k as f64 / kk as f64);
    x
}

fn p2_inputs(c: &Cloud, y: &Mat3) -> Vec<Vec<f64>> {
    let y = mat_to_vec(y);
    c.features.iter().map(|f| f.iter().chain(&y).copied().collect()).collect()
}

fn p3_inputs(c: &Cloud, x: &Mat3, k: usize, kk: usize) -> Vec<Vec<f64>> {
    c.features
        .iter()
        .zip(&c.rel)
        .map(|(f, r)| {
            let proj = x.transpose() * r;
            let mut v = f.clone();
            v.extend_from_slice(proj.as_slice());
            v.push(k as f64 / kk as f64);
            v
        })
        .collect()
}

fn mat_from(v: &[f64]) -> Mat3 {
    Mat3::from_row_slice(v)
}

/// Final-step loss of both rollouts, averaged over the evaluation pairs.
fn rollout_losses(nets: &ChainNets, eval: &[(Cloud, Vec3)], kk: usize) -> (f64, f64) {
    let mut a = 0.0;
    let mut b = 0.0;
    for (c, omega) in eval {
        let start = so3_exp(omega);
        let mut y = start;
        for k in (2..=kk).rev() {
            y = mat_from(&nets.p1.forward(&p1_input(c, &y, k, kk)));
        }
        let x0 = vector_forward(&nets.p2, &p2_inputs(c, &y), &c.rel).1;
        a += frob2(&(x0 - c.rotation));
        let mut x = c.rotation * start;
        for k in (1..=kk).rev() {
            x = vector_forward(&nets.p3, &p3_inputs(c, &x, k, kk), &c.rel).1;
        }
        b += frob2(&(x - c.rotation));
    }
    let n = eval.len() as f64;
    (a / n, b / n)
}

pub fn multi_step(cfg: &LearnabilityConfig, seed: u64) -> Result<MultiStepSeed> {
    cfg.validate()?;
    let kk = cfg.chain_steps;
    if kk < 2 {
        return Err(Error::BadParameter(format!("multi-step chain needs at least 2 steps, got {kk}")));
    }
    let fc = FeatureConfig::default();
    let task = TaskSpec::new(cfg.task, 1);
    let spread = Normal::new(0.0, cfg.chain_spread).map_err(|e| Error::BadParameter(e.to_string()))?;
    let train = sample_clouds(&task, seed, 5, cfg.train_clouds, cfg, &fc)?;
    let eval: Vec<(Cloud, Vec3)> = {
        let mut rng = stream(seed, 6);
        sample_clouds(&task, seed, 7, cfg.eval_clouds, cfg, &fc)?
            .into_iter()
            .map(|c| (c, Vec3::from_fn(|_, _| spread.sample(&mut rng))))
            .collect()
    };
    let pf = fc.point_feature_len();
    let mut init = stream(seed, 8);
    let mut nets = ChainNets {
        p1: point_net(fc.cloud_feature_len() + 10, &cfg.hidden, 9, &mut init)?,
        p2: point_net(pf + 9, &cfg.hidden, 3, &mut init)?,
        p3: point_net(pf + 4, &cfg.hidden, 3, &mut init)?,
    };
    let mut adams = [&nets.p1, &nets.p2, &nets.p3].map(|n| Adam::new(cfg.learning_rate, n.num_params()));

    let mut rng = stream(seed, 9);
    let mut out = MultiStepSeed {
        seed,
        steps: Vec::new(),
        inv_eqv: Vec::new(),
        pure_eqv: Vec::new(),
    };
    for s in 1..=cfg.steps {
        let mut g = [nets.p1.zeros_like(), nets.p2.zeros_like(), nets.p3.zeros_like()];
        for _ in 0..cfg.batch_size {
            let c = &train[rng.random_range(0..train.len())];
            let omega = Vec3::from_fn(|_, _| spread.sample(&mut rng));
            let k = rng.random_range(1..=kk);
            let y = |j: usize| so3_exp(&(omega * (j as f64 / kk as f64)));
            let (yk, yprev) = (y(k), y(k - 1));
            if k >= 2 {
                let x = p1_input(c, &yk, k, kk);
                let trace = nets.p1.trace(&x);
                let target = mat_to_vec(&yprev);
                let grad: Vec<f64> = trace.output().iter().zip(&target).map(|(o, t)| 2.0 * (o - t)).collect();
                nets.p1.backward(&trace, &grad, &mut g[0]);
            } else {
                let (traces, v) = vector_forward(&nets.p2, &p2_inputs(c, &yk), &c.rel);
                vector_backward(&nets.p2, &traces, &c.rel, &(2.0 * (v - c.rotation)), &mut g[1]);
            }
            let (xk, xprev) = (c.rotation * yk, c.rotation * yprev);
            let (traces, v) = vector_forward(&nets.p3, &p3_inputs(c, &xk, k, kk), &c.rel);
            vector_backward(&nets.p3, &traces, &c.rel, &(2.0 * (v - xprev)), &mut g[2]);
        }
        let scale = 1.0 / cfg.batch_size as f64;
        step(&mut nets.p1, &mut adams[0], &g[0], scale);
        step(&mut nets.p2, &mut adams[1], &g[1], scale);
        step(&mut nets.p3, &mut adams[2], &g[2], scale);
        if s % cfg.eval_every == 0 || s == cfg.steps {
            let (a, b) = rollout_losses(&nets, &eval, kk);
            if !a.is_finite() || !b.is_finite() {
                return Err(Error::NonFiniteLoss { batch: s });
            }
            out.steps.push(s);
            out.inv_eqv.push(a);
            out.pure_eqv.push(b);
        }
    }
    Ok(out)
}

/// Runs every seed of both variants in parallel; results come back in seed order.
pub fn learnability_experiment(cfg: &LearnabilityConfig) -> Result<LearnabilityReport> {
    cfg.validate()?;
    let single_step = cfg.seeds.par_iter().map(|s| single_step(cfg, *s)).collect::<Result<Vec<_>>>()?;
    let multi_step = if cfg.chain_steps == 0 {
        Vec::new()
    } else {
        cfg.seeds.par_iter().map(|s| multi_step(cfg, *s)).collect::<Result<Vec<_>>>()?
    };
    let invariant_median = median(&single_step.iter().map(|s| s.invariant_final).collect::<Vec<_>>());
    let equivariant_median = median(&single_step.iter().map(|s| s.equivariant_final).collect::<Vec<_>>());
    let last = |f: fn(&MultiStepSeed) -> &Vec<f64>| {
        (!multi_step.is_empty()).then(|| median(&multi_step.iter().map(|m| *f(m).last().unwrap()).collect::<Vec<_>>()))
    };
    Ok(LearnabilityReport {
        config: cfg.clone(),
        invariant_median,
        equivariant_median,
        ordering_holds: invariant_median < equivariant_median,
        inv_eqv_final_median: last(|m| &m.inv_eqv),
        pure_eqv_final_median: last(|m| &m.pure_eqv),
        single_step,
        multi_step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::SE3Pose;

    fn small() -> LearnabilityConfig {
        LearnabilityConfig {
            seeds: vec![0, 1],
            steps: 60,
            train_clouds: 16,
            eval_clouds: 8,
            eval_every: 20,
            ..LearnabilityConfig::default()
        }
    }

    fn clouds(n: usize) -> Vec<Cloud> {
        let task = TaskSpec::new(TaskName::RotateTriangle, 1);
        (0..n).map(|i| Cloud::sample(&task, i as u64, 0.005, &FeatureConfig::default()).unwrap()).collect()
    }

    #[test]
    fn zero_model_on_zero_target() {
        let net = point_net(19, &[8], 9, &mut stream(0, 0)).unwrap().zeros_like();
        assert_eq!(invariant_loss(&net, &clouds(4), &Mat3::zeros()), 0.0);
        assert_eq!(invariant_loss(&net, &clouds(4), &Mat3::identity()), 3.0);
    }

    #[test]
    fn vector_output_rotates_with_the_cloud() {
        let net = point_net(19, &[8], 3, &mut stream(1, 0)).unwrap();
        let c = &clouds(1)[0];
        let r = *SE3Pose::rot_x(0.7).compose(&SE3Pose::rot_z(-1.1)).rotation();
        let moved: Vec<Vec3> = c.rel.iter().map(|p| r * p).collect();
        let v = vector_forward(&net, &c.features, &c.rel).1;
        let w = vector_forward(&net, &c.features, &moved).1;
        assert!((r * v - w).amax() < 1e-12);
        // pooled outputs ignore the rotation entirely
        assert_eq!(pooled_forward(&net, &c.features).1.len(), 3);
    }

    #[test]
    fn vector_gradient_matches_finite_differences() {
        let mut net = point_net(19, &[6], 3, &mut stream(2, 0)).unwrap();
        let cs = clouds(1);
        let c = &cs[0];
        let loss = |n: &Mlp| frob2(&(vector_forward(n, &c.features, &c.rel).1 - c.rotation));
        let (traces, v) = vector_forward(&net, &c.features, &c.rel);
        let mut g = net.zeros_like();
        vector_backward(&net, &traces, &c.rel, &(2.0 * (v - c.rotation)), &mut g);
        let analytic: Vec<f64> = g.params().copied().collect();
        for i in (0..analytic.len()).step_by(7) {
            let h = 1e-6;
            let orig = *net.params_mut().nth(i).unwrap();
            *net.params_mut().nth(i).unwrap() = orig + h;
            let up = loss(&net);
            *net.params_mut().nth(i).unwrap() = orig - h;
            let down = loss(&net);
            *net.params_mut().nth(i).unwrap() = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - analytic[i]).abs() <= 1e-6 * fd.abs().max(1.0), "{i}: {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn single_step_trains_and_is_deterministic() {
        let cfg = small();
        let a = single_step(&cfg, 3).unwrap();
        assert!(a.invariant_final < a.invariant_initial);
        assert!(a.equivariant_final < a.equivariant_initial);
        assert_eq!(a, single_step(&cfg, 3).unwrap());
    }

    #[test]
    fn multi_step_curves() {
        let cfg = small();
        let m = multi_step(&cfg, 0).unwrap();
        assert_eq!(m.steps, vec![20, 40, 60]);
        assert_eq!(m.inv_eqv.len(), 3);
        assert!(m.pure_eqv.iter().all(|v| v.is_finite()));
        let bad = LearnabilityConfig { chain_steps: 1, ..cfg };
        assert!(multi_step(&bad, 0).is_err());
    }

    #[test]
    fn report_medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        let cfg = LearnabilityConfig { chain_steps: 0, ..small() };
        let r = learnability_experiment(&cfg).unwrap();
        assert_eq!(r.single_step.len(), 2);
        assert!(r.multi_step.is_empty() && r.inv_eqv_final_median.is_none());
        assert_eq!(r.ordering_holds, r.invariant_median < r.equivariant_median);
    }
}

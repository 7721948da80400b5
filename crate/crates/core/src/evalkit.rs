//! Rollout evaluation: success rate and mean geodesic error over seeded episodes.
//!
//! Episode `e` of seed `s` fixes the point jitter and the inference stream
//! independently of the split; only the object pose depends on the split.
//! Evaluating the same model on `test_T` and `test_NP` therefore pairs every
//! episode with a rigidly moved copy of itself.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::diffusion::{infer, infer_traced, ActionSequence};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};
use crate::schedule::NoiseSchedule;
use crate::tasks::{sample_new_pose, Demo, Split, TaskName, TaskSpec};

const INFER_STREAM: u64 = 3;
const MOTION_STREAM: u64 = 4;

pub const EQUIVARIANCE_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub success_threshold: f64,
    pub jitter: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 20,
            seeds: (0..5).collect(),
            success_threshold: 0.1,
            jitter: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub success_rate: f64,
    pub mean_geodesic: f64,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskName,
    pub split: Split,
    pub success_rate: f64,
    /// Population standard deviation of the per-seed success rates.
    pub success_std: f64,
    /// Mean over all finished episodes of the per-step geodesic error.
    pub mean_geodesic: f64,
    pub geodesic_std: f64,
    pub per_seed: Vec<SeedResult>,
    pub num_episodes: usize,
    /// Episodes whose inference raised an error; they count as unsuccessful.
    pub failures: usize,
    pub success_threshold: f64,
}

/// One rollout: the held-out demo and the policy's chunk.
#[derive(Debug)]
pub struct Episode {
    pub demo: Demo,
    pub output: Result<ActionSequence>,
}

impl Episode {
    /// Mean per-step geodesic error, `+∞` when inference failed.
    pub fn geodesic(&self) -> f64 {
        match &self.output {
            Ok(a) => a.mean_geodesic_to(&self.demo.actions),
            Err(_) => f64::INFINITY,
        }
    }
}

pub fn episode_seed(seed: u64, episode: usize) -> u64 {
    derive_seed(seed, episode as u64)
}

pub fn run_episode<M: Denoiser + ?Sized>(
    model: &M,
    task: &TaskSpec,
    split: Split,
    schedule: &NoiseSchedule,
    seed: u64,
    episode: usize,
    jitter: f64,
) -> Result<Episode> {
    let base = episode_seed(seed, episode);
    let pose_split = if split.is_new_pose() { Split::TestNp } else { Split::TestT };
    let pose = task.sample_pose(pose_split, derive_seed(base, pose_split as u64 + 1));
    let demo = task.demo_with_pose(split, base, pose, jitter)?;
    let mut rng = stream(base, INFER_STREAM);
    let output = infer(model, &demo.observation, schedule, task.horizon(), &mut rng);
    Ok(Episode { demo, output })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn evaluate<M: Denoiser + Sync + ?Sized>(
    model: &M,
    task: &TaskSpec,
    split: Split,
    schedule: &NoiseSchedule,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if cfg.episodes == 0 || cfg.seeds.is_empty() {
        return Err(Error::BadParameter("evaluation needs at least one episode and one seed".into()));
    }
    if !(cfg.success_threshold >= 0.0) {
        return Err(Error::BadParameter("success threshold must be non-negative".into()));
    }
    let jobs: Vec<(u64, usize)> = cfg
        .seeds
        .iter()
        .flat_map(|s| (0..cfg.episodes).map(move |e| (*s, e)))
        .collect();
    let geos = jobs
        .par_iter()
        .map(|(s, e)| run_episode(model, task, split, schedule, *s, *e, cfg.jitter).map(|ep| ep.geodesic()))
        .collect::<Result<Vec<f64>>>()?;

    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    for (i, seed) in cfg.seeds.iter().enumerate() {
        let chunk = &geos[i * cfg.episodes..(i + 1) * cfg.episodes];
        let finite: Vec<f64> = chunk.iter().copied().filter(|g| g.is_finite()).collect();
        let successes = chunk.iter().filter(|g| **g < cfg.success_threshold).count();
        per_seed.push(SeedResult {
            seed: *seed,
            success_rate: successes as f64 / cfg.episodes as f64,
            mean_geodesic: mean_std(&finite).0,
            failures: chunk.len() - finite.len(),
        });
    }
    let finite: Vec<f64> = geos.iter().copied().filter(|g| g.is_finite()).collect();
    let successes = geos.iter().filter(|g| **g < cfg.success_threshold).count();
    let seed_success: Vec<f64> = per_seed.iter().map(|s| s.success_rate).collect();
    let seed_geo: Vec<f64> = per_seed.iter().map(|s| s.mean_geodesic).filter(|g| g.is_finite()).collect();
    Ok(EvalReport {
        task: task.name(),
        split,
        success_rate: successes as f64 / geos.len() as f64,
        success_std: mean_std(&seed_success).1,
        mean_geodesic: mean_std(&finite).0,
        geodesic_std: mean_std(&seed_geo).1,
        per_seed,
        num_episodes: geos.len(),
        failures: geos.len() - finite.len(),
        success_threshold: cfg.success_threshold,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedDelta {
    pub seed: u64,
    pub success_delta: f64,
    pub geodesic_delta: f64,
}

/// `a − b` for the headline numbers and for every seed present in both reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportDelta {
    pub task: TaskName,
    pub split_a: Split,
    pub split_b: Split,
    pub success_delta: f64,
    pub geodesic_delta: f64,
    pub per_seed: Vec<SeedDelta>,
}

pub fn compare_reports(a: &EvalReport, b: &EvalReport) -> Result<ReportDelta> {
    if a.task != b.task {
        return Err(Error::TaskMismatch(a.task.to_string(), b.task.to_string()));
    }
    let per_seed = a
        .per_seed
        .iter()
        .filter_map(|sa| {
            b.per_seed.iter().find(|sb| sb.seed == sa.seed).map(|sb| SeedDelta {
                seed: sa.seed,
                success_delta: sa.success_rate - sb.success_rate,
                geodesic_delta: sa.mean_geodesic - sb.mean_geodesic,
            })
        })
        .collect();
    Ok(ReportDelta {
        task: a.task,
        split_a: a.split,
        split_b: b.split,
        success_delta: a.success_rate - b.success_rate,
        geodesic_delta: a.mean_geodesic - b.mean_geodesic,
        per_seed,
    })
}

pub const CSV_HEADER: &str = "task,split,demos,success_mean,success_std,geo_mean,geo_std";

impl EvalReport {
    /// One CSV row matching [`CSV_HEADER`]; `demos` is the training-set size behind the model.
    pub fn csv_row(&self, demos: usize) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.task, self.split, demos, self.success_rate, self.success_std, self.mean_geodesic, self.geodesic_std
        )
    }
}

/// Worst pose-wise disagreement between `T·infer(O)` and `infer(T·O)` over random `(O, T)` trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceReport {
    pub task: TaskName,
    pub trials: usize,
    pub max_deviation: f64,
    /// Worst disagreement of the last invariant chunk `A^1`. Zero up to rounding for
    /// models whose invariant mode ignores the object pose; the oracle's does not.
    pub max_chain_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Both runs of a trial consume the same inference stream.
pub fn equivariance_sweep<M: Denoiser + Sync + ?Sized>(
    model: &M,
    task: &TaskSpec,
    schedule: &NoiseSchedule,
    trials: usize,
    seed: u64,
    jitter: f64,
) -> Result<EquivarianceReport> {
    if trials == 0 {
        return Err(Error::BadParameter("equivariance sweep needs at least one trial".into()));
    }
    let devs = (0..trials)
        .into_par_iter()
        .map(|t| {
            let base = episode_seed(seed, t);
            let demo = task.generate_demo(Split::TestT, base, jitter)?;
            let motion = sample_new_pose(&mut stream(base, MOTION_STREAM));
            let moved = demo.observation.transformed(&motion);
            let a = infer_traced(model, &demo.observation, schedule, task.horizon(), &mut stream(base, INFER_STREAM))?;
            let b = infer_traced(model, &moved, schedule, task.horizon(), &mut stream(base, INFER_STREAM))?;
            let dev = a.output().transformed(&motion).max_geodesic_to(b.output());
            let chain = match (a.at(1), b.at(1)) {
                (Some(x), Some(y)) if schedule.steps() >= 2 => x.max_geodesic_to(y),
                _ => 0.0,
            };
            Ok((dev, chain))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let max_deviation = devs.iter().map(|d| d.0).fold(0.0, f64::max);
    let max_chain_deviation = devs.iter().map(|d| d.1).fold(0.0, f64::max);
    Ok(EquivarianceReport {
        task: task.name(),
        trials,
        max_deviation,
        max_chain_deviation,
        tolerance: EQUIVARIANCE_TOLERANCE,
        pass: max_deviation < EQUIVARIANCE_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{make_oracle, FrameRegressor, ModelConfig};
    use crate::schedule::ScheduleKind;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::build(10, ScheduleKind::Linear, 1.0).unwrap()
    }

    fn small_cfg() -> EvalConfig {
        EvalConfig {
            episodes: 4,
            seeds: vec![0, 1],
            ..EvalConfig::default()
        }
    }

    #[test]
    fn oracle_is_perfect() {
        for name in TaskName::ALL {
            let task = TaskSpec::new(name, 7);
            let oracle = make_oracle(task.target_provider(), 7);
            for split in [Split::TestT, Split::TestNp] {
                let r = evaluate(&oracle, &task, split, &schedule(), &small_cfg()).unwrap();
                assert_eq!(r.success_rate, 1.0);
                assert!(r.mean_geodesic < 1e-9);
                assert_eq!(r.num_episodes, 8);
            }
        }
    }

    #[test]
    fn zero_threshold_never_succeeds() {
        let task = TaskSpec::new(TaskName::ScrewCap, 7);
        let model = FrameRegressor::new(&ModelConfig::default()).unwrap();
        let cfg = EvalConfig {
            success_threshold: 0.0,
            ..small_cfg()
        };
        let r = evaluate(&model, &task, Split::TestT, &schedule(), &cfg).unwrap();
        assert_eq!(r.success_rate, 0.0);
    }

    #[test]
    fn paired_splits_match_for_an_untrained_regressor() {
        let task = TaskSpec::new(TaskName::RotateTriangle, 7);
        let model = FrameRegressor::new(&ModelConfig::default()).unwrap();
        let cfg = EvalConfig {
            jitter: 0.005,
            ..small_cfg()
        };
        let t = evaluate(&model, &task, Split::TestT, &schedule(), &cfg).unwrap();
        let np = evaluate(&model, &task, Split::TestNp, &schedule(), &cfg).unwrap();
        assert!((t.mean_geodesic - np.mean_geodesic).abs() < 1e-8);
        assert_eq!(t.success_rate, np.success_rate);
    }

    #[test]
    fn deltas() {
        let task = TaskSpec::new(TaskName::ScrewCap, 7);
        let oracle = make_oracle(task.target_provider(), 7);
        let untrained = FrameRegressor::new(&ModelConfig::default()).unwrap();
        let a = evaluate(&oracle, &task, Split::TestNp, &schedule(), &small_cfg()).unwrap();
        let b = evaluate(&untrained, &task, Split::TestNp, &schedule(), &small_cfg()).unwrap();
        let same = compare_reports(&a, &a).unwrap();
        assert_eq!(same.success_delta, 0.0);
        assert_eq!(same.geodesic_delta, 0.0);
        assert!(same.per_seed.iter().all(|d| d.success_delta == 0.0 && d.geodesic_delta == 0.0));
        assert!(compare_reports(&a, &b).unwrap().success_delta > 0.0);

        let other = TaskSpec::new(TaskName::RotateTriangle, 7);
        let c = evaluate(&make_oracle(other.target_provider(), 7), &other, Split::TestT, &schedule(), &small_cfg()).unwrap();
        assert!(matches!(compare_reports(&a, &c), Err(Error::TaskMismatch(..))));
    }

    #[test]
    fn reports_are_deterministic() {
        let task = TaskSpec::new(TaskName::CalligraphyStroke, 7);
        let model = FrameRegressor::new(&ModelConfig::default()).unwrap();
        let a = evaluate(&model, &task, Split::TestNp, &schedule(), &small_cfg()).unwrap();
        let b = evaluate(&model, &task, Split::TestNp, &schedule(), &small_cfg()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.csv_row(25).starts_with("calligraphy_stroke,test_NP,25,"));
    }

    #[test]
    fn sweep_passes_for_oracle_and_regressor() {
        let task = TaskSpec::new(TaskName::ScrewCap, 7);
        let oracle = make_oracle(task.target_provider(), 7);
        let r = equivariance_sweep(&oracle, &task, &schedule(), 5, 0, 0.005).unwrap();
        assert!(r.pass, "{r:?}");
        let model = FrameRegressor::new(&ModelConfig::default()).unwrap();
        let r = equivariance_sweep(&model, &task, &schedule(), 5, 0, 0.005).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.max_chain_deviation < 1e-9);
        assert!(equivariance_sweep(&model, &task, &schedule(), 0, 0, 0.0).is_err());
    }
}

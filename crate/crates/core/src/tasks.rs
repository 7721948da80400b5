//! Synthetic manipulation tasks whose demonstrations are attached to the object frame.
//!
//! Every task is a colored canonical cloud plus a canonical end-effector
//! trajectory. A demonstration applies one rigid pose `P` to both, so the
//! actions are exactly `P · τ_i`.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::{frame_from_bundle, FeatureBundle, FeatureConfig, FrameSpec, TargetProvider};
use crate::diffusion::{ActionSequence, Observation};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};
use crate::se3::{exp_map, Mat3, SE3Pose, Twist, Vec3};

pub const DEFAULT_HORIZON: usize = 7;
/// Half-width of the yaw band used for the training-distribution poses.
pub const BAND_YAW: f64 = 15.0 * std::f64::consts::PI / 180.0;
pub const BAND_TRANSLATION: f64 = 0.1;
pub const NEW_POSE_TRANSLATION: f64 = 0.5;

const RED: [f64; 3] = [0.9, 0.1, 0.1];
const GREEN: [f64; 3] = [0.1, 0.8, 0.2];
const GRAY: [f64; 3] = [0.5, 0.5, 0.5];

const POSE_STREAM: u64 = 1;
const JITTER_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskName {
    RotateTriangle,
    ScrewCap,
    CalligraphyStroke,
}

impl TaskName {
    pub const ALL: [TaskName; 3] = [TaskName::RotateTriangle, TaskName::ScrewCap, TaskName::CalligraphyStroke];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskName::RotateTriangle => "rotate_triangle",
            TaskName::ScrewCap => "screw_cap",
            TaskName::CalligraphyStroke => "calligraphy_stroke",
        }
    }
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TaskName::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::BadParameter(format!("unknown task {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train_T")]
    TrainT,
    #[serde(rename = "test_T")]
    TestT,
    #[serde(rename = "test_NP")]
    TestNp,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::TrainT => "train_T",
            Split::TestT => "test_T",
            Split::TestNp => "test_NP",
        }
    }

    fn tag(&self) -> u64 {
        match self {
            Split::TrainT => 11,
            Split::TestT => 12,
            Split::TestNp => 13,
        }
    }

    pub fn is_new_pose(&self) -> bool {
        matches!(self, Split::TestNp)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    /// Accepts the record names plus the short evaluation names `T` and `NP`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train_T" => Ok(Split::TrainT),
            "test_T" | "T" => Ok(Split::TestT),
            "test_NP" | "NP" => Ok(Split::TestNp),
            other => Err(Error::BadParameter(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TaskSpec {
    name: TaskName,
    points: Vec<Vec3>,
    colors: Vec<Vec3>,
    trajectory: Vec<SE3Pose>,
}

impl TaskSpec {
    pub fn new(name: TaskName, horizon: usize) -> Self {
        let (points, colors) = match name {
            TaskName::RotateTriangle => triangle_cloud(),
            TaskName::ScrewCap => cap_cloud(),
            TaskName::CalligraphyStroke => sheet_cloud(),
        };
        let progress: Vec<f64> = (0..=horizon).map(|j| j as f64 / horizon.max(1) as f64).collect();
        let trajectory = match name {
            TaskName::RotateTriangle => progress.iter().map(|s| triangle_pose(*s)).collect(),
            TaskName::ScrewCap => (0..=horizon).map(cap_pose).collect(),
            TaskName::CalligraphyStroke => progress.iter().map(|s| stroke_pose(*s)).collect(),
        };
        Self {
            name,
            points,
            colors,
            trajectory,
        }
    }

    pub fn name(&self) -> TaskName {
        self.name
    }

    pub fn horizon(&self) -> usize {
        self.trajectory.len() - 1
    }

    pub fn canonical_points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn canonical_trajectory(&self) -> &[SE3Pose] {
        &self.trajectory
    }

    pub fn canonical_observation(&self) -> Observation {
        Observation::new(self.points.clone(), self.colors.clone()).expect("canonical clouds are valid")
    }

    pub fn canonical_actions(&self) -> ActionSequence {
        ActionSequence::new(self.trajectory.clone()).expect("trajectory is non-empty")
    }

    /// Draws the object pose for `split` from `seed`'s pose stream.
    pub fn sample_pose(&self, split: Split, seed: u64) -> SE3Pose {
        let mut rng = stream(seed, POSE_STREAM);
        if split.is_new_pose() {
            sample_new_pose(&mut rng)
        } else {
            sample_band_pose(&mut rng)
        }
    }

    /// A demonstration under a given object pose. Jitter `σ` is added to the
    /// canonical points before the pose is applied, drawn from `seed`'s jitter stream.
    pub fn demo_with_pose(&self, split: Split, seed: u64, pose: SE3Pose, jitter: f64) -> Result<Demo> {
        if !(jitter >= 0.0 && jitter.is_finite()) {
            return Err(Error::BadParameter(format!("jitter must be non-negative, got {jitter}")));
        }
        let points: Vec<Vec3> = if jitter > 0.0 {
            let mut rng = stream(seed, JITTER_STREAM);
            let normal = Normal::new(0.0, jitter).map_err(|e| Error::BadParameter(e.to_string()))?;
            self.points
                .iter()
                .map(|p| {
                    let eta = Vec3::new(rng.sample(normal), rng.sample(normal), rng.sample(normal));
                    pose.transform_point(&(p + eta))
                })
                .collect()
        } else {
            self.points.iter().map(|p| pose.transform_point(p)).collect()
        };
        Ok(Demo {
            task: self.name,
            split,
            seed,
            pose,
            observation: Observation::new(points, self.colors.clone())?,
            actions: self.canonical_actions().transformed(&pose),
        })
    }

    pub fn generate_demo(&self, split: Split, seed: u64, jitter: f64) -> Result<Demo> {
        self.demo_with_pose(split, seed, self.sample_pose(split, seed), jitter)
    }

    /// Oracle target source that recovers the object pose from the cloud's canonical frame.
    pub fn target_provider(&self) -> TaskTargets {
        let features = FeatureConfig::default();
        let spec = FrameSpec::radial_profile(&features);
        let canonical = frame_from_bundle(&FeatureBundle::from_observation(&self.canonical_observation(), &features), &spec)
            .expect("canonical clouds have a well-defined frame")
            .as_pose();
        TaskTargets {
            features,
            spec,
            canonical_inverse: canonical.inverse(),
            trajectory: self.canonical_actions(),
        }
    }
}

/// Maps an observation to `P̂ · τ` with `P̂ = F(O) · F(C)⁻¹`.
#[derive(Clone, Debug)]
pub struct TaskTargets {
    features: FeatureConfig,
    spec: FrameSpec,
    canonical_inverse: SE3Pose,
    trajectory: ActionSequence,
}

impl TaskTargets {
    pub fn estimate_pose(&self, obs: &Observation) -> Result<SE3Pose> {
        let frame = frame_from_bundle(&FeatureBundle::from_observation(obs, &self.features), &self.spec)?;
        Ok(frame.as_pose().compose(&self.canonical_inverse))
    }
}

impl TargetProvider for TaskTargets {
    fn target(&self, obs: &Observation) -> Result<ActionSequence> {
        Ok(self.trajectory.transformed(&self.estimate_pose(obs)?))
    }
}

/// Yaw within the band about z, translation uniform in the band cube.
pub fn sample_band_pose<R: Rng + ?Sized>(rng: &mut R) -> SE3Pose {
    let yaw = rng.random_range(-BAND_YAW..=BAND_YAW);
    let t = Vec3::from_fn(|_, _| rng.random_range(-BAND_TRANSLATION..=BAND_TRANSLATION));
    SE3Pose::rot_z(yaw).with_translation(t)
}

/// Uniform rotation from a normalized Gaussian quaternion, translation uniform in the wide cube.
pub fn sample_new_pose<R: Rng + ?Sized>(rng: &mut R) -> SE3Pose {
    let q: [f64; 4] = loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-9 {
            break q.map(|v| v / n);
        }
    };
    let t = Vec3::from_fn(|_, _| rng.random_range(-NEW_POSE_TRANSLATION..=NEW_POSE_TRANSLATION));
    SE3Pose::new(quaternion_matrix(q), t).expect("unit quaternions give rotations")
}

fn quaternion_matrix([w, x, y, z]: [f64; 4]) -> Mat3 {
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

fn color(c: [f64; 3]) -> Vec3 {
    Vec3::new(c[0], c[1], c[2])
}

fn triangle_vertex(m: usize) -> Vec3 {
    let a = std::f64::consts::FRAC_PI_2 + m as f64 * 2.0 * std::f64::consts::PI / 3.0;
    Vec3::new(0.17 * a.cos(), 0.17 * a.sin(), 0.0)
}

fn triangle_cloud() -> (Vec<Vec3>, Vec<Vec3>) {
    let mut rng = stream(0x7417, 0);
    let [a, b, c] = [0, 1, 2].map(triangle_vertex);
    let mut points = Vec::with_capacity(64);
    let mut colors = Vec::with_capacity(64);
    for _ in 0..64 {
        let (r1, r2): (f64, f64) = (rng.random(), rng.random());
        let s = r1.sqrt();
        let mut p = a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2);
        p.z = rng.random_range(-0.01..=0.01);
        let col = if (p - a).norm() < 0.07 {
            RED
        } else if (p - b).norm() < 0.07 {
            GREEN
        } else {
            GRAY
        };
        points.push(p);
        colors.push(color(col));
    }
    (points, colors)
}

fn cap_cloud() -> (Vec<Vec3>, Vec<Vec3>) {
    let mut rng = stream(0xca9, 0);
    let radius = 0.05;
    let height = 0.03;
    let mut points = Vec::with_capacity(256);
    let mut colors = Vec::with_capacity(256);
    for i in 0..256 {
        let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        if i < 128 {
            let r = radius * rng.random::<f64>().sqrt();
            points.push(Vec3::new(r * theta.cos(), r * theta.sin(), height));
            let marked = (2.0..2.7).contains(&theta) && r > 0.025;
            colors.push(color(if marked { GREEN } else { GRAY }));
        } else {
            let z = rng.random_range(0.0..=height);
            points.push(Vec3::new(radius * theta.cos(), radius * theta.sin(), z));
            colors.push(color(if theta < 0.7 { RED } else { GRAY }));
        }
    }
    (points, colors)
}

fn sheet_cloud() -> (Vec<Vec3>, Vec<Vec3>) {
    let mut rng = stream(0x5ee7, 0);
    let red = Vec3::new(-0.1, 0.06, 0.0);
    let green = Vec3::new(0.1, 0.06, 0.0);
    let mut points = Vec::with_capacity(256);
    let mut colors = Vec::with_capacity(256);
    for _ in 0..256 {
        let p = Vec3::new(rng.random_range(-0.15..=0.15), rng.random_range(-0.1..=0.1), 0.0);
        let col = if (p - red).norm() < 0.04 {
            RED
        } else if (p - green).norm() < 0.04 {
            GREEN
        } else {
            GRAY
        };
        points.push(p);
        colors.push(color(col));
    }
    (points, colors)
}

fn triangle_pose(s: f64) -> SE3Pose {
    let grasp = SE3Pose::new(
        exp_map(&Twist::from_array([0.0, 0.0, 0.0, 1.2, 0.3, 0.0])).rotation().to_owned(),
        triangle_vertex(0) * 0.7 + Vec3::new(0.0, 0.0, 0.04 * (1.0 - s)),
    )
    .expect("valid grasp");
    SE3Pose::rot_z(std::f64::consts::FRAC_PI_3 * s).compose(&grasp)
}

/// One step of the unscrewing helix: a constant screw about the cap axis.
pub fn cap_screw() -> Twist {
    Twist::from_array([0.0, 0.0, 0.008, 0.0, 0.0, 0.25])
}

fn cap_pose(j: usize) -> SE3Pose {
    let grasp = SE3Pose::new(
        exp_map(&Twist::from_array([0.0, 0.0, 0.0, 0.6, -0.3, 0.2])).rotation().to_owned(),
        Vec3::new(0.0, 0.0, 0.05),
    )
    .expect("valid grasp");
    exp_map(&(cap_screw() * j as f64)).compose(&grasp)
}

fn stroke_pose(s: f64) -> SE3Pose {
    let tau = std::f64::consts::TAU;
    let t = Vec3::new(-0.1 + 0.2 * s, 0.05 * (tau * s).sin(), 0.005 + 0.01 * (1.0 - s));
    let heading = (0.05 * tau * (tau * s).cos()).atan2(0.2);
    SE3Pose::rot_z(heading).compose(&SE3Pose::rot_x(0.4)).with_translation(t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Demo {
    pub task: TaskName,
    pub split: Split,
    pub seed: u64,
    pub pose: SE3Pose,
    pub observation: Observation,
    pub actions: ActionSequence,
}

#[derive(Serialize, Deserialize)]
struct DemoRecord {
    task: TaskName,
    split: Split,
    seed: u64,
    pose: SE3Pose,
    points: Vec<[f64; 3]>,
    colors: Vec<[f64; 3]>,
    actions: ActionSequence,
}

impl Demo {
    pub fn to_json_line(&self) -> Result<String> {
        let v3 = |v: &Vec3| [v.x, v.y, v.z];
        let rec = DemoRecord {
            task: self.task,
            split: self.split,
            seed: self.seed,
            pose: self.pose,
            points: self.observation.points().iter().map(v3).collect(),
            colors: self.observation.colors().iter().map(v3).collect(),
            actions: self.actions.clone(),
        };
        Ok(serde_json::to_string(&rec)?)
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let rec: DemoRecord = serde_json::from_str(line)?;
        let v3 = |a: &[f64; 3]| Vec3::new(a[0], a[1], a[2]);
        Ok(Self {
            task: rec.task,
            split: rec.split,
            seed: rec.seed,
            pose: rec.pose,
            observation: Observation::new(rec.points.iter().map(v3).collect(), rec.colors.iter().map(v3).collect())?,
            actions: rec.actions,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub train: usize,
    pub test_t: usize,
    pub test_np: usize,
}

impl Default for DatasetCounts {
    fn default() -> Self {
        Self {
            train: 25,
            test_t: 20,
            test_np: 20,
        }
    }
}

/// Seed of record `index` within `split` for a dataset built from `seed`.
pub fn record_seed(seed: u64, split: Split, index: usize) -> u64 {
    derive_seed(derive_seed(seed, split.tag()), index as u64)
}

/// Train, test_T and test_NP demos in that order; each record has its own derived seed.
pub fn build_dataset(task: &TaskSpec, counts: DatasetCounts, seed: u64, jitter: f64) -> Result<Vec<Demo>> {
    if counts.train == 0 || counts.test_t == 0 || counts.test_np == 0 {
        return Err(Error::BadParameter("every split needs at least one demo".into()));
    }
    let mut demos = Vec::with_capacity(counts.train + counts.test_t + counts.test_np);
    for (split, n) in [(Split::TrainT, counts.train), (Split::TestT, counts.test_t), (Split::TestNp, counts.test_np)] {
        for i in 0..n {
            demos.push(task.generate_demo(split, record_seed(seed, split, i), jitter)?);
        }
    }
    Ok(demos)
}

pub fn write_jsonl(demos: &[Demo], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for d in demos {
        writeln!(out, "{}", d.to_json_line()?)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a JSON-Lines dataset; errors name the 1-based line number.
pub fn read_jsonl(path: &Path) -> Result<Vec<Demo>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut demos = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let demo = Demo::from_json_line(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        demos.push(demo);
    }
    Ok(demos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::{geodesic_distance, log_map, so3_log_fallback};

    #[test]
    fn identity_override_reproduces_canonical_data() {
        for name in TaskName::ALL {
            let task = TaskSpec::new(name, DEFAULT_HORIZON);
            let demo = task.demo_with_pose(Split::TrainT, 3, SE3Pose::identity(), 0.0).unwrap();
            assert_eq!(demo.observation, task.canonical_observation());
            assert_eq!(demo.actions, task.canonical_actions());
        }
    }

    #[test]
    fn actions_are_attached_to_the_object() {
        for name in TaskName::ALL {
            let task = TaskSpec::new(name, DEFAULT_HORIZON);
            for split in [Split::TrainT, Split::TestNp] {
                for seed in 0..20 {
                    let demo = task.generate_demo(split, seed, 0.005).unwrap();
                    let back = demo.actions.transformed(&demo.pose.inverse());
                    for (a, b) in back.poses().iter().zip(task.canonical_trajectory()) {
                        assert!(a.max_abs_diff(b) < 1e-12);
                    }
                    for (a, b) in demo.actions.poses().iter().zip(task.canonical_trajectory()) {
                        assert!(geodesic_distance(a, &demo.pose.compose(b)) < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn canonical_rotations_stay_clear_of_pi() {
        // band poses add at most 15° of yaw; forward diffusion needs the strict logarithm
        for name in TaskName::ALL {
            for p in TaskSpec::new(name, DEFAULT_HORIZON).canonical_trajectory() {
                assert!(p.angle() + BAND_YAW < std::f64::consts::PI - 0.3, "{name}: {}", p.angle());
            }
        }
    }

    #[test]
    fn screw_cap_is_a_helix() {
        let task = TaskSpec::new(TaskName::ScrewCap, DEFAULT_HORIZON);
        let traj = task.canonical_trajectory();
        for w in traj.windows(2) {
            let step = log_map(&w[1].compose(&w[0].inverse())).unwrap();
            assert!(step.max_abs_diff(&cap_screw()) < 1e-12);
        }
    }

    #[test]
    fn canonical_frames_are_well_conditioned() {
        let features = FeatureConfig::default();
        let spec = FrameSpec::radial_profile(&features);
        for name in TaskName::ALL {
            let task = TaskSpec::new(name, DEFAULT_HORIZON);
            let obs = task.canonical_observation();
            assert!(frame_from_bundle(&FeatureBundle::from_observation(&obs, &features), &spec).is_ok());
            let targets = task.target_provider();
            assert!(targets.estimate_pose(&obs).unwrap().max_abs_diff(&SE3Pose::identity()) < 1e-12);
        }
    }

    #[test]
    fn provider_recovers_pose() {
        let task = TaskSpec::new(TaskName::RotateTriangle, DEFAULT_HORIZON);
        let targets = task.target_provider();
        for seed in 0..20 {
            let demo = task.generate_demo(Split::TestNp, seed, 0.0).unwrap();
            let got = targets.target(&demo.observation).unwrap();
            assert!(got.max_geodesic_to(&demo.actions) < 1e-10);
        }
    }

    #[test]
    fn new_pose_axes_are_isotropic() {
        let mut rng = stream(5, 0);
        let n = 10_000;
        let mut mean = Vec3::zeros();
        for _ in 0..n {
            let p = sample_new_pose(&mut rng);
            let w = so3_log_fallback(p.rotation());
            mean += w / w.norm() / n as f64;
        }
        assert!(mean.amax() < 0.05, "{mean:?}");
    }

    #[test]
    fn band_poses_stay_in_band() {
        let mut rng = stream(6, 0);
        for _ in 0..1000 {
            let p = sample_band_pose(&mut rng);
            assert!(p.angle() <= BAND_YAW + 1e-12);
            assert!(p.translation().amax() <= BAND_TRANSLATION);
            assert!(p.rotation()[(2, 2)] == 1.0);
        }
    }

    #[test]
    fn dataset_is_reproducible_and_seed_dependent() {
        let task = TaskSpec::new(TaskName::ScrewCap, DEFAULT_HORIZON);
        let counts = DatasetCounts {
            train: 25,
            test_t: 20,
            test_np: 20,
        };
        let a = build_dataset(&task, counts, 7, 0.0).unwrap();
        assert_eq!(a.len(), 65);
        let b = build_dataset(&task, counts, 7, 0.0).unwrap();
        assert_eq!(a, b);
        let c = build_dataset(&task, counts, 8, 0.0).unwrap();
        assert_ne!(a[0].pose, c[0].pose);
        assert!(build_dataset(&task, DatasetCounts { train: 0, ..counts }, 7, 0.0).is_err());
    }

    #[test]
    fn jsonl_roundtrip_and_line_numbers() {
        let task = TaskSpec::new(TaskName::CalligraphyStroke, 3);
        let demos = build_dataset(&task, DatasetCounts { train: 2, test_t: 1, test_np: 1 }, 1, 0.005).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_jsonl(&demos, &path).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), demos);

        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("{\"task\": \"screw_cap\", \"split\": \n");
        std::fs::write(&path, text).unwrap();
        match read_jsonl(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn split_names() {
        assert_eq!("NP".parse::<Split>().unwrap(), Split::TestNp);
        assert_eq!("T".parse::<Split>().unwrap(), Split::TestT);
        assert_eq!(serde_json::to_string(&Split::TestNp).unwrap(), "\"test_NP\"");
        assert!("screw".parse::<TaskName>().is_err());
    }
}

use se3diff::denoiser::{make_oracle, FeatureConfig, FrameRegressor, Mlp, ModelConfig};
use se3diff::evalkit::{compare_reports, equivariance_sweep, evaluate, EvalConfig};
use se3diff::learnability::{invariant_loss, Cloud};
use se3diff::schedule::{NoiseSchedule, ScheduleKind};
use se3diff::se3::Mat3;
use se3diff::tasks::{build_dataset, read_jsonl, write_jsonl, DatasetCounts, Split, TaskName, TaskSpec};
use se3diff::Error;

#[test]
fn dataset_roundtrip_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let task = TaskSpec::new(TaskName::CalligraphyStroke, 7);
    let counts = DatasetCounts {
        train: 4,
        test_t: 2,
        test_np: 3,
    };
    let a = build_dataset(&task, counts, 9, 0.001).unwrap();
    let b = build_dataset(&task, counts, 9, 0.001).unwrap();
    let (pa, pb) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    write_jsonl(&a, &pa).unwrap();
    write_jsonl(&b, &pb).unwrap();
    assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    let back = read_jsonl(&pa).unwrap();
    assert_eq!(back, a);
    assert_eq!(back.iter().filter(|d| d.split == Split::TestNp).count(), 3);
}

#[test]
fn corrupt_line_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let task = TaskSpec::new(TaskName::RotateTriangle, 7);
    let demos = build_dataset(&task, DatasetCounts::default(), 0, 0.0).unwrap();
    write_jsonl(&demos[..3], &path).unwrap();
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("{\"task\": \"rotate_triangle\"\n");
    std::fs::write(&path, text).unwrap();
    match read_jsonl(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn paired_evaluation_and_sweep() {
    let schedule = NoiseSchedule::build(10, ScheduleKind::Linear, 1.0).unwrap();
    let task = TaskSpec::new(TaskName::ScrewCap, 7);
    let cfg = EvalConfig {
        episodes: 3,
        seeds: vec![0, 1],
        jitter: 0.003,
        ..EvalConfig::default()
    };
    let model = FrameRegressor::new(&ModelConfig::default()).unwrap();
    let t = evaluate(&model, &task, Split::TestT, &schedule, &cfg).unwrap();
    let np = evaluate(&model, &task, Split::TestNp, &schedule, &cfg).unwrap();
    let delta = compare_reports(&t, &np).unwrap();
    assert!(delta.geodesic_delta.abs() < 1e-8);
    assert_eq!(delta.per_seed.len(), 2);

    let oracle = make_oracle(task.target_provider(), 7);
    assert!(equivariance_sweep(&oracle, &task, &schedule, 10, 3, 0.003).unwrap().pass);
    assert!(equivariance_sweep(&model, &task, &schedule, 10, 3, 0.003).unwrap().pass);
}

#[test]
fn zero_network_fits_a_zero_constant() {
    let task = TaskSpec::new(TaskName::ScrewCap, 1);
    let cfg = FeatureConfig::default();
    let clouds: Vec<Cloud> = (0..3).map(|s| Cloud::sample(&task, s, 0.0, &cfg).unwrap()).collect();
    let mut rng = se3diff::rng::stream(0, 0);
    let net = Mlp::new(&[cfg.point_feature_len(), 8, 9], 1.0, &[0.0; 9], &mut rng).unwrap().zeros_like();
    assert_eq!(invariant_loss(&net, &clouds, &Mat3::zeros()), 0.0);
}

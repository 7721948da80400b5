use proptest::prelude::*;
use se3diff::denoiser::{make_oracle, FixedTargets, FrameRegressor, ModelConfig};
use se3diff::diffusion::{denoise_step, diffuse_pose, infer, infer_traced};
use se3diff::rng::stream;
use se3diff::schedule::{NoiseSchedule, ScheduleKind};
use se3diff::se3::{exp_map, SE3Pose, Twist, Vec3};
use se3diff::tasks::{sample_new_pose, Split, TaskName, TaskSpec};

fn pose_from_rows(rows: [f64; 12]) -> SE3Pose {
    let mut m = rows.to_vec();
    m.extend_from_slice(&[0.0, 0.0, 0.0, 1.0]);
    SE3Pose::from_row_major(&m).unwrap()
}

fn a_pose() -> SE3Pose {
    exp_map(&Twist::from_array([0.1, -0.2, 0.3, 0.4, 0.5, -0.6]))
}

fn b_pose() -> SE3Pose {
    SE3Pose::rot_z(2.0)
        .compose(&SE3Pose::rot_x(0.5))
        .with_translation(Vec3::new(1.0, 2.0, 3.0))
}

#[test]
fn forward_kernel_reference() {
    let noise = Twist::from_array([0.01, 0.02, -0.03, 0.05, -0.04, 0.02]);
    let got = diffuse_pose(&b_pose(), 0.64, &noise).unwrap();
    let expected = pose_from_rows([
        -0.052312560188770126, -0.9295768694860078, 0.364897574345308, 0.9040325907836673,
        0.9979637303867027, -0.03530969745542368, 0.05311890528110445, 1.4765118218234174,
        -0.03649368272938207, 0.3669333304323822, 0.9295311410268338, 2.4588459444790436,
    ]);
    assert!(got.max_abs_diff(&expected) < 1e-12);
}

#[test]
fn reverse_step_reference() {
    let got = denoise_step(&a_pose(), &b_pose(), 0.3, 0.6);
    let expected = pose_from_rows([
        -0.028039612335714503, -0.8399698786373709, 0.5419080947190057, 1.6923704964898574,
        0.9945998225080472, -0.07763636017874531, -0.06887516711527553, 1.0537783549238502,
        0.09992483778832909, 0.5370504618377272, 0.8376107856474032, 2.7300764950144676,
    ]);
    assert!(got.max_abs_diff(&expected) < 1e-12);
}

#[test]
fn cosine_schedule_reference() {
    let s = NoiseSchedule::build(50, ScheduleKind::Cosine, 1.0).unwrap();
    assert!((s.alpha_bar(25).unwrap() - 0.4938435904406377).abs() < 1e-14);
    let (l0, l1) = s.reverse_coefficients(25).unwrap();
    assert!((l0 - 0.08496583345890926).abs() < 1e-14);
    assert!((l1 - 0.9101603415832982).abs() < 1e-14);
}

#[test]
fn oracle_recovers_demonstrations() {
    for name in TaskName::ALL {
        let task = TaskSpec::new(name, 7);
        let oracle = make_oracle(task.target_provider(), 7);
        for k in [1, 10, 100] {
            let schedule = NoiseSchedule::build(k, ScheduleKind::Linear, 1.0).unwrap();
            for seed in 0..3 {
                let demo = task.generate_demo(Split::TestNp, seed, 0.0).unwrap();
                let out = infer(&oracle, &demo.observation, &schedule, 7, &mut stream(seed, 9)).unwrap();
                assert!(out.max_geodesic_to(&demo.actions) < 1e-9, "{name} K={k}");

                // jittered clouds defeat pose estimation, so look the target up instead
                let noisy = task.generate_demo(Split::TestNp, seed, 0.01).unwrap();
                let lookup = make_oracle(FixedTargets::single(noisy.observation.clone(), noisy.actions.clone()), 7);
                let out = infer(&lookup, &noisy.observation, &schedule, 7, &mut stream(seed, 9)).unwrap();
                assert!(out.max_geodesic_to(&noisy.actions) < 1e-9, "{name} K={k} lookup");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn moving_the_cloud_moves_the_actions(model_seed in 0u64..1000, demo_seed in any::<u64>(), motion_seed in any::<u64>(), which in 0usize..3) {
        let task = TaskSpec::new(TaskName::ALL[which], 7);
        let model = FrameRegressor::new(&ModelConfig { seed: model_seed, ..ModelConfig::default() }).unwrap();
        let schedule = NoiseSchedule::build(8, ScheduleKind::Linear, 1.0).unwrap();
        let demo = task.generate_demo(Split::TestT, demo_seed, 0.002).unwrap();
        let motion = sample_new_pose(&mut stream(motion_seed, 0));
        let a = infer_traced(&model, &demo.observation, &schedule, 7, &mut stream(demo_seed, 1)).unwrap();
        let b = infer_traced(&model, &demo.observation.transformed(&motion), &schedule, 7, &mut stream(demo_seed, 1)).unwrap();
        prop_assert!(a.output().transformed(&motion).max_geodesic_to(b.output()) < 1e-8);
        prop_assert!(a.at(1).unwrap().max_geodesic_to(b.at(1).unwrap()) < 1e-9);
    }
}

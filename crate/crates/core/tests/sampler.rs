use affalign::align::projection_calls;
use affalign::metrics::{run_episode, ModelPolicy};
use affalign::model::{euler_path, sample_chunk, Model, ModelConfig, ModelInput, ACTION_CLAMP};
use affalign::teacher::teach_calls;
use affalign::world::{generate_scene_from, render, Difficulty, RobotState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn noise(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

#[test]
fn constant_field_lands_on_shifted_noise() {
    let horizon = 8;
    let c: Vec<f64> = (0..horizon * 2).map(|i| 0.1 * i as f64 - 0.4).collect();
    for steps in [1usize, 10] {
        for seed in 0..5 {
            let eps = noise(seed, horizon * 2);
            let shifted: Vec<f64> = eps.iter().zip(&c).map(|(e, ci)| e + ci).collect();
            let path = euler_path(eps.clone(), steps, |_, _| Ok(c.clone())).unwrap();
            assert_eq!(path, shifted, "K = {steps}");

            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sampled = sample_chunk(&mut rng, horizon, steps, |_, _| Ok(c.clone())).unwrap();
            let clamped: Vec<f64> = shifted.iter().map(|v| v.clamp(ACTION_CLAMP.0, ACTION_CLAMP.1)).collect();
            assert_eq!(sampled, clamped, "K = {steps}");
        }
    }
}

#[test]
fn point_mass_optimal_field_reaches_target() {
    // For data concentrated at a*, the optimal field is (a* − x)/(1 − τ).
    let target = 0.7;
    for seed in 0..10 {
        let start = noise(seed, 1);
        let end = euler_path(start, 10, |x, tau| Ok(vec![(target - x[0]) / (1.0 - tau)])).unwrap();
        assert!((end[0] - target).abs() <= 1e-3, "seed {seed}: {}", end[0]);
    }
}

#[test]
fn zero_steps_is_a_usage_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(sample_chunk(&mut rng, 2, 0, |x, _| Ok(x.to_vec())).is_err());
}

#[test]
fn inference_never_calls_teacher_or_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let config = ModelConfig {
        width: 16,
        heads: 2,
        layers: 2,
        align_layer: 1,
        mlp_hidden: 32,
        action_width: 16,
        action_heads: 2,
        action_layers: 1,
        action_mlp_hidden: 32,
        projection_hidden: 16,
        ..ModelConfig::default()
    };
    let model = Model::new(config, &mut rng).unwrap();
    let (teach0, proj0) = (teach_calls(), projection_calls());

    let scene = generate_scene_from(11, Difficulty::Hard);
    let obs = render(&scene, &RobotState::new(scene.gripper_start));
    let input = ModelInput::from_observation(&obs);
    for i in 0..5 {
        let mut r = ChaCha8Rng::seed_from_u64(i);
        model.sample_actions(&input, &mut r, 10).unwrap();
    }
    let mut policy = ModelPolicy::for_scene(&model, &scene);
    run_episode(&mut policy, &scene).unwrap();

    assert_eq!(teach_calls(), teach0);
    assert_eq!(projection_calls(), proj0);
}

use affalign::metrics::{encode_pgm, fixation_map, kld, nss, sim};
use affalign::world::{affordance_ground_truth, generate_scene_from, Difficulty, GRID};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Straight-loop references: explicit totals, no shared helpers.

fn ref_kld(pred: &[f64], truth: &[f64]) -> f64 {
    let mut sp = 0.0;
    let mut sg = 0.0;
    for i in 0..pred.len() {
        sp += pred[i];
        sg += truth[i];
    }
    let mut out = 0.0;
    for i in 0..pred.len() {
        let p = pred[i] / sp;
        let g = truth[i] / sg;
        out += g * (g / (p + 1e-12) + 1e-12).ln();
    }
    out
}

fn ref_sim(pred: &[f64], truth: &[f64]) -> f64 {
    let mut sp = 0.0;
    let mut sg = 0.0;
    for i in 0..pred.len() {
        sp += pred[i];
        sg += truth[i];
    }
    let mut out = 0.0;
    for i in 0..pred.len() {
        let p = pred[i] / sp;
        let g = truth[i] / sg;
        out += if p < g { p } else { g };
    }
    out
}

fn ref_nss(pred: &[f64], fix: &[bool]) -> f64 {
    let n = pred.len() as f64;
    let mut mean = 0.0;
    for v in pred {
        mean += v;
    }
    mean /= n;
    let mut var = 0.0;
    for v in pred {
        var += (v - mean) * (v - mean);
    }
    let sd = (var / n).sqrt();
    if sd < 1e-12 {
        return 0.0;
    }
    let mut acc = 0.0;
    let mut count = 0.0;
    for i in 0..pred.len() {
        if fix[i] {
            acc += (pred[i] - mean) / sd;
            count += 1.0;
        }
    }
    acc / count
}

fn random_grid(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen::<f64>() })
        .collect()
}

#[test]
fn metrics_match_straight_loop_references() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..100 {
        let n = rng.gen_range(4..=GRID * GRID);
        let pred = random_grid(&mut rng, n);
        let mut truth = random_grid(&mut rng, n);
        truth[0] += 0.1;
        let mut pred = pred;
        pred[n - 1] += 0.1;
        let fix: Vec<bool> = truth.iter().map(|t| *t >= 0.5).collect();
        assert!((kld(&pred, &truth).unwrap() - ref_kld(&pred, &truth)).abs() <= 1e-9);
        assert!((sim(&pred, &truth).unwrap() - ref_sim(&pred, &truth)).abs() <= 1e-9);
        if fix.iter().any(|&f| f) {
            assert!((nss(&pred, &fix).unwrap() - ref_nss(&pred, &fix)).abs() <= 1e-9);
        }
    }
}

#[test]
fn closed_form_cases() {
    let uniform = [1.0; 4];
    let one_hot = [0.0, 0.0, 1.0, 0.0];
    assert!((kld(&uniform, &one_hot).unwrap() - 4f64.ln()).abs() <= 1e-6);
    for n in [2usize, 4, 9, 256] {
        let mut hot = vec![0.0; n];
        hot[n / 2] = 1.0;
        assert!((sim(&vec![1.0; n], &hot).unwrap() - 1.0 / n as f64).abs() <= 1e-6);
    }
    let indicator = [1.0, 0.0, 0.0, 0.0];
    let fix = [true, false, false, false];
    assert!((nss(&indicator, &fix).unwrap() - 3f64.sqrt()).abs() <= 1e-6);
    assert_eq!(nss(&[0.3; 4], &fix).unwrap(), 0.0);
}

/// Gaussian blur with zero padding, truncated at 3σ.
fn gaussian_blur(grid: &[f64], side: usize, sigma: f64) -> Vec<f64> {
    let mut out = vec![0.0; grid.len()];
    let radius = (3.0 * sigma).ceil() as isize;
    for r in 0..side as isize {
        for c in 0..side as isize {
            let mut acc = 0.0;
            for dr in -radius..=radius {
                for dc in -radius..=radius {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr < 0 || cc < 0 || rr >= side as isize || cc >= side as isize {
                        continue;
                    }
                    let w = (-((dr * dr + dc * dc) as f64) / (2.0 * sigma * sigma)).exp();
                    acc += w * grid[rr as usize * side + cc as usize];
                }
            }
            out[r as usize * side + c as usize] = acc;
        }
    }
    out
}

#[test]
fn blurred_prediction_ranks_between_truth_and_uniform() {
    for seed in 0..20 {
        let truth = affordance_ground_truth(&generate_scene_from(seed, Difficulty::Easy));
        let blurred = gaussian_blur(&truth, GRID, 1.0);
        let uniform = vec![1.0; GRID * GRID];
        let kb = kld(&blurred, &truth).unwrap();
        let ku = kld(&uniform, &truth).unwrap();
        assert!(kb > 0.0 && kb < ku, "seed {seed}: blurred {kb} uniform {ku}");
    }
}

#[test]
fn pgm_export_examples() {
    assert_eq!(encode_pgm(&[0.0; 4], 2, 2).unwrap(), "P2\n2 2\n255\n0 0\n0 0\n");
    let one_hot = encode_pgm(&[0.0, 0.0, 0.3, 0.0], 2, 2).unwrap();
    assert_eq!(one_hot.matches("255").count(), 2);
    assert_eq!(one_hot, encode_pgm(&[0.0, 0.0, 0.3, 0.0], 2, 2).unwrap());
}

fn grid_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..64).prop_flat_map(|n| {
        (
            prop::collection::vec(0.0f64..10.0, n),
            prop::collection::vec(0.0f64..10.0, n),
        )
    })
}

proptest! {
    #[test]
    fn kld_and_sim_bounds((mut pred, mut truth) in grid_strategy()) {
        pred[0] += 0.5;
        truth[0] += 0.5;
        let k = kld(&pred, &truth).unwrap();
        prop_assert!(k >= 0.0);
        prop_assert!(kld(&truth, &truth).unwrap() <= 1e-9);
        let s = sim(&pred, &truth).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&s));
        prop_assert!(sim(&truth, &truth).unwrap() >= 1.0 - 1e-9);
    }

    #[test]
    fn nss_is_affine_invariant((pred, truth) in grid_strategy(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let mut truth = truth;
        truth[0] = 10.0;
        let fix: Vec<bool> = truth.iter().map(|t| *t >= 5.0).collect();
        let moved: Vec<f64> = pred.iter().map(|p| a * p + b).collect();
        let base = nss(&pred, &fix).unwrap();
        prop_assert!((nss(&moved, &fix).unwrap() - base).abs() <= 1e-8 * (1.0 + base.abs()));
    }

    #[test]
    fn fixation_threshold_is_half(truth in prop::collection::vec(0.0f64..1.0, 1..64)) {
        let f = fixation_map(&truth);
        for (t, b) in truth.iter().zip(&f) {
            prop_assert_eq!(*b, *t >= 0.5);
        }
    }
}

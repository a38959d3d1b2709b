use affalign::model::checkpoint::{decode_tensors, encode_tensors};
use affalign::teacher::{teach_calls, ConceptTable};
use affalign::train::{TrainConfig, TrainLogRecord, Trainer};
use affalign::world::{generate_scene_from, record_demonstration, Demonstration, Difficulty};
use affalign::Error;
use sha2::{Digest, Sha256};

fn demos(n: u64) -> Vec<Demonstration> {
    (0..n)
        .map(|i| record_demonstration(&generate_scene_from(i, Difficulty::Easy), 8))
        .collect()
}

fn small(seed: u64, steps: usize) -> TrainConfig {
    let text = format!(
        "seed = {seed}\ntotal_steps = {steps}\nwarmup_steps = {}\nbatch_size = 4\n\
         width = 16\nheads = 2\nlayers = 2\nmlp_hidden = 32\n\
         action_width = 16\naction_heads = 2\naction_layers = 1\naction_mlp_hidden = 32\n\
         projection_hidden = 16\n",
        steps / 10
    );
    TrainConfig::parse(&text).unwrap()
}

fn run(cfg: TrainConfig, data: &[Demonstration], steps: usize) -> (Vec<TrainLogRecord>, Trainer<'_>) {
    let mut tr = Trainer::new(cfg, data).unwrap();
    let log = (0..steps).map(|_| tr.train_step().unwrap()).collect();
    (log, tr)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

#[test]
fn same_seed_same_log_and_params() {
    let data = demos(4);
    let (a, ta) = run(small(3, 20), &data, 6);
    let (b, tb) = run(small(3, 20), &data, 6);
    assert_eq!(a, b);
    assert_eq!(
        encode_tensors(&ta.to_named()).unwrap(),
        encode_tensors(&tb.to_named()).unwrap()
    );
    let (c, _) = run(small(4, 20), &data, 6);
    assert_ne!(a, c);
}

#[test]
fn combined_bookkeeping() {
    let data = demos(4);
    let (log, _) = run(small(1, 20), &data, 5);
    for r in &log {
        assert!((r.combined - (r.l_action + 0.5 * r.l_align)).abs() <= 1e-12);
        assert!((-1.0..=1.0).contains(&r.l_align) && r.l_align != 0.0);
        assert_eq!(r.ms, 0.0);
    }
}

#[test]
fn ablation_skips_teacher_and_head() {
    let data = demos(4);
    let mut cfg = small(2, 20);
    cfg.align_enabled = false;
    let before = teach_calls();
    let (log, tr) = run(cfg, &data, 5);
    assert_eq!(teach_calls(), before);
    assert!(log.iter().all(|r| r.l_align == 0.0 && r.combined == r.l_action));
    let init = Trainer::new(small(2, 20), &data).unwrap();
    for (id, name, t) in tr.model.params.iter() {
        if name.starts_with("align.") {
            assert!(!tr.is_trainable(id));
            assert_eq!(t, init.model.params.get(id), "{name} moved");
        }
    }
}

#[test]
fn aligned_and_unaligned_share_initialization() {
    let data = demos(2);
    let mut off = small(5, 20);
    off.align_enabled = false;
    let a = Trainer::new(small(5, 20), &data).unwrap();
    let b = Trainer::new(off, &data).unwrap();
    assert_eq!(a.model.params, b.model.params);
}

#[test]
fn zero_weight_matches_ablation_on_backbone() {
    let data = demos(4);
    let mut zero = small(6, 30);
    zero.align_weight = 0.0;
    let mut off = small(6, 30);
    off.align_enabled = false;
    let (la, ta) = run(zero, &data, 10);
    let (lb, tb) = run(off, &data, 10);
    for (a, b) in la.iter().zip(&lb) {
        assert_eq!(a.l_action.to_bits(), b.l_action.to_bits());
        assert_eq!(a.combined.to_bits(), b.combined.to_bits());
    }
    for (id, name, t) in ta.model.params.iter() {
        if !name.starts_with("align.") {
            assert_eq!(t, tb.model.params.get(id), "{name}");
        }
    }
}

#[test]
fn loss_trends_down_over_200_steps() {
    let data = demos(8);
    let (log, _) = run(small(0, 200), &data, 200);
    let losses: Vec<f64> = log.iter().map(|r| r.combined).collect();
    let first = median(&losses[..20]);
    let last = median(&losses[180..]);
    assert!(last < first, "median first {first} last {last}");
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let data = demos(4);
    let k = 5;
    let (full, _) = run(small(7, 30), &data, k + 10);
    let (_, partial) = run(small(7, 30), &data, k);
    let bytes = encode_tensors(&partial.to_named()).unwrap();
    let mut resumed = Trainer::resume(small(7, 30), &data, decode_tensors(&bytes).unwrap()).unwrap();
    assert_eq!(resumed.completed_steps(), k);
    let tail: Vec<TrainLogRecord> = (0..10).map(|_| resumed.train_step().unwrap()).collect();
    assert_eq!(tail, full[k..].to_vec());
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let data = demos(2);
    let (_, tr) = run(small(8, 20), &data, 3);
    let first = encode_tensors(&tr.to_named()).unwrap();
    let again = Trainer::resume(small(8, 20), &data, decode_tensors(&first).unwrap()).unwrap();
    assert_eq!(encode_tensors(&again.to_named()).unwrap(), first);
    let mut bad = first.clone();
    bad[0] = b'X';
    assert!(matches!(decode_tensors(&bad), Err(Error::Format { .. })));
    assert!(matches!(
        decode_tensors(&first[..first.len() - 3]),
        Err(Error::Format { .. })
    ));
}

#[test]
fn teacher_tables_stay_frozen() {
    let hash = || Sha256::digest(ConceptTable::shared().to_bytes());
    let before = hash();
    let data = demos(3);
    run(small(9, 20), &data, 4);
    assert_eq!(hash(), before);
}

#[test]
fn horizon_mismatch_is_rejected() {
    let data: Vec<Demonstration> = (0..2)
        .map(|i| record_demonstration(&generate_scene_from(i, Difficulty::Easy), 5))
        .collect();
    assert!(matches!(Trainer::new(small(0, 20), &data), Err(Error::Usage(_))));
    assert!(matches!(Trainer::new(small(0, 20), &[]), Err(Error::Usage(_))));
}

#[test]
fn optimizer_moments_track_only_trainable_params() {
    let data = demos(2);
    let mut cfg = small(1, 20);
    cfg.align_enabled = false;
    let (_, tr) = run(cfg, &data, 2);
    for (id, name, _) in tr.model.params.iter() {
        let moved = tr.opt.second[id.0].data().iter().any(|v| *v != 0.0);
        assert_eq!(moved, !name.starts_with("align."), "{name}");
    }
    assert_eq!(tr.opt.step, 2);
}

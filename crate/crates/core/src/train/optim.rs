//! Warmup-cosine learning-rate schedule and AdamW with decoupled decay.

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::numerics::{ParamId, Tensor};

use super::TrainConfig;

/// Linear ramp from 0 to `peak_lr` over the warmup, then cosine decay from
/// `peak_lr` to `final_lr` at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::usage(format!(
            "step {step} is past the schedule end {}",
            cfg.total_steps
        )));
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.peak_lr * step as f64 / cfg.warmup_steps as f64);
    }
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    let cosine = (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0;
    Ok(cfg.final_lr + (cfg.peak_lr - cfg.final_lr) * cosine)
}

/// First and second moments per parameter plus the update count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl OptimizerState {
    /// Zero moments mirroring every tensor of `params`.
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape().to_vec()))
                .collect()
        };
        OptimizerState {
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }
}

/// One AdamW update of the parameters named in `grads`; all others are left
/// untouched, moments included.
///
/// Decay is applied as `p ← p − lr·wd·p` before the adaptive step
/// `p ← p − lr·m̂/(√v̂ + ε)`.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &[(ParamId, Tensor)],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if state.first.len() != params.len() || state.second.len() != params.len() {
        return Err(Error::Dimension {
            op: "adamw_step",
            left: vec![params.len()],
            right: vec![state.first.len(), state.second.len()],
        });
    }
    for (id, g) in grads {
        let p = params.get(*id);
        let shapes = [state.first[id.0].shape(), state.second[id.0].shape(), g.shape()];
        if shapes.iter().any(|s| *s != p.shape()) {
            return Err(Error::Dimension {
                op: "adamw_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let correct1 = 1.0 - b1.powi(t);
    let correct2 = 1.0 - b2.powi(t);
    let shrink = 1.0 - lr * cfg.weight_decay;
    for (id, g) in grads {
        let m = state.first[id.0].data_mut();
        let v = state.second[id.0].data_mut();
        let p = params.get_mut(*id).data_mut();
        for (((p, m), v), g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / correct1;
            let v_hat = *v / correct2;
            *p *= shrink;
            *p -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::new(vec![1], vec![v]).unwrap());
        s
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.0);
        assert_eq!(lr_at(cfg.warmup_steps, &cfg).unwrap(), cfg.peak_lr);
        assert!((lr_at(cfg.total_steps, &cfg).unwrap() - cfg.final_lr).abs() <= 1e-12);
        assert!((lr_at(150, &cfg).unwrap() - 5e-4).abs() <= 1e-18);
        assert!(lr_at(cfg.total_steps + 1, &cfg).is_err());
        // halfway through the decay the cosine term is one half
        let mid = cfg.warmup_steps + (cfg.total_steps - cfg.warmup_steps) / 2;
        assert!((lr_at(mid, &cfg).unwrap() - 7.5e-4).abs() <= 1e-15);
    }

    #[test]
    fn schedule_is_monotone_after_warmup() {
        let cfg = TrainConfig::default();
        let lrs: Vec<f64> = (cfg.warmup_steps..=cfg.total_steps)
            .map(|s| lr_at(s, &cfg).unwrap())
            .collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn zero_grads_zero_decay_leave_params() {
        let mut cfg = TrainConfig::default();
        cfg.weight_decay = 0.0;
        let mut store = scalar_store(0.7);
        let mut st = OptimizerState::new(&store);
        let g = vec![(ParamId(0), Tensor::new(vec![1], vec![0.0]).unwrap())];
        for _ in 0..3 {
            adamw_step(&mut store, &g, &mut st, 0.1, &cfg).unwrap();
        }
        assert_eq!(store.get(ParamId(0)).data(), &[0.7]);
        assert_eq!(st.step, 3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut cfg = TrainConfig::default();
        cfg.weight_decay = 0.0;
        let mut store = scalar_store(1.0);
        let mut st = OptimizerState::new(&store);
        let g = vec![(ParamId(0), Tensor::new(vec![1], vec![1.0]).unwrap())];
        adamw_step(&mut store, &g, &mut st, 0.1, &cfg).unwrap();
        // hand-executed: m = 0.1, v = 0.001, m̂ = 1, v̂ = 1
        let m: f64 = 0.1 * 1.0;
        let v: f64 = 0.001 * 1.0;
        let step = 0.1 * (m / 0.1) / ((v / 0.001).sqrt() + 1e-8);
        assert_eq!(store.get(ParamId(0)).data()[0], 1.0 - step);
        assert!((store.get(ParamId(0)).data()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decay_alone_shrinks_multiplicatively() {
        let mut cfg = TrainConfig::default();
        cfg.weight_decay = 0.01;
        let mut store = scalar_store(2.0);
        let mut st = OptimizerState::new(&store);
        let g = vec![(ParamId(0), Tensor::new(vec![1], vec![0.0]).unwrap())];
        adamw_step(&mut store, &g, &mut st, 0.1, &cfg).unwrap();
        assert_eq!(store.get(ParamId(0)).data()[0], 2.0 * (1.0 - 0.1 * 0.01));
    }

    #[test]
    fn untouched_params_keep_moments() {
        let mut store = scalar_store(1.0);
        store.add("q", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let mut st = OptimizerState::new(&store);
        let g = vec![(ParamId(0), Tensor::new(vec![1], vec![0.5]).unwrap())];
        adamw_step(&mut store, &g, &mut st, 0.1, &TrainConfig::default()).unwrap();
        assert_eq!(store.get(ParamId(1)).data(), &[1.0, 2.0]);
        assert!(st.first[1].data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut store = scalar_store(1.0);
        let mut st = OptimizerState::new(&store);
        let g = vec![(ParamId(0), Tensor::new(vec![2], vec![0.0, 0.0]).unwrap())];
        let r = adamw_step(&mut store, &g, &mut st, 0.1, &TrainConfig::default());
        assert!(matches!(r, Err(Error::Dimension { .. })));
        assert_eq!(st.step, 0);
    }
}

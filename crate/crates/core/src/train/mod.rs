//! Joint optimization of the flow-matching and alignment losses.
//!
//! Every random draw of step `s` comes from a ChaCha8 stream selected by
//! `(seed, purpose)` and positioned at `s`, so the draws of a step do not
//! depend on earlier steps or on which losses are active. A resumed run
//! therefore needs only the parameters and optimizer moments.

pub mod config;
pub mod optim;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::{align_loss, build_target, combine, combined_loss, positional_embedding};
use crate::error::{Error, Result};
use crate::model::{action_loss, make_flow_state, Model, ModelInput};
use crate::numerics::{ParamId, Tape, Tensor};
use crate::teacher::{parse_task, teach, TEACHER_DIM, TEACHER_TOKENS};
use crate::world::{Demonstration, GRID};

pub use config::TrainConfig;
pub use optim::{adamw_step, lr_at, OptimizerState};

/// Named random streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Tau = 2,
    Noise = 3,
    Init = 4,
}

/// Words reserved per step within a stream; a step draws far fewer.
const WORDS_PER_STEP: u128 = 1 << 20;

/// Generator for `stream` positioned at `step`.
pub fn stream_rng(seed: u64, stream: Stream, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng.set_word_pos(step as u128 * WORDS_PER_STEP);
    rng
}

pub const LOG_HEADER: &str = "step,l_action,l_align,combined,lr,ms";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLogRecord {
    pub step: usize,
    pub l_action: f64,
    pub l_align: f64,
    pub combined: f64,
    pub lr: f64,
    pub ms: f64,
}

impl TrainLogRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.l_action, self.l_align, self.combined, self.lr, self.ms
        )
    }

    pub fn parse_csv_line(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::format(0, format!("malformed log line `{line}`"));
        if fields.len() != 6 {
            return Err(bad());
        }
        let f = |i: usize| fields[i].parse::<f64>().map_err(|_| bad());
        Ok(TrainLogRecord {
            step: fields[0].parse().map_err(|_| bad())?,
            l_action: f(1)?,
            l_align: f(2)?,
            combined: f(3)?,
            lr: f(4)?,
            ms: f(5)?,
        })
    }
}

const STEP_RECORD: &str = "opt.step";
const FIRST_PREFIX: &str = "opt.m.";
const SECOND_PREFIX: &str = "opt.v.";

/// Parameters whose names carry the projection head prefix.
fn is_alignment_param(name: &str) -> bool {
    name.starts_with("align.")
}

pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub model: Model,
    pub opt: OptimizerState,
    demos: &'a [Demonstration],
    samples: Vec<(usize, usize)>,
    positions: Tensor,
    trainable: Vec<bool>,
}

impl<'a> Trainer<'a> {
    /// Fresh parameters drawn from the init stream. Aligned and unaligned
    /// runs with the same seed start from identical parameters.
    pub fn new(cfg: TrainConfig, demos: &'a [Demonstration]) -> Result<Self> {
        let mut rng = stream_rng(cfg.seed, Stream::Init, 0);
        let model = Model::new(cfg.model.clone(), &mut rng)?;
        let opt = OptimizerState::new(&model.params);
        Self::assemble(cfg, demos, model, opt)
    }

    /// Continues from a checkpoint written by [`Trainer::to_named`].
    pub fn resume(cfg: TrainConfig, demos: &'a [Demonstration], named: Vec<(String, Tensor)>) -> Result<Self> {
        let (model, rest) = Model::from_named(named)?;
        if model.config != cfg.model {
            return Err(Error::usage("checkpoint model shape differs from the configuration"));
        }
        let opt = optimizer_from_named(&model, rest)?;
        if opt.step as usize > cfg.total_steps {
            return Err(Error::usage(format!(
                "checkpoint is at step {} beyond total_steps {}",
                opt.step, cfg.total_steps
            )));
        }
        Self::assemble(cfg, demos, model, opt)
    }

    fn assemble(cfg: TrainConfig, demos: &'a [Demonstration], model: Model, opt: OptimizerState) -> Result<Self> {
        cfg.validate()?;
        if demos.is_empty() {
            return Err(Error::usage("training needs at least one demonstration"));
        }
        for (i, d) in demos.iter().enumerate() {
            if d.horizon() != cfg.model.horizon {
                return Err(Error::usage(format!(
                    "demonstration {i} has horizon {} but the model expects {}",
                    d.horizon(),
                    cfg.model.horizon
                )));
            }
        }
        if cfg.align_enabled && (cfg.model.teacher_grid != GRID || cfg.model.teacher_dim != TEACHER_DIM) {
            return Err(Error::usage("projection output does not match the teacher token layout"));
        }
        let samples = demos
            .iter()
            .enumerate()
            .flat_map(|(d, demo)| (0..demo.len()).map(move |t| (d, t)))
            .collect();
        let positions = positional_embedding(TEACHER_TOKENS, TEACHER_DIM)?;
        let trainable = model
            .params
            .iter()
            .map(|(_, name, _)| cfg.align_enabled || !is_alignment_param(name))
            .collect();
        Ok(Trainer {
            cfg,
            model,
            opt,
            demos,
            samples,
            positions,
            trainable,
        })
    }

    /// Number of completed optimizer steps.
    pub fn completed_steps(&self) -> usize {
        self.opt.step as usize
    }

    pub fn is_finished(&self) -> bool {
        self.completed_steps() >= self.cfg.total_steps
    }

    /// Whether parameter `id` receives updates in this run.
    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    /// One optimizer step over a batch drawn with replacement.
    pub fn train_step(&mut self) -> Result<TrainLogRecord> {
        let started = Instant::now();
        let step = self.completed_steps() + 1;
        if step > self.cfg.total_steps {
            return Err(Error::usage("training schedule already finished"));
        }
        let seed = self.cfg.seed;
        let mut data_rng = stream_rng(seed, Stream::Data, step as u64);
        let mut tau_rng = stream_rng(seed, Stream::Tau, step as u64);
        let mut noise_rng = stream_rng(seed, Stream::Noise, step as u64);
        let batch: Vec<(usize, usize)> = (0..self.cfg.batch_size)
            .map(|_| self.samples[data_rng.gen_range(0..self.samples.len())])
            .collect();

        let inv_batch = 1.0 / self.cfg.batch_size as f64;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.model.params.len()];
        let (mut sum_action, mut sum_align) = (0.0, 0.0);
        let mut tape = Tape::new();
        for (d, t) in batch {
            let demo = &self.demos[d];
            let obs = &demo.observations[t];
            let actions = demo.action_chunks[t].flat();
            let input = ModelInput::from_observation(obs);
            let ctx = self.model.understand(&mut tape, &input)?;
            let cache = self.model.context_cache(&mut tape, &ctx)?;
            let flow = make_flow_state(&actions, &mut tau_rng, &mut noise_rng);
            let noisy = tape.constant(Tensor::new(vec![actions.len() / 2, 2], flow.noisy.clone())?);
            let field = self.model.vector_field(&mut tape, noisy, flow.tau, &cache)?;
            let l_action = action_loss(&mut tape, field, &actions, &flow.noise)?;
            sum_action += tape.value(l_action).item();
            let loss = if self.cfg.align_enabled {
                let prompt = parse_task(&demo.scene.task)?;
                let teacher = teach(obs, &prompt, &demo.scene);
                let target = build_target(&teacher.z_aff, &self.positions)?;
                let projected = self.model.project(&mut tape, &ctx)?;
                let l_align = align_loss(&mut tape, projected, &target)?;
                sum_align += tape.value(l_align).item();
                combined_loss(&mut tape, l_action, l_align, self.cfg.align_weight)?
            } else {
                l_action
            };
            if !tape.value(loss).is_finite() {
                return Err(Error::Divergence { step });
            }
            let scaled = tape.scale(loss, inv_batch)?;
            let g = tape.backward(scaled).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Divergence { step },
                other => other,
            })?;
            for (id, grad) in g.params() {
                if !self.trainable[id.0] {
                    continue;
                }
                match &mut grads[id.0] {
                    Some(acc) => acc.iter_mut().zip(grad.data()).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(grad.data().to_vec()),
                }
            }
        }

        let update: Vec<(ParamId, Tensor)> = grads
            .into_iter()
            .enumerate()
            .filter_map(|(i, g)| {
                let g = g?;
                let shape = self.model.params.get(ParamId(i)).shape().to_vec();
                Some(Tensor::new(shape, g).map(|t| (ParamId(i), t)))
            })
            .collect::<Result<_>>()?;
        let lr = lr_at(step, &self.cfg)?;
        adamw_step(&mut self.model.params, &update, &mut self.opt, lr, &self.cfg)?;
        if update
            .iter()
            .any(|(id, _)| !self.model.params.get(*id).is_finite())
        {
            return Err(Error::Divergence { step });
        }

        let l_action = sum_action * inv_batch;
        let l_align = sum_align * inv_batch;
        let ms = if self.cfg.log_wall_clock {
            started.elapsed().as_secs_f64() * 1000.0
        } else {
            0.0
        };
        Ok(TrainLogRecord {
            step,
            l_action,
            l_align,
            combined: combine(l_action, l_align, self.cfg.align_weight),
            lr,
            ms,
        })
    }

    /// Model parameters, config record and optimizer moments.
    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        let mut out = self.model.to_named();
        out.push((STEP_RECORD.to_string(), Tensor::scalar(self.opt.step as f64)));
        for (id, name, _) in self.model.params.iter() {
            out.push((format!("{FIRST_PREFIX}{name}"), self.opt.first[id.0].clone()));
        }
        for (id, name, _) in self.model.params.iter() {
            out.push((format!("{SECOND_PREFIX}{name}"), self.opt.second[id.0].clone()));
        }
        out
    }
}

/// Optimizer state from the non-parameter entries of a checkpoint.
pub fn optimizer_from_named(model: &Model, rest: Vec<(String, Tensor)>) -> Result<OptimizerState> {
    let mut state = OptimizerState::new(&model.params);
    let mut step = None;
    let mut seen = vec![[false; 2]; model.params.len()];
    for (name, t) in rest {
        if name == STEP_RECORD {
            let v = t.data().first().copied().unwrap_or(-1.0);
            if t.numel() != 1 || v < 0.0 || v.fract() != 0.0 {
                return Err(Error::format(0, "malformed optimizer step record"));
            }
            step = Some(v as u64);
            continue;
        }
        let (slot, param) = if let Some(p) = name.strip_prefix(FIRST_PREFIX) {
            (0, p)
        } else if let Some(p) = name.strip_prefix(SECOND_PREFIX) {
            (1, p)
        } else {
            return Err(Error::format(0, format!("unexpected checkpoint entry `{name}`")));
        };
        let id = model
            .params
            .id(param)
            .ok_or_else(|| Error::format(0, format!("moment for unknown parameter `{param}`")))?;
        if t.shape() != model.params.get(id).shape() {
            return Err(Error::Dimension {
                op: "load_optimizer",
                left: model.params.get(id).shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
        if slot == 0 {
            state.first[id.0] = t;
        } else {
            state.second[id.0] = t;
        }
        seen[id.0][slot] = true;
    }
    let step = step.ok_or_else(|| Error::format(0, "checkpoint lacks optimizer state"))?;
    if seen.iter().any(|s| !s[0] || !s[1]) {
        return Err(Error::format(0, "checkpoint lacks some optimizer moments"));
    }
    state.step = step;
    Ok(state)
}

/// Loads only the model from a checkpoint, ignoring optimizer entries.
pub fn model_from_checkpoint(named: Vec<(String, Tensor)>) -> Result<Model> {
    let (model, rest) = Model::from_named(named)?;
    optimizer_from_named(&model, rest)?;
    Ok(model)
}

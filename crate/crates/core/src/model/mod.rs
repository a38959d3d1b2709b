//! The policy: an understanding expert producing the multimodal context and
//! a flow-matching action expert, plus the alignment projection head whose
//! parameters share the same table.

pub mod action;
pub mod checkpoint;
pub mod flow;
pub(crate) mod layers;
pub mod params;
pub mod understanding;

use rand::{Rng, SeedableRng};

use crate::align::ProjectionMlp;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::teacher::TEACHER_DIM;
use crate::world::{
    ActionChunk, Observation, DEFAULT_HORIZON, FEATURES, GRID, INSTRUCTION_LEN, VOCAB_SIZE,
};

pub use action::ContextCache;
pub use flow::{action_loss, euler_path, integrate_euler, make_flow_state, sample_chunk, FlowState, ACTION_CLAMP};
pub use layers::sinusoid;
pub use params::ParamStore;
pub use understanding::{state_bins, Context};

use action::ActionExpert;
use understanding::UnderstandingExpert;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub grid: usize,
    pub features: usize,
    pub vocab: usize,
    pub instruction_len: usize,
    pub state_bins: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub align_layer: usize,
    pub mlp_hidden: usize,
    pub horizon: usize,
    pub action_width: usize,
    pub action_heads: usize,
    pub action_layers: usize,
    pub action_mlp_hidden: usize,
    pub denoise_steps: usize,
    pub teacher_grid: usize,
    pub teacher_dim: usize,
    pub projection_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let layers = 4;
        ModelConfig {
            grid: GRID,
            features: FEATURES,
            vocab: VOCAB_SIZE,
            instruction_len: INSTRUCTION_LEN,
            state_bins: 16,
            width: 64,
            heads: 4,
            layers,
            align_layer: alignment_layer(layers),
            mlp_hidden: 128,
            horizon: DEFAULT_HORIZON,
            action_width: 64,
            action_heads: 4,
            action_layers: 3,
            action_mlp_hidden: 128,
            denoise_steps: 10,
            teacher_grid: GRID,
            teacher_dim: TEACHER_DIM,
            projection_hidden: 64,
        }
    }
}

/// `⌈2L/3⌉`, the intermediate-deep layer whose features are aligned.
pub fn alignment_layer(layers: usize) -> usize {
    (2 * layers).div_ceil(3)
}

impl ModelConfig {
    /// Two-layer model over a 2×2 grid, sized for finite-difference checks.
    /// The teacher grid is 3×3 so the projection path exercises resizing.
    pub fn tiny() -> Self {
        ModelConfig {
            grid: 2,
            features: 3,
            vocab: 6,
            instruction_len: 2,
            state_bins: 4,
            width: 8,
            heads: 2,
            layers: 2,
            align_layer: 1,
            mlp_hidden: 8,
            horizon: 2,
            action_width: 8,
            action_heads: 2,
            action_layers: 1,
            action_mlp_hidden: 8,
            denoise_steps: 3,
            teacher_grid: 3,
            teacher_dim: 4,
            projection_hidden: 6,
        }
    }

    pub fn visual_tokens(&self) -> usize {
        self.grid * self.grid
    }

    pub fn context_tokens(&self) -> usize {
        self.visual_tokens() + self.instruction_len + 1
    }

    pub fn validate(&self) -> Result<()> {
        let problems = [
            (self.align_layer == 0 || self.align_layer > self.layers, "alignment layer outside 1..=layers"),
            (self.heads == 0 || self.width % self.heads != 0, "width not divisible by heads"),
            (
                self.action_heads == 0 || self.action_width % self.action_heads != 0,
                "action width not divisible by heads",
            ),
            (self.denoise_steps == 0, "denoise steps must be at least 1"),
            (self.width < 2 || self.action_width < 2, "widths must be at least 2"),
            (self.teacher_dim % 2 != 0, "teacher dim must be even"),
            (self.state_bins == 0 || self.horizon == 0, "empty state bins or horizon"),
        ];
        for (bad, msg) in problems {
            if bad {
                return Err(Error::usage(format!("invalid model config: {msg}")));
            }
        }
        Ok(())
    }

    fn fields(&self) -> [usize; 19] {
        [
            self.grid,
            self.features,
            self.vocab,
            self.instruction_len,
            self.state_bins,
            self.width,
            self.heads,
            self.layers,
            self.align_layer,
            self.mlp_hidden,
            self.horizon,
            self.action_width,
            self.action_heads,
            self.action_layers,
            self.action_mlp_hidden,
            self.denoise_steps,
            self.teacher_grid,
            self.teacher_dim,
            self.projection_hidden,
        ]
    }

    pub fn to_tensor(&self) -> Tensor {
        let v: Vec<f64> = self.fields().iter().map(|&x| x as f64).collect();
        Tensor::new(vec![v.len()], v).expect("1-D")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let d = t.data();
        if d.len() != 19 || d.iter().any(|v| *v < 0.0 || v.fract() != 0.0) {
            return Err(Error::format(0, "malformed model config record"));
        }
        let f = |i: usize| d[i] as usize;
        let cfg = ModelConfig {
            grid: f(0),
            features: f(1),
            vocab: f(2),
            instruction_len: f(3),
            state_bins: f(4),
            width: f(5),
            heads: f(6),
            layers: f(7),
            align_layer: f(8),
            mlp_hidden: f(9),
            horizon: f(10),
            action_width: f(11),
            action_heads: f(12),
            action_layers: f(13),
            action_mlp_hidden: f(14),
            denoise_steps: f(15),
            teacher_grid: f(16),
            teacher_dim: f(17),
            projection_hidden: f(18),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Model-facing view of one observation.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    /// `N_v × features` grid features.
    pub visual: Tensor,
    pub tokens: Vec<usize>,
    pub state: [f64; 3],
}

impl ModelInput {
    pub fn from_observation(obs: &Observation) -> Self {
        ModelInput {
            visual: Tensor::new(vec![GRID * GRID, FEATURES], obs.visual_grid.clone())
                .expect("observation grid size"),
            tokens: obs.instruction_tokens.iter().map(|&t| t as usize).collect(),
            state: obs.robot_state,
        }
    }
}

/// Policy parameters and their structure.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    understanding: UnderstandingExpert,
    action: ActionExpert,
    projection: ProjectionMlp,
}

pub const CONFIG_RECORD: &str = "config.model";

impl Model {
    /// Draws all parameters, projection head included, from `rng` in a
    /// fixed order.
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let understanding = UnderstandingExpert::new(&mut params, rng, &config);
        let action = ActionExpert::new(&mut params, rng, &config);
        let projection = ProjectionMlp::new(
            &mut params,
            rng,
            config.width,
            config.projection_hidden,
            config.teacher_dim,
        );
        Ok(Model {
            config,
            params,
            understanding,
            action,
            projection,
        })
    }

    pub fn projection(&self) -> &ProjectionMlp {
        &self.projection
    }

    /// Token sequence for one input.
    pub fn embed_inputs(&self, t: &mut Tape, input: &ModelInput) -> Result<Var> {
        self.understanding.embed(t, &self.params, &self.config, input)
    }

    pub fn understand(&self, t: &mut Tape, input: &ModelInput) -> Result<Context> {
        self.understanding.forward(t, &self.params, &self.config, input)
    }

    pub fn context_cache(&self, t: &mut Tape, ctx: &Context) -> Result<ContextCache> {
        self.action.cache(t, &self.params, ctx.tokens)
    }

    pub fn vector_field(&self, t: &mut Tape, noisy: Var, tau: f64, cache: &ContextCache) -> Result<Var> {
        self.action.forward(t, &self.params, noisy, tau, cache)
    }

    /// Projects layer-`m` visual features into the teacher space.
    pub fn project(&self, t: &mut Tape, ctx: &Context) -> Result<Var> {
        crate::align::project_features(
            t,
            &self.params,
            &self.projection,
            ctx.visual_at_align_layer,
            self.config.teacher_grid,
        )
    }

    /// Euler sampling of an action chunk from noise drawn out of `rng`.
    pub fn sample_actions(&self, input: &ModelInput, rng: &mut impl Rng, steps: usize) -> Result<ActionChunk> {
        if steps == 0 {
            return Err(Error::usage("denoising needs at least one step"));
        }
        let mut t = Tape::new();
        let ctx = self.understand(&mut t, input)?;
        let cache = self.context_cache(&mut t, &ctx)?;
        let h = self.config.horizon;
        let out = flow::sample_chunk(rng, h, steps, |a, tau| {
            let noisy = t.constant(Tensor::new(vec![h, 2], a.to_vec())?);
            let v = self.vector_field(&mut t, noisy, tau, &cache)?;
            Ok(t.value(v).data().to_vec())
        })?;
        Ok(ActionChunk::from_flat(&out))
    }

    /// Parameters plus the config record, in table order.
    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![(CONFIG_RECORD.to_string(), self.config.to_tensor())];
        out.extend(self.params.iter().map(|(_, n, t)| (n.to_string(), t.clone())));
        out
    }

    /// Rebuilds a model from named tensors; entries not naming a parameter
    /// or the config record are returned untouched.
    pub fn from_named(named: Vec<(String, Tensor)>) -> Result<(Self, Vec<(String, Tensor)>)> {
        let cfg = named
            .iter()
            .find(|(n, _)| n == CONFIG_RECORD)
            .ok_or_else(|| Error::format(0, "checkpoint lacks a model config record"))?;
        let config = ModelConfig::from_tensor(&cfg.1)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::new(config, &mut rng)?;
        let mut params = Vec::new();
        let mut rest = Vec::new();
        for (n, t) in named {
            if n == CONFIG_RECORD {
                continue;
            }
            if model.params.id(&n).is_some() {
                params.push((n, t));
            } else {
                rest.push((n, t));
            }
        }
        if params.len() != model.params.len() {
            return Err(Error::format(
                0,
                format!("checkpoint holds {} of {} parameters", params.len(), model.params.len()),
            ));
        }
        model.params.load_from(&params)?;
        Ok((model, rest))
    }
}

//! Evaluation: saliency metrics, heatmap export, closed-loop success rates and
//! feature concentration.

pub mod concentration;
pub mod episode;
pub mod pgm;
pub mod report;
pub mod saliency;

pub use concentration::{concentration_from_similarity, concentration_score, similarity_map};
pub use episode::{
    evaluate_model, run_episode, run_trials, Episode, ExpertPolicy, ModelPolicy, Policy, RandomPolicy,
    DEFAULT_EVAL_SEED,
};
pub use pgm::{encode_pgm, export_heatmap};
pub use report::{EvalReport, EvalRow, ALL_TASKS, REPORT_HEADER};
pub use saliency::{fixation_map, kld, nss, score_heat, sim, SaliencyScores};

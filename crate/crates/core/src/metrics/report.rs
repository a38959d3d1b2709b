//! Success-rate reports and their CSV form.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::world::{supported_tasks, Difficulty, Scene};

pub const REPORT_HEADER: &str = "task,difficulty,trials,successes,rate";
/// Task column of the per-difficulty aggregate rows.
pub const ALL_TASKS: &str = "all";

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub task: String,
    pub difficulty: Difficulty,
    pub trials: usize,
    pub successes: usize,
}

impl EvalRow {
    pub fn rate(&self) -> f64 {
        self.successes as f64 / self.trials as f64
    }

    /// One row per task present in `outcomes`, in the fixed task order,
    /// followed by the aggregate row.
    pub fn tally(difficulty: Difficulty, outcomes: &[(Scene, bool)]) -> Vec<EvalRow> {
        let mut rows = Vec::new();
        for (verb, object) in supported_tasks() {
            let hits: Vec<bool> = outcomes
                .iter()
                .filter(|(s, _)| s.task.verb == verb && s.task.object == object)
                .map(|(_, ok)| *ok)
                .collect();
            if hits.is_empty() {
                continue;
            }
            rows.push(EvalRow {
                task: format!("{}_{}", verb.name(), object.name()),
                difficulty,
                trials: hits.len(),
                successes: hits.iter().filter(|&&ok| ok).count(),
            });
        }
        rows.push(EvalRow {
            task: ALL_TASKS.to_string(),
            difficulty,
            trials: outcomes.len(),
            successes: outcomes.iter().filter(|(_, ok)| *ok).count(),
        });
        rows
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Scene seeds `seed_start .. seed_start + trials` per difficulty.
    pub seed_start: u64,
    pub trials: usize,
}

impl EvalReport {
    pub fn new(rows: Vec<EvalRow>, seed_start: u64, trials: usize) -> Result<Self> {
        if trials == 0 || rows.iter().any(|r| r.trials == 0) {
            return Err(Error::usage("evaluation needs at least one trial"));
        }
        Ok(EvalReport {
            rows,
            seed_start,
            trials,
        })
    }

    /// Aggregate success rate for one difficulty.
    pub fn rate(&self, difficulty: Difficulty) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.task == ALL_TASKS && r.difficulty == difficulty)
            .map(EvalRow::rate)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.task,
                r.difficulty.name(),
                r.trials,
                r.successes,
                r.rate()
            );
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Parses the CSV form. Seed range and trial count are not part of it
    /// and are taken from the aggregate rows.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(REPORT_HEADER) {
            return Err(Error::format(0, "report lacks its header"));
        }
        let mut rows = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::format(0, format!("malformed report row `{line}`"));
            if f.len() != 5 {
                return Err(bad());
            }
            let row = EvalRow {
                task: f[0].to_string(),
                difficulty: f[1].parse().map_err(|_| bad())?,
                trials: f[2].parse().map_err(|_| bad())?,
                successes: f[3].parse().map_err(|_| bad())?,
            };
            if row.trials == 0 || row.successes > row.trials {
                return Err(bad());
            }
            rows.push(row);
        }
        let trials = rows
            .iter()
            .find(|r| r.task == ALL_TASKS)
            .map_or(0, |r| r.trials);
        EvalReport::new(rows, 0, trials)
    }
}

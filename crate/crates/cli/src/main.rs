//! `affalign`: generate demonstrations, train aligned or ablated policies,
//! evaluate them, check gradients and export heatmaps.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use affalign::metrics::{
    concentration_from_similarity, evaluate_model, export_heatmap, score_heat, similarity_map, DEFAULT_EVAL_SEED,
};
use affalign::model::checkpoint::{read_tensors, write_tensors};
use affalign::model::Model;
use affalign::teacher::{parse_task, perturb_heat, teach};
use affalign::train::{model_from_checkpoint, TrainConfig, Trainer, LOG_HEADER};
use affalign::verify::{check_all_paths, DEFAULT_SEEDS, DEFAULT_TOLERANCE};
use affalign::world::{
    affordance_ground_truth, generate_scene, generate_scene_from, read_dataset, record_demonstration, render,
    target_part_mask, write_dataset, Difficulty, RobotState, DEFAULT_HORIZON, GRID,
};
use affalign::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "affalign", version, about = "Affordance-aligned flow-matching policies on a synthetic desk")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Level {
    Easy,
    Hard,
}

impl From<Level> for Difficulty {
    fn from(l: Level) -> Self {
        match l {
            Level::Easy => Difficulty::Easy,
            Level::Hard => Difficulty::Hard,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EvalLevel {
    Easy,
    Hard,
    Both,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Record expert demonstrations into a dataset file.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
        #[arg(long, value_enum, default_value = "easy")]
        difficulty: Level,
        /// Scene seed of the first demonstration; later ones count up.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_HORIZON)]
        horizon: usize,
    },
    /// Train a policy and write its checkpoint and loss log.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// `key = value` file; defaults apply to absent keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Train without the alignment loss.
        #[arg(long)]
        no_align: bool,
        /// Loss log path; defaults to the checkpoint path with `.csv` appended.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Closed-loop success rates of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, value_enum, default_value = "both")]
        difficulty: EvalLevel,
        /// Scene seed of the first trial.
        #[arg(long, default_value_t = DEFAULT_EVAL_SEED)]
        seed: u64,
        /// CSV destination; printed to stdout when absent.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference check of every loss path on a tiny model.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
        #[arg(long, default_value_t = DEFAULT_SEEDS)]
        seeds: usize,
    },
    /// Teacher, concentration and difference heatmaps for one scene.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene_seed: u64,
        #[arg(long, value_enum, default_value = "hard")]
        difficulty: Level,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Saliency metrics of (optionally perturbed) teacher heat against truth.
    TeacherEval {
        #[arg(long, default_value_t = 100)]
        scenes: usize,
        /// Standard deviation of additive Gaussian noise on the teacher heat.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "easy")]
        difficulty: Level,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

/// 1 usage, 2 data or format, 3 numerical failure.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config { .. } | Error::UnsupportedTask { .. } | Error::Vocabulary { .. } => 1,
        Error::Format { .. } | Error::Io(_) | Error::Generation { .. } | Error::Dimension { .. } => 2,
        Error::Divergence { .. }
        | Error::NonFinite { .. }
        | Error::Degenerate { .. }
        | Error::DegenerateNorm { .. }
        | Error::Determinism { .. } => 3,
    }
}

/// Failure reported after a command ran to completion.
struct Failed(String);

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn gen_data(out: &Path, episodes: usize, difficulty: Difficulty, seed: u64, horizon: usize) -> Result<()> {
    if episodes == 0 {
        return Err(usage("--episodes must be at least 1"));
    }
    if horizon == 0 {
        return Err(usage("--horizon must be at least 1"));
    }
    let demos = (0..episodes as u64)
        .map(|i| Ok(record_demonstration(&generate_scene(seed + i, difficulty)?, horizon)))
        .collect::<Result<Vec<_>>>()?;
    write_dataset(&demos, out)?;
    let hard = demos.iter().filter(|d| d.scene.difficulty == Difficulty::Hard).count();
    println!(
        "wrote {} demonstrations to {}: easy {}, hard {}",
        demos.len(),
        out.display(),
        demos.len() - hard,
        hard
    );
    Ok(())
}

fn train(
    data: &Path,
    config: Option<&Path>,
    out: &Path,
    no_align: bool,
    log: Option<&Path>,
    resume: Option<&Path>,
) -> Result<()> {
    let demos = read_dataset(data)?;
    let mut cfg = match config {
        Some(p) => TrainConfig::read(p)?,
        None => TrainConfig::default(),
    };
    if no_align {
        cfg.align_enabled = false;
    }
    let every = cfg.checkpoint_every;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg, &demos, read_tensors(p)?)?,
        None => Trainer::new(cfg, &demos)?,
    };
    let log_path = log.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".csv");
        PathBuf::from(s)
    });
    let mut log = BufWriter::new(File::create(&log_path)?);
    writeln!(log, "{LOG_HEADER}")?;
    let mut last = None;
    while !trainer.is_finished() {
        let record = trainer.train_step()?;
        writeln!(log, "{}", record.csv_line())?;
        if every > 0 && record.step % every == 0 {
            let mut snap = out.as_os_str().to_owned();
            snap.push(format!(".step{}", record.step));
            write_tensors(&trainer.to_named(), Path::new(&snap))?;
        }
        last = Some(record);
    }
    log.flush()?;
    write_tensors(&trainer.to_named(), out)?;
    match last {
        Some(r) => println!(
            "trained to step {}: l_action {:.6}, l_align {:.6}, combined {:.6}; checkpoint {}, log {}",
            r.step,
            r.l_action,
            r.l_align,
            r.combined,
            out.display(),
            log_path.display()
        ),
        None => println!("checkpoint already at step {}; rewrote {}", trainer.completed_steps(), out.display()),
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<Model> {
    model_from_checkpoint(read_tensors(path)?)
}

fn eval(checkpoint: &Path, trials: usize, level: EvalLevel, seed: u64, report: Option<&Path>) -> Result<()> {
    if trials == 0 {
        return Err(usage("--trials must be at least 1"));
    }
    let model = load_model(checkpoint)?;
    let difficulties: &[Difficulty] = match level {
        EvalLevel::Easy => &[Difficulty::Easy],
        EvalLevel::Hard => &[Difficulty::Hard],
        EvalLevel::Both => &[Difficulty::Easy, Difficulty::Hard],
    };
    let result = evaluate_model(&model, difficulties, trials, seed)?;
    write_or_print(report, &result.to_csv())?;
    for &d in difficulties {
        let rate = result.rate(d).unwrap_or(0.0);
        eprintln!("{} success rate {rate} over {trials} trials", d.name());
    }
    Ok(())
}

fn grad_check(seed: u64, tolerance: f64, seeds: usize) -> Result<std::result::Result<(), Failed>> {
    if !(tolerance > 0.0) {
        return Err(usage("--tolerance must be positive"));
    }
    let reports = check_all_paths(seed, seeds)?;
    let mut failed = Vec::new();
    for (path, r) in &reports {
        let ok = r.max_rel_error <= tolerance;
        println!(
            "{} worst_rel_error={:e} coordinates={} {}",
            path.name(),
            r.max_rel_error,
            r.coordinates,
            if ok { "pass" } else { "FAIL" }
        );
        if !ok {
            failed.push(path.name());
        }
    }
    Ok(if failed.is_empty() {
        Ok(())
    } else {
        Err(Failed(format!("gradient check above tolerance {tolerance:e}: {}", failed.join(", "))))
    })
}

fn visualize(checkpoint: &Path, scene_seed: u64, difficulty: Difficulty, out_dir: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    let scene = generate_scene(scene_seed, difficulty)?;
    let obs = render(&scene, &RobotState::new(scene.gripper_start));
    let teacher = teach(&obs, &parse_task(&scene.task)?, &scene).m_aff;
    let similarity = similarity_map(&model, &scene)?;
    if similarity.len() != GRID * GRID {
        return Err(usage("model projection grid differs from the world grid"));
    }
    let mapped: Vec<f64> = similarity.iter().map(|s| (s + 1.0) / 2.0).collect();
    let difference: Vec<f64> = mapped.iter().zip(&teacher).map(|(m, t)| (m - t).abs()).collect();
    let mask = target_part_mask(&scene);
    let score = concentration_from_similarity(&similarity, &mask)?;
    let area = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;

    std::fs::create_dir_all(out_dir)?;
    let stem = format!("scene{scene_seed}");
    export_heatmap(&teacher, GRID, GRID, &out_dir.join(format!("{stem}_teacher.pgm")))?;
    export_heatmap(&mapped, GRID, GRID, &out_dir.join(format!("{stem}_concentration.pgm")))?;
    export_heatmap(&difference, GRID, GRID, &out_dir.join(format!("{stem}_difference.pgm")))?;
    let csv = format!(
        "scene_seed,difficulty,task,concentration_score,part_area_ratio\n{scene_seed},{},{},{score},{area}\n",
        difficulty.name(),
        scene.task.name()
    );
    std::fs::write(out_dir.join(format!("{stem}_scores.csv")), csv)?;
    println!(
        "scene {scene_seed} ({}): concentration {score:.4} vs part area {area:.4}; wrote {}",
        scene.task.name(),
        out_dir.display()
    );
    Ok(())
}

fn teacher_eval(scenes: usize, noise: f64, seed: u64, difficulty: Difficulty, report: Option<&Path>) -> Result<()> {
    if scenes == 0 {
        return Err(usage("--scenes must be at least 1"));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(usage("--noise must be a nonnegative number"));
    }
    let mut csv = String::from("scene_seed,kld,sim,nss\n");
    let (mut kld, mut sim, mut nss) = (0.0, 0.0, 0.0);
    for i in 0..scenes as u64 {
        let scene_seed = seed + i;
        let scene = generate_scene_from(scene_seed, difficulty);
        let obs = render(&scene, &RobotState::new(scene.gripper_start));
        let prediction = teach(&obs, &parse_task(&scene.task)?, &scene).m_aff;
        let prediction = perturb_heat(&prediction, noise, scene_seed);
        let s = score_heat(&prediction, &affordance_ground_truth(&scene))?;
        csv.push_str(&format!("{scene_seed},{},{},{}\n", s.kld, s.sim, s.nss));
        kld += s.kld;
        sim += s.sim;
        nss += s.nss;
    }
    write_or_print(report, &csv)?;
    let n = scenes as f64;
    eprintln!(
        "teacher over {scenes} scenes at noise {noise}: mean kld {} sim {} nss {}",
        kld / n,
        sim / n,
        nss / n
    );
    Ok(())
}

fn run(cli: Cli) -> Result<std::result::Result<(), Failed>> {
    match cli.command {
        Command::GenData {
            out,
            episodes,
            difficulty,
            seed,
            horizon,
        } => gen_data(&out, episodes, difficulty.into(), seed, horizon)?,
        Command::Train {
            data,
            config,
            out,
            no_align,
            log,
            resume,
        } => train(&data, config.as_deref(), &out, no_align, log.as_deref(), resume.as_deref())?,
        Command::Eval {
            checkpoint,
            trials,
            difficulty,
            seed,
            report,
        } => eval(&checkpoint, trials, difficulty, seed, report.as_deref())?,
        Command::GradCheck { seed, tolerance, seeds } => return grad_check(seed, tolerance, seeds),
        Command::Visualize {
            checkpoint,
            scene_seed,
            difficulty,
            out_dir,
        } => visualize(&checkpoint, scene_seed, difficulty.into(), &out_dir)?,
        Command::TeacherEval {
            scenes,
            noise,
            seed,
            difficulty,
            report,
        } => teacher_eval(scenes, noise, seed, difficulty.into(), report.as_deref())?,
    }
    Ok(Ok(()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(Failed(msg))) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

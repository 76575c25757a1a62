//! Experiment orchestration: checkpoints, single runs, the two ablation
//! sweeps, CSV persistence and reports.

mod config;
mod gradcheck;
mod record;
mod report;
mod svg;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::attack::{pgd_attack, pgd_physical, AttackKind, Perturbation};
use crate::error::{CoreError, Result};
use crate::metrics::{evaluate, referent_ground_truth, referring_accuracy, AttackWindow};
use crate::model::{load_checkpoint, save_checkpoint, RmotModel};
use crate::scenegen::{gen_query, gen_scene, Frame};
use crate::trainer::{train, TrainingExample};

pub use config::{ExperimentConfig, Mode, ModelSection, RunSection, SceneSection, SweepSection};
pub use gradcheck::{gradient_suite, GradientCheck, GRADIENT_TOLERANCE};
pub use record::{aggregate, csv_header, read_rows, write_rows, write_summary, RunRecord, Summary, CSV_HEADER};
pub use report::{report, ReportSummary};

/// Association threshold on referring scores.
pub const SCORE_THRESHOLD: f64 = 0.5;

/// Generates the training scenes of `cfg`.
pub fn training_set(cfg: &ExperimentConfig) -> Result<Vec<TrainingExample>> {
    let params = cfg.scene_params();
    (0..cfg.scene.train_scenes as u64)
        .map(|i| {
            let seed = cfg.scene.train_seed + i;
            let scene = gen_scene(seed, &params)?;
            let query = gen_query(&scene, seed)?;
            Ok(TrainingExample { scene, query })
        })
        .collect()
}

/// Trains a fresh model from `cfg` and writes it to the checkpoint cache.
pub fn train_model(cfg: &ExperimentConfig, log: Option<&mut dyn std::io::Write>) -> Result<(RmotModel, PathBuf)> {
    let mut model = RmotModel::new(cfg.model_config()?, cfg.model.init_seed)?;
    train(&mut model, &training_set(cfg)?, &cfg.train, log)?;
    let path = cfg.checkpoint_path();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    save_checkpoint(&model, &path)?;
    Ok((model, path))
}

/// Loads the cached checkpoint for `cfg`, training one first when allowed.
pub fn obtain_model(cfg: &ExperimentConfig) -> Result<RmotModel> {
    let path = cfg.checkpoint_path();
    if path.exists() {
        let model = load_checkpoint(&path)?;
        if *model.config() != cfg.model_config()? {
            return Err(CoreError::Config(format!(
                "checkpoint {} does not match the model section",
                path.display()
            )));
        }
        return Ok(model);
    }
    if !cfg.run.train {
        return Err(CoreError::MissingCheckpoint(path));
    }
    Ok(train_model(cfg, None)?.0)
}

/// Clean and attacked evaluation of one seed with an already trained model.
pub fn execute(cfg: &ExperimentConfig, model: &RmotModel, seed: u64) -> Result<(RunRecord, Perturbation)> {
    let scene = gen_scene(seed, &cfg.scene_params())?;
    let query = gen_query(&scene, seed)?;
    let gt = referent_ground_truth(&scene, &query);
    let a = &cfg.attack;
    let t_mem = model.config().mem_len;
    let window = AttackWindow { start: a.t_attack, end: a.t_attack + a.delta_attack, horizon: t_mem };
    let post = window.end..window.end + t_mem;

    let clean = model.track_sequence(&scene.frames, &query.tokens, SCORE_THRESHOLD)?;
    let (perturbation, trace) = match cfg.run.kind {
        AttackKind::None => (Perturbation::none(), Vec::new()),
        AttackKind::Pixel => {
            let o = pgd_attack(model, &scene, &query, a)?;
            (o.perturbation, o.trace)
        }
        kind => {
            let o = pgd_physical(model, &scene, &query, kind, a)?;
            (o.perturbation, o.trace)
        }
    };
    let frames: Vec<Frame> = perturbation.apply(&scene.frames)?;
    let attacked = if cfg.run.kind == AttackKind::None {
        clean.clone()
    } else {
        model.track_sequence(&frames, &query.tokens, SCORE_THRESHOLD)?
    };

    let record = RunRecord {
        config_hash: cfg.hash(),
        seed,
        attack_kind: cfg.run.kind,
        delta_attack: a.delta_attack,
        buffer_t: t_mem,
        clean: evaluate(&gt, &clean, Some(window)),
        attacked: evaluate(&gt, &attacked, Some(window)),
        clean_refer_acc: 100.0 * referring_accuracy(&scene, &query, &clean, post.clone()),
        attacked_refer_acc: 100.0 * referring_accuracy(&scene, &query, &attacked, post),
        trace,
    };
    Ok((record, perturbation))
}

/// File stem of a run inside `<out>/runs`.
pub fn run_stem(r: &RunRecord) -> String {
    format!("{}_{}_d{}_t{}_s{}", r.config_hash, r.attack_kind, r.delta_attack, r.buffer_t, r.seed)
}

/// Writes the run's CSV row, its PGD trace and its perturbation.
pub fn persist(out: &Path, record: &RunRecord, perturbation: &Perturbation) -> Result<()> {
    let dir = out.join("runs");
    fs::create_dir_all(&dir)?;
    let stem = run_stem(record);
    write_rows(&dir.join(format!("{stem}.csv")), std::slice::from_ref(record))?;
    let mut trace = String::from("iteration,loss\n");
    for (i, d) in record.trace.iter().enumerate() {
        trace.push_str(&format!("{i},{d:.9}\n"));
    }
    fs::write(dir.join(format!("{stem}.trace")), trace)?;
    perturbation.save(&dir.join(format!("{stem}.pert")))?;
    Ok(())
}

/// Trains or loads the model, evaluates one seed and persists the result.
pub fn run_single(cfg: &ExperimentConfig, seed: u64) -> Result<RunRecord> {
    cfg.validate(Mode::Single)?;
    let model = obtain_model(cfg)?;
    let (record, perturbation) = execute(cfg, &model, seed)?;
    persist(&cfg.run.out, &record, &perturbation)?;
    Ok(record)
}

/// Evaluates every configured seed in parallel with one shared model.
pub fn run_seeds(cfg: &ExperimentConfig, model: &RmotModel) -> Result<Vec<RunRecord>> {
    cfg.run
        .seeds
        .par_iter()
        .map(|&seed| {
            let (record, perturbation) = execute(cfg, model, seed)?;
            persist(&cfg.run.out, &record, &perturbation)?;
            Ok(record)
        })
        .collect()
}

/// Per-seed rows for each attacked-frame count, in ascending order.
pub fn sweep_delta(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    cfg.validate(Mode::SweepDelta)?;
    let model = obtain_model(cfg)?;
    let mut rows = Vec::new();
    for &delta in &cfg.sweep.delta_attack {
        let mut c = cfg.clone();
        c.attack.delta_attack = delta;
        rows.extend(run_seeds(&c, &model)?);
    }
    fs::create_dir_all(&cfg.run.out)?;
    write_rows(&cfg.run.out.join("sweep_delta.csv"), &rows)?;
    write_summary(&cfg.run.out.join("sweep_delta_summary.csv"), &aggregate(&rows))?;
    Ok(rows)
}

/// One aggregated row per buffer size, each from its own trained model.
pub fn sweep_buffer(cfg: &ExperimentConfig) -> Result<Vec<Summary>> {
    cfg.validate(Mode::SweepBuffer)?;
    let mut per_seed = Vec::new();
    for &t in &cfg.sweep.buffer {
        let mut c = cfg.clone();
        c.model.mem_len = t;
        let model = obtain_model(&c)?;
        per_seed.extend(run_seeds(&c, &model)?);
    }
    let rows = aggregate(&per_seed);
    fs::create_dir_all(&cfg.run.out)?;
    write_rows(&cfg.run.out.join("sweep_buffer_runs.csv"), &per_seed)?;
    write_summary(&cfg.run.out.join("sweep_buffer.csv"), &rows)?;
    Ok(rows)
}

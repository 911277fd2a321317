//! The four subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use tangled::corpus::{generate, read_dataset, write_dataset, Dataset, Split};
use tangled::eval::{localization_accuracy, retrieval_report, score_pairs, Narration, Report};
use tangled::fsutil::write_atomic;
use tangled::model::{load_checkpoint, save_checkpoint, ModelParams};
use tangled::numerics::Rng;
use tangled::objectives::pretrain as run_pretrain;
use tangled::{Error, Result};

use crate::config::{check_model_against, RunConfig};

pub const TRAIN_FILE: &str = "train.abtd";
pub const VAL_FILE: &str = "val.abtd";
pub const CHECKPOINT_FILE: &str = "checkpoint.abtc";
pub const LOSS_LOG_FILE: &str = "loss.log";

fn ensure_dir(dir: &Path) -> Result<()> {
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn load_split(cfg: &RunConfig, file: &str) -> Result<Dataset> {
    let path = cfg.data_dir.join(file);
    read_dataset(&path).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

/// Writes `train.abtd` and `val.abtd`; returns a one-line summary.
pub fn gen_data(cfg: &RunConfig) -> Result<String> {
    let spec = cfg.world_spec()?;
    let ds = generate(&spec)?;
    let dir = cfg.out_dir.clone().unwrap_or_else(|| cfg.data_dir.clone());
    ensure_dir(&dir)?;
    let train = ds.subset(Split::Train);
    let val = ds.subset(Split::Val);
    write_dataset(&train, &dir.join(TRAIN_FILE))?;
    write_dataset(&val, &dir.join(VAL_FILE))?;
    Ok(format!("train={} val={} dir={}", train.len(), val.len(), dir.display()))
}

fn pretrain_outputs(cfg: &RunConfig) -> (PathBuf, PathBuf) {
    let checkpoint = match &cfg.out_dir {
        Some(d) => d.join(CHECKPOINT_FILE),
        None => cfg.checkpoint.clone(),
    };
    let log = checkpoint.with_file_name(LOSS_LOG_FILE);
    (checkpoint, log)
}

/// Trains on `train.abtd`, writing the checkpoint and one loss line per step.
pub fn pretrain(cfg: &RunConfig) -> Result<String> {
    let seed = cfg.require_seed()?;
    let data = load_split(cfg, TRAIN_FILE)?;
    cfg.check_world(&data.world)?;
    let model = cfg.model_config(&data.world)?;
    let train = data.samples(Split::Train);
    let (ckpt, log) = pretrain_outputs(cfg);
    if let Some(dir) = ckpt.parent() {
        ensure_dir(dir)?;
    }
    let master = Rng::new(seed);
    let mut params = ModelParams::init(&model, &mut master.fork(1))?;
    let mut history = Vec::new();
    write_atomic(&log, |w| {
        let mut io_err = None;
        history = run_pretrain(&mut params, &train, &cfg.train, &master.fork(2), |step, loss| {
            if io_err.is_none() {
                io_err = writeln!(w, "{}", loss.log_line(step)).err();
            }
        })?;
        io_err.map_or(Ok(()), |e| Err(e.into()))
    })?;
    save_checkpoint(&params, &ckpt)?;
    let mean = |xs: &[tangled::objectives::LossBreakdown]| {
        if xs.is_empty() {
            f64::NAN
        } else {
            xs.iter().map(|l| l.total).sum::<f64>() / xs.len() as f64
        }
    };
    let n = history.len();
    Ok(format!(
        "steps={n} first100={:.6} last100={:.6} checkpoint={}",
        mean(&history[..n.min(100)]),
        mean(&history[n.saturating_sub(100)..]),
        ckpt.display()
    ))
}

fn load_for_eval(cfg: &RunConfig) -> Result<(ModelParams, Dataset)> {
    let params = load_checkpoint(&cfg.checkpoint)?;
    let data = load_split(cfg, VAL_FILE)?;
    check_model_against(&params.config, &data.world)?;
    Ok((params, data))
}

fn emit(cfg: &RunConfig, report: &Report, file: &str) -> Result<()> {
    if let Some(dir) = &cfg.out_dir {
        ensure_dir(dir)?;
        let text = report.render();
        write_atomic(&dir.join(file), |w| Ok(w.write_all(text.as_bytes())?))?;
    }
    Ok(())
}

/// Text-to-video retrieval over the first `gallery_size` validation samples.
pub fn eval_retrieval(cfg: &RunConfig) -> Result<Report> {
    let (params, data) = load_for_eval(cfg)?;
    let val = data.samples(Split::Val);
    let g = cfg.gallery_size.min(val.len());
    if g == 0 {
        return Err(Error::Validation("validation split is empty".into()));
    }
    let gallery = &val[..g];
    let texts: Vec<Narration> = gallery.iter().map(Narration::of).collect();
    let report = retrieval_report(&score_pairs(&params, &texts, gallery)?)?;
    emit(cfg, &report, "retrieval.txt")?;
    Ok(report)
}

/// Step localization over every clip of the validation split.
pub fn eval_localize(cfg: &RunConfig) -> Result<Report> {
    let (params, data) = load_for_eval(cfg)?;
    let val = data.samples(Split::Val);
    if val.is_empty() {
        return Err(Error::Validation("validation split is empty".into()));
    }
    let mut report = Report::default();
    report.push("localization_accuracy", localization_accuracy(&params, &data.world, &val)?);
    report.push("chance", 1.0 / data.world.num_actions as f64);
    report.push("clips", val.iter().map(|s| s.clips.len()).sum::<usize>() as f64);
    emit(cfg, &report, "localization.txt")?;
    Ok(report)
}

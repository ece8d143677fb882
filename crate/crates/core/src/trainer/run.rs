use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{file_sha256, load_checkpoint, save_checkpoint, StepRecord, TrainConfig, TrainData, TrainState};
use crate::error::{DmsnError, Result};

pub const LOG_FILE: &str = "train_log.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const FINAL_CHECKPOINT: &str = "final.dmsn";

/// One CSV row per step.
pub struct StepLog {
    writer: csv::Writer<File>,
    branches: usize,
}

impl StepLog {
    pub fn create(path: &Path, branches: usize, append: bool) -> Result<Self> {
        let exists = append && path.exists();
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| DmsnError::io(path, e))?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if !exists {
            writer.write_record(Self::header(branches))?;
        }
        Ok(StepLog { writer, branches })
    }

    pub fn header(branches: usize) -> Vec<String> {
        let mut h: Vec<String> = [
            "step", "epoch", "phase", "lr", "total", "det", "rpn_cls", "rpn_reg", "rcnn_cls", "rcnn_reg", "low",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        h.extend((0..branches).map(|i| format!("high_{i}")));
        h.extend(["con_surrogate", "con_rank", "con_overlap"].map(String::from));
        h.extend((0..branches).map(|i| format!("bank_mean_{i}")));
        h.extend((0..branches).map(|i| format!("beta_{i}")));
        h.extend(["ema_residual", "grad_norm", "faulted", "probe_accuracy"].map(String::from));
        h
    }

    pub fn write(&mut self, r: &StepRecord) -> Result<()> {
        let f = |v: f64| format!("{v:.9e}");
        let pad = |v: &[f64]| -> Vec<String> {
            (0..self.branches).map(|i| v.get(i).map_or(String::new(), |x| f(*x))).collect()
        };
        let mut row = vec![
            r.step.to_string(),
            r.epoch.to_string(),
            r.phase.to_string(),
            f(r.lr),
            f(r.total),
            f(r.det.total()),
            f(r.det.rpn_cls),
            f(r.det.rpn_reg),
            f(r.det.rcnn_cls),
            f(r.det.rcnn_reg),
            f(r.low),
        ];
        row.extend(pad(&r.high));
        row.extend([f(r.con_surrogate), f(r.con_rank), f(r.con_overlap)]);
        row.extend(pad(&r.bank_means));
        row.extend(pad(&r.beta));
        row.push(r.ema_residual.map_or(String::new(), f));
        row.push(f(r.grad_norm));
        row.push(u8::from(r.faulted).to_string());
        row.push(r.probe_accuracy.map_or(String::new(), f));
        self.writer.write_record(&row)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| DmsnError::io("train log", e))
    }
}

/// Runs `n` steps (or up to the end of the schedule), probing the low-level
/// discriminator every `probe_every` steps when alignment is on.
pub fn run_steps(
    state: &mut TrainState,
    data: &TrainData,
    n: usize,
    mut log: Option<&mut StepLog>,
) -> Result<Vec<StepRecord>> {
    let end = (state.step + n).min(state.total_steps());
    let mut out = Vec::with_capacity(end.saturating_sub(state.step));
    while state.step < end {
        let probe = if state.config.alignment
            && state.config.probe_every > 0
            && state.config.probe_images > 0
            && state.step % state.config.probe_every == 0
        {
            Some(state.probe_accuracy(&data.probe)?)
        } else {
            None
        };
        let batch = data.batch(state.config.seed, state.step);
        let mut rec = state.train_step(&batch)?;
        rec.probe_accuracy = probe;
        if let Some(l) = log.as_deref_mut() {
            l.write(&rec)?;
        }
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// `"ok"` or `"failed"`.
    pub status: String,
    pub steps: usize,
    pub steps_per_epoch: usize,
    pub epochs: usize,
    pub faulted_steps: usize,
    pub fault_fraction: f64,
    /// Phase of every epoch, in order.
    pub epoch_phases: Vec<u8>,
    pub final_checkpoint: PathBuf,
    pub final_checkpoint_sha256: String,
    pub config_fingerprint: String,
    /// `(step, accuracy)` of every probe in this session.
    pub probe: Vec<(usize, f64)>,
    pub final_beta: Vec<f64>,
    pub final_lr: f64,
    pub last_total_loss: f64,
    pub wall_seconds: f64,
}

impl RunSummary {
    pub fn failed(&self) -> bool {
        self.status != "ok"
    }
}

/// Full schedule with per-epoch checkpoints, the step log and a JSON summary
/// under `out`.
pub fn run_training(config: &TrainConfig, out: &Path, resume: Option<&Path>) -> Result<RunSummary> {
    let started = Instant::now();
    config.validate()?;
    let data = TrainData::load(config)?;
    let mut state = match resume {
        Some(ckpt) => {
            let s = load_checkpoint(ckpt)?;
            if s.config.fingerprint() != config.fingerprint() {
                return Err(DmsnError::Checkpoint(format!(
                    "{} was written with a different config",
                    ckpt.display()
                )));
            }
            if s.steps_per_epoch != data.steps_per_epoch() {
                return Err(DmsnError::Checkpoint("checkpoint epoch length differs from the data".into()));
            }
            s
        }
        None => TrainState::new(config, data.steps_per_epoch())?,
    };
    fs::create_dir_all(out).map_err(|e| DmsnError::io(out, e))?;
    let cfg_path = out.join("config.toml");
    fs::write(&cfg_path, config.to_toml_string()?).map_err(|e| DmsnError::io(&cfg_path, e))?;
    let mut log = StepLog::create(&out.join(LOG_FILE), state.num_branches(), resume.is_some())?;

    let mut probe = Vec::new();
    let mut last_total = f64::NAN;
    while state.step < state.total_steps() {
        let epoch = state.epoch();
        let remaining = (epoch + 1) * state.steps_per_epoch - state.step;
        let recs = run_steps(&mut state, &data, remaining, Some(&mut log))?;
        log.flush()?;
        for r in &recs {
            if let Some(p) = r.probe_accuracy {
                probe.push((r.step, p));
            }
        }
        if let Some(r) = recs.last() {
            last_total = r.total;
            let mean = recs.iter().map(|r| r.total).sum::<f64>() / recs.len() as f64;
            log::info!(
                "epoch {}/{} phase {} mean loss {:.4} faulted {}",
                epoch + 1,
                config.epochs,
                r.phase,
                mean,
                state.faulted_steps
            );
        }
        save_checkpoint(&state, &out.join(format!("checkpoint_epoch{:03}.dmsn", epoch + 1)))?;
    }
    let final_path = out.join(FINAL_CHECKPOINT);
    save_checkpoint(&state, &final_path)?;
    let total = state.total_steps();
    let fault_fraction = state.faulted_steps as f64 / total.max(1) as f64;
    let summary = RunSummary {
        status: if fault_fraction > config.max_fault_fraction {
            "failed".into()
        } else {
            "ok".into()
        },
        steps: total,
        steps_per_epoch: state.steps_per_epoch,
        epochs: config.epochs,
        faulted_steps: state.faulted_steps,
        fault_fraction,
        epoch_phases: (0..config.epochs).map(|e| config.phase_of_epoch(e)).collect(),
        final_checkpoint_sha256: file_sha256(&final_path)?,
        final_checkpoint: final_path,
        config_fingerprint: config.fingerprint(),
        probe,
        final_beta: state.beta.clone(),
        final_lr: config.lr_at(total.saturating_sub(1), total),
        last_total_loss: last_total,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    let spath = out.join(SUMMARY_FILE);
    fs::write(&spath, serde_json::to_vec_pretty(&summary)?).map_err(|e| DmsnError::io(&spath, e))?;
    Ok(summary)
}

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{RegularizerKind, TrainConfig};
use super::data::{build_split, DataSplit, DROPOUT_STREAM, INIT_STREAM};
use super::optim::{adamw_step, OptimizerState};
use crate::checkpoint::{list_checkpoints, load_checkpoint, save_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::export::sig17;
use crate::model::{batch_loss, grads, init_params, l2_sq, ModelParams, Regularizer};
use crate::numerics::{RngState, RngStream};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const EMERGENCY_DIR: &str = "emergency";
pub const LOCK_FILE: &str = "train.lock";
pub const PARTIAL_MARKER: &str = "PARTIAL";

pub const METRICS_HEADER: [&str; 6] = ["epoch", "train_loss", "test_loss", "train_acc", "test_acc", "l2_sq"];

/// Metrics of the parameters after `epoch` updates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: u64,
    pub train_loss: f64,
    pub test_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub l2_sq: f64,
}

impl MetricsRecord {
    fn is_finite(&self) -> bool {
        self.train_loss.is_finite() && self.test_loss.is_finite() && self.l2_sq.is_finite()
    }

    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}\n",
            self.epoch,
            sig17(self.train_loss),
            sig17(self.test_loss),
            sig17(self.train_acc),
            sig17(self.test_acc),
            sig17(self.l2_sq)
        )
    }
}

/// Reads a metrics stream written by [`train_run`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

/// Stable hash of a resolved configuration.
pub fn config_hash(cfg: &TrainConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(Sha256::digest(bytes))
}

/// Paths inside a run directory.
#[derive(Clone, Debug)]
pub struct RunDirectory {
    pub root: PathBuf,
}

impl RunDirectory {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join(METRICS_FILE)
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join(CHECKPOINT_DIR)
    }

    pub fn read_config(&self) -> Result<TrainConfig> {
        let path = self.config();
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_slice(&text)?)
    }

    pub fn list_checkpoints(&self) -> Result<Vec<(u64, PathBuf)>> {
        list_checkpoints(&self.checkpoints())
    }
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub final_epoch: u64,
    pub last: MetricsRecord,
    pub checkpoints_written: usize,
}

struct RunLock(PathBuf);

impl RunLock {
    fn acquire(root: &Path) -> Result<Self> {
        let path = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Precondition(format!(
                "{} is locked by another training process (remove {} if stale)",
                root.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

struct Trainer {
    cfg: TrainConfig,
    split: DataSplit,
    params: ModelParams<f32>,
    opt: OptimizerState<f32>,
    dropout_rng: Option<RngStream>,
    hash: String,
}

impl Trainer {
    fn fresh(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let split = build_split(cfg.model.p, cfg.train_frac, cfg.seed)?;
        let mut init_rng = RngStream::new(cfg.seed).substream(INIT_STREAM);
        let params = init_params::<f32>(&cfg.model, &mut init_rng)?;
        let opt = OptimizerState::new(&params);
        let dropout_rng = match cfg.regularizer {
            RegularizerKind::Dropout { .. } => Some(RngStream::new(cfg.seed).substream(DROPOUT_STREAM)),
            _ => None,
        };
        Ok(Self {
            cfg: cfg.clone(),
            split,
            params,
            opt,
            dropout_rng,
            hash: config_hash(cfg),
        })
    }

    /// `rng` is the dropout state at the start of `epoch`.
    fn snapshot(&self, epoch: u64, rng: &Option<RngState>) -> Checkpoint {
        Checkpoint {
            epoch,
            config_hash: self.hash.clone(),
            params: self.params.clone(),
            optimizer: self.opt.clone(),
            rng: rng.clone(),
        }
    }

    /// Metrics at the current parameters and the gradient for the next update.
    fn evaluate(&mut self, epoch: u64) -> Result<(MetricsRecord, ModelParams<f32>)> {
        let reg = match (self.cfg.regularizer, self.dropout_rng.as_mut()) {
            (RegularizerKind::L1 { lambda }, _) => Regularizer::L1(lambda),
            (RegularizerKind::Dropout { p }, Some(rng)) => Regularizer::Dropout(p, rng),
            _ => Regularizer::None,
        };
        let dropout = matches!(reg, Regularizer::Dropout(..));
        let g = grads(&self.params, &self.split.train, reg)?;
        let (train_loss, train_acc) = if dropout {
            batch_loss(&self.params, &self.split.train)?
        } else {
            (g.data_loss, g.accuracy)
        };
        let (test_loss, test_acc) = batch_loss(&self.params, &self.split.test)?;
        let rec = MetricsRecord {
            epoch,
            train_loss,
            test_loss,
            train_acc,
            test_acc,
            l2_sq: l2_sq(&self.params),
        };
        Ok((rec, g.grads))
    }
}

fn write_partial_marker(root: &Path, err: &Error) {
    let _ = fs::write(root.join(PARTIAL_MARKER), format!("{err}\n"));
}

fn run_loop(trainer: &mut Trainer, dir: &RunDirectory, start: u64) -> Result<RunSummary> {
    let metrics_path = dir.metrics();
    let mut metrics = OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let ck_dir = dir.checkpoints();
    let final_epoch = trainer.cfg.epochs;
    let hp = trainer.cfg.adamw();
    let mut written = 0;
    let mut last = None;
    let t0 = std::time::Instant::now();
    for epoch in start..=final_epoch {
        let rng = trainer.dropout_rng.as_ref().map(|r| r.state());
        let (rec, g) = trainer.evaluate(epoch)?;
        if !rec.is_finite() {
            let path = save_checkpoint(&trainer.snapshot(epoch, &rng), &dir.root.join(EMERGENCY_DIR))?;
            return Err(Error::Numeric(format!(
                "non-finite loss at epoch {epoch}; emergency checkpoint at {}",
                path.display()
            )));
        }
        metrics
            .write_all(rec.csv_line().as_bytes())
            .map_err(|e| Error::io(&metrics_path, e))?;
        if trainer.cfg.checkpoints.contains(epoch, final_epoch) {
            metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
            save_checkpoint(&trainer.snapshot(epoch, &rng), &ck_dir)?;
            written += 1;
        }
        if epoch % 500 == 0 || epoch == final_epoch {
            info!(
                "epoch {epoch}: train {:.3e} ({:.3}) test {:.3e} ({:.3}) [{:.0}s]",
                rec.train_loss,
                rec.train_acc,
                rec.test_loss,
                rec.test_acc,
                t0.elapsed().as_secs_f64()
            );
        }
        last = Some(rec);
        if epoch == final_epoch {
            break;
        }
        if let Err(e) = adamw_step(&mut trainer.params, &g, &mut trainer.opt, &hp) {
            let path = save_checkpoint(&trainer.snapshot(epoch, &rng), &dir.root.join(EMERGENCY_DIR))?;
            return Err(Error::Numeric(format!(
                "{e} after epoch {epoch}; emergency checkpoint at {}",
                path.display()
            )));
        }
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    Ok(RunSummary {
        run_dir: dir.root.clone(),
        final_epoch,
        last: last.expect("at least one epoch evaluated"),
        checkpoints_written: written,
    })
}

fn guarded<T>(root: &Path, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let out = f();
    match &out {
        Ok(_) => {
            let _ = fs::remove_file(root.join(PARTIAL_MARKER));
        }
        Err(e) => {
            warn!("training aborted: {e}");
            write_partial_marker(root, e);
        }
    }
    out
}

/// Trains from scratch into `out_dir`, which must not already hold a run.
pub fn train_run(cfg: &TrainConfig, out_dir: &Path) -> Result<RunSummary> {
    let mut trainer = Trainer::fresh(cfg)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let dir = RunDirectory::new(out_dir);
    if dir.metrics().exists() || dir.config().exists() {
        return Err(Error::Precondition(format!(
            "{} already contains a run; use resume instead",
            out_dir.display()
        )));
    }
    let _lock = RunLock::acquire(out_dir)?;
    guarded(out_dir, || {
        crate::export::write_json(&dir.config(), cfg)?;
        let header = METRICS_HEADER.join(",") + "\n";
        fs::write(dir.metrics(), header).map_err(|e| Error::io(dir.metrics(), e))?;
        run_loop(&mut trainer, &dir, 0)
    })
}

/// Continues a run from its latest checkpoint. Metrics rows from that
/// epoch on are discarded and recomputed, so the finished stream matches
/// an uninterrupted run.
pub fn resume(run_dir: &Path) -> Result<RunSummary> {
    let dir = RunDirectory::new(run_dir);
    let cfg = dir.read_config()?;
    let mut trainer = Trainer::fresh(&cfg)?;
    let (epoch, path) = dir
        .list_checkpoints()?
        .into_iter()
        .rfind(|(e, _)| *e <= cfg.epochs)
        .ok_or_else(|| Error::Precondition(format!("{} has no checkpoints", run_dir.display())))?;
    let ck = load_checkpoint(&path)?;
    if ck.config_hash != trainer.hash {
        return Err(Error::Precondition(format!(
            "checkpoint {} was written under a different configuration",
            path.display()
        )));
    }
    let _lock = RunLock::acquire(run_dir)?;
    guarded(run_dir, || {
        trainer.params = ck.params;
        trainer.opt = ck.optimizer;
        if let (Some(state), Some(_)) = (&ck.rng, &trainer.dropout_rng) {
            trainer.dropout_rng = Some(RngStream::from_state(state)?);
        }
        let kept: Vec<MetricsRecord> = read_metrics(&dir.metrics())?
            .into_iter()
            .filter(|r| r.epoch < epoch)
            .collect();
        let mut text = METRICS_HEADER.join(",") + "\n";
        for r in &kept {
            text.push_str(&r.csv_line());
        }
        fs::write(dir.metrics(), text).map_err(|e| Error::io(dir.metrics(), e))?;
        info!("resuming {} from epoch {epoch}", run_dir.display());
        run_loop(&mut trainer, &dir, epoch)
    })
}

/// Loads the split a run was trained on.
pub fn run_split(cfg: &TrainConfig) -> Result<DataSplit> {
    build_split(cfg.model.p, cfg.train_frac, cfg.seed)
}

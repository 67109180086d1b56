//! Progress measures over a run's checkpoints and phase segmentation.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{detect_key_frequencies, fit_logit_cos, fourier_ginis};
use crate::checkpoint::load_checkpoint;
use crate::error::{Error, Result};
use crate::export::{sig17, write_csv};
use crate::fourier::make_basis;
use crate::model::{l2_sq, score_logits, sweep_all_inputs, Example, ModelParams, NoHook};
use crate::training::{run_split, RunDirectory};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeySource {
    #[default]
    FinalCheckpoint,
    PerCheckpoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProgressOptions {
    pub key_source: KeySource,
    pub threshold: f64,
    /// Use these keys instead of detecting them.
    pub keys: Option<Vec<usize>>,
}

impl Default for ProgressOptions {
    fn default() -> Self {
        Self {
            key_source: KeySource::FinalCheckpoint,
            threshold: 0.1,
            keys: None,
        }
    }
}

/// Measures at one checkpoint. Losses are 64-bit evaluations of the stored
/// parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgressRow {
    pub epoch: u64,
    pub keys: Vec<usize>,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    /// Test split.
    pub restricted_loss: f64,
    pub restricted_acc: f64,
    /// Train split.
    pub excluded_loss: f64,
    pub excluded_acc: f64,
    /// Excluded train loss removing one key at a time, aligned with `keys`.
    pub excluded_by_key: Vec<f64>,
    pub gini_we: f64,
    pub gini_wl: f64,
    pub l2_sq: f64,
    /// `cos(w_k(a+b-c))` coefficients, aligned with `keys`.
    pub alpha: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedCheckpoint {
    pub epoch: u64,
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgressSeries {
    pub options: ProgressOptions,
    /// Keys from the final checkpoint (or the override).
    pub keys: Vec<usize>,
    pub rows: Vec<ProgressRow>,
    pub skipped: Vec<SkippedCheckpoint>,
}

/// Sum-direction key components of a logit tensor. Every such component
/// depends on the inputs only through `s = (a + b) mod p`, so it is stored
/// as an `[s, c]` table.
pub struct SumComponents {
    pub p: usize,
    pub keys: Vec<usize>,
    /// `[s, c]` mean of the logits over the inputs: the constant block.
    pub constant: Array2<f64>,
    /// One `[s, c]` table per key.
    pub per_key: Vec<Array2<f64>>,
}

impl SumComponents {
    pub fn new(logits: &Array3<f64>, keys: &[usize]) -> Result<Self> {
        let p = logits.dim().0;
        if logits.dim() != (p, p, p) {
            return Err(Error::arg("logit tensor must be p x p x p"));
        }
        for &k in keys {
            if k == 0 || 2 * k >= p {
                return Err(Error::arg(format!("key frequency {k} outside 1..={}", (p - 1) / 2)));
            }
        }
        // m[s, c] = sum over a + b = s of L[a, b, c]
        let mut m = Array2::<f64>::zeros((p, p));
        for a in 0..p {
            for b in 0..p {
                let mut row = m.row_mut((a + b) % p);
                row += &logits.slice(ndarray::s![a, b, ..]);
            }
        }
        let n = (p * p) as f64;
        let total = m.sum_axis(ndarray::Axis(0)) / n;
        let constant = Array2::from_shape_fn((p, p), |(_, c)| total[c]);
        let per_key = keys
            .iter()
            .map(|&k| {
                let w = |s: usize| 2.0 * std::f64::consts::PI * ((k * s) % p) as f64 / p as f64;
                let mut cc = vec![0.0; p];
                let mut sc = vec![0.0; p];
                for s in 0..p {
                    let (cs, sn) = (w(s).cos(), w(s).sin());
                    for c in 0..p {
                        cc[c] += m[[s, c]] * cs;
                        sc[c] += m[[s, c]] * sn;
                    }
                }
                Array2::from_shape_fn((p, p), |(s, c)| 2.0 / n * (cc[c] * w(s).cos() + sc[c] * w(s).sin()))
            })
            .collect();
        Ok(Self {
            p,
            keys: keys.to_vec(),
            constant,
            per_key,
        })
    }

    /// Sum of the components of the keys selected by `mask`.
    fn selected(&self, mask: impl Fn(usize) -> bool) -> Array2<f64> {
        let mut out = Array2::zeros((self.p, self.p));
        for (i, t) in self.per_key.iter().enumerate() {
            if mask(i) {
                out += t;
            }
        }
        out
    }
}

fn score_with<F>(pairs: &[Example], p: usize, row: F) -> Result<(f64, f64)>
where
    F: Fn(&Example) -> ndarray::Array1<f64>,
{
    let mut l = Array2::zeros((pairs.len(), p));
    for (mut dst, e) in l.rows_mut().into_iter().zip(pairs) {
        dst.assign(&row(e));
    }
    let targets: Vec<usize> = pairs.iter().map(|e| e.target).collect();
    score_logits(&l, &targets)
}

/// Restricted loss/accuracy on `pairs`: constant plus key sum directions.
pub fn restricted_score(comp: &SumComponents, pairs: &[Example]) -> Result<(f64, f64)> {
    let kept = &comp.constant + &comp.selected(|_| true);
    score_with(pairs, comp.p, |e| kept.row((e.a + e.b) % comp.p).to_owned())
}

/// Loss/accuracy on `pairs` with the components of the masked keys removed.
pub fn excluded_score(
    logits: &Array3<f64>,
    comp: &SumComponents,
    pairs: &[Example],
    mask: impl Fn(usize) -> bool,
) -> Result<(f64, f64)> {
    let removed = comp.selected(mask);
    score_with(pairs, comp.p, |e| {
        &logits.slice(ndarray::s![e.a, e.b, ..]) - &removed.row((e.a + e.b) % comp.p)
    })
}

fn split_score(logits: &Array3<f64>, pairs: &[Example]) -> Result<(f64, f64)> {
    score_with(pairs, logits.dim().2, |e| logits.slice(ndarray::s![e.a, e.b, ..]).to_owned())
}

/// Every measure for one set of parameters.
pub fn measure(
    epoch: u64,
    params: &ModelParams<f64>,
    keys: &[usize],
    train: &[Example],
    test: &[Example],
) -> Result<ProgressRow> {
    let basis = make_basis(params.config.p)?;
    let logits = sweep_all_inputs(params, &NoHook).logits;
    let comp = SumComponents::new(&logits, keys)?;
    let (train_loss, train_acc) = split_score(&logits, train)?;
    let (test_loss, test_acc) = split_score(&logits, test)?;
    let (restricted_loss, restricted_acc) = restricted_score(&comp, test)?;
    let (excluded_loss, excluded_acc) = excluded_score(&logits, &comp, train, |_| true)?;
    let excluded_by_key = (0..keys.len())
        .map(|i| excluded_score(&logits, &comp, train, |j| j == i).map(|s| s.0))
        .collect::<Result<_>>()?;
    let (gini_we, gini_wl) = fourier_ginis(params, &basis)?;
    let alpha = if keys.is_empty() {
        Vec::new()
    } else {
        fit_logit_cos(&logits, keys)?.alpha
    };
    Ok(ProgressRow {
        epoch,
        keys: keys.to_vec(),
        train_loss,
        train_acc,
        test_loss,
        test_acc,
        restricted_loss,
        restricted_acc,
        excluded_loss,
        excluded_acc,
        excluded_by_key,
        gini_we,
        gini_wl,
        l2_sq: l2_sq(params),
        alpha,
    })
}

fn load_f64(path: &Path) -> Result<(u64, ModelParams<f64>)> {
    let ck = load_checkpoint(path)?;
    Ok((ck.epoch, ck.params.cast()))
}

/// Computes every progress measure for each checkpoint of a run.
pub fn sweep(run_dir: &Path, options: &ProgressOptions) -> Result<ProgressSeries> {
    if !(options.threshold > 0.0 && options.threshold < 1.0) {
        return Err(Error::arg(format!("key threshold must be in (0, 1), got {}", options.threshold)));
    }
    let run = RunDirectory::new(run_dir);
    let cfg = run.read_config()?;
    let split = run_split(&cfg)?;
    let checkpoints = run.list_checkpoints()?;
    if checkpoints.len() < 2 {
        return Err(Error::Precondition(format!(
            "{} has {} checkpoints; a sweep needs at least 2",
            run_dir.display(),
            checkpoints.len()
        )));
    }

    let final_keys = match &options.keys {
        Some(k) => k.clone(),
        None => {
            // the newest checkpoint that loads defines the keys
            let mut found = None;
            for (_, path) in checkpoints.iter().rev() {
                if let Ok((_, params)) = load_f64(path) {
                    found = Some(detect_key_frequencies(&params, options.threshold)?.keys);
                    break;
                }
            }
            found.ok_or_else(|| Error::Precondition("no readable checkpoint".into()))?
        }
    };

    let results: Vec<std::result::Result<ProgressRow, SkippedCheckpoint>> = checkpoints
        .par_iter()
        .map(|(epoch, path)| {
            let skip = |reason: String| SkippedCheckpoint {
                epoch: *epoch,
                path: path.clone(),
                reason,
            };
            let (ck_epoch, params) = load_f64(path).map_err(|e| skip(e.to_string()))?;
            let keys = match (options.key_source, &options.keys) {
                (KeySource::PerCheckpoint, None) => detect_key_frequencies(&params, options.threshold)
                    .map_err(|e| skip(e.to_string()))?
                    .keys,
                _ => final_keys.clone(),
            };
            measure(ck_epoch, &params, &keys, &split.train, &split.test).map_err(|e| skip(e.to_string()))
        })
        .collect();

    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for r in results {
        match r {
            Ok(row) => rows.push(row),
            Err(s) => {
                log::warn!("skipping checkpoint {}: {}", s.path.display(), s.reason);
                skipped.push(s);
            }
        }
    }
    Ok(ProgressSeries {
        options: options.clone(),
        keys: final_keys,
        rows,
        skipped,
    })
}

impl ProgressSeries {
    /// Keys with a column of their own: the final keys, or the union of
    /// per-checkpoint keys.
    pub fn column_keys(&self) -> Vec<usize> {
        let all: BTreeSet<usize> = self.rows.iter().flat_map(|r| r.keys.iter().copied()).chain(self.keys.iter().copied()).collect();
        all.into_iter().collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let cols = self.column_keys();
        let mut header: Vec<String> = [
            "epoch",
            "keys",
            "train_loss",
            "train_acc",
            "test_loss",
            "test_acc",
            "restricted_loss",
            "restricted_acc",
            "excluded_loss",
            "excluded_acc",
            "gini_we",
            "gini_wl",
            "l2_sq",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend(cols.iter().map(|k| format!("excluded_loss_k{k}")));
        header.extend(cols.iter().map(|k| format!("alpha_k{k}")));
        let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
        write_csv(
            path,
            &header_refs,
            self.rows.iter().map(|r| {
                let mut out = vec![
                    r.epoch.to_string(),
                    r.keys.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(" "),
                    sig17(r.train_loss),
                    sig17(r.train_acc),
                    sig17(r.test_loss),
                    sig17(r.test_acc),
                    sig17(r.restricted_loss),
                    sig17(r.restricted_acc),
                    sig17(r.excluded_loss),
                    sig17(r.excluded_acc),
                    sig17(r.gini_we),
                    sig17(r.gini_wl),
                    sig17(r.l2_sq),
                ];
                let lookup = |vals: &[f64], k: usize| {
                    r.keys
                        .iter()
                        .position(|&x| x == k)
                        .map(|i| sig17(vals[i]))
                        .unwrap_or_default()
                };
                out.extend(cols.iter().map(|&k| lookup(&r.excluded_by_key, k)));
                out.extend(cols.iter().map(|&k| lookup(&r.alpha, k)));
                out
            }),
        )
    }

    pub fn phase_points(&self) -> Vec<PhasePoint> {
        self.rows
            .iter()
            .map(|r| PhasePoint {
                epoch: r.epoch,
                train_acc: r.train_acc,
                test_acc: r.test_acc,
                test_loss: r.test_loss,
            })
            .collect()
    }
}

/// The inputs phase segmentation looks at.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub epoch: u64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub test_loss: f64,
}

impl From<&crate::training::MetricsRecord> for PhasePoint {
    fn from(m: &crate::training::MetricsRecord) -> Self {
        Self {
            epoch: m.epoch,
            train_acc: m.train_acc,
            test_acc: m.test_acc,
            test_loss: m.test_loss,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseParams {
    /// Points in the centered moving average and in a "sustained" run.
    pub window: usize,
    pub train_acc_threshold: f64,
    pub test_acc_threshold: f64,
    /// Change in smoothed ln(test loss) per 100 epochs that counts as decline.
    pub slope_threshold: f64,
}

impl Default for PhaseParams {
    fn default() -> Self {
        Self {
            window: 5,
            train_acc_threshold: 0.995,
            test_acc_threshold: 0.999,
            slope_threshold: -0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseBoundaries {
    pub mem_end: u64,
    pub cleanup_start: u64,
    pub cleanup_end: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum PhaseOutcome {
    Grokked { boundaries: PhaseBoundaries },
    NoGrokking { final_test_acc: f64, mem_end: Option<u64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub params: PhaseParams,
    #[serde(flatten)]
    pub outcome: PhaseOutcome,
}

/// Centered moving average; windows are truncated at the ends.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + window - half).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// First index from which `window` consecutive values (fewer at the end of
/// the series) all reach `threshold`.
fn first_sustained(values: &[f64], window: usize, threshold: f64) -> Option<usize> {
    (0..values.len()).find(|&i| values[i..(i + window).min(values.len())].iter().all(|&v| v >= threshold))
}

/// Splits a run into memorization, circuit formation and cleanup.
pub fn segment_phases(points: &[PhasePoint], params: &PhaseParams) -> Result<PhaseReport> {
    if params.window == 0 {
        return Err(Error::arg("smoothing window must be positive"));
    }
    if points.len() < params.window.max(2) {
        return Err(Error::arg(format!(
            "{} points is too short for a window of {}",
            points.len(),
            params.window
        )));
    }
    if points.windows(2).any(|w| w[1].epoch <= w[0].epoch) {
        return Err(Error::arg("epochs must be strictly increasing"));
    }
    let train_acc: Vec<f64> = points.iter().map(|p| p.train_acc).collect();
    let test_acc: Vec<f64> = points.iter().map(|p| p.test_acc).collect();
    let mem = first_sustained(&train_acc, params.window, params.train_acc_threshold);
    let final_test_acc = *test_acc.last().unwrap();
    let report = |outcome| PhaseReport {
        params: params.clone(),
        outcome,
    };
    let no_grok = |mem: Option<usize>| {
        report(PhaseOutcome::NoGrokking {
            final_test_acc,
            mem_end: mem.map(|i| points[i].epoch),
        })
    };
    if final_test_acc < params.test_acc_threshold {
        return Ok(no_grok(mem));
    }
    let (Some(mem), Some(end)) = (mem, first_sustained(&test_acc, params.window, params.test_acc_threshold)) else {
        return Ok(no_grok(mem));
    };
    let end = end.max(mem);

    let log_loss: Vec<f64> = points.iter().map(|p| p.test_loss.max(f64::MIN_POSITIVE).ln()).collect();
    let smooth = moving_average(&log_loss, params.window);
    // slope[i] covers points i -> i + 1, per 100 epochs
    let slope: Vec<f64> = (0..points.len() - 1)
        .map(|i| (smooth[i + 1] - smooth[i]) / (points[i + 1].epoch - points[i].epoch) as f64 * 100.0)
        .collect();
    let start = if end > mem {
        let steepest = (mem..end)
            .min_by(|&i, &j| slope[i].total_cmp(&slope[j]))
            .expect("non-empty range");
        let mut s = steepest;
        while s > mem && slope[s - 1] < params.slope_threshold {
            s -= 1;
        }
        s
    } else {
        mem
    };
    Ok(report(PhaseOutcome::Grokked {
        boundaries: PhaseBoundaries {
            mem_end: points[mem].epoch,
            cleanup_start: points[start].epoch,
            cleanup_end: points[end].epoch,
        },
    }))
}

//! Experiment configuration and the analyze / ablate / report pipelines
//! built on the lower-level modules.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ablation::{ablate_logit_space, ablate_model, AblationMode, AblationResult, EvalSplit, Prerequisites, SkipFill};
use crate::analysis::{
    detect_key_frequencies, factor_wl, fit_attention, fit_logit_cos, fit_neurons, fourier_ginis, interference_profile,
    ov_spectrum, project_mlp_fit, write_attention_csv, AttentionFit, InterferenceProfile, KeyFrequencyReport, LogitCosFit,
    MlpProjectionFit, NeuronFits,
};
use crate::error::{Error, Result};
use crate::export::{sig17, write_csv, write_json};
use crate::fourier::{dft_matrix, make_basis, KeySubspace, Spectrum1D};
use crate::model::{score_logits, sweep_all_inputs, Example, FullSweep, ModelParams, NoHook};
use crate::progress::{PhaseParams, PhaseReport, ProgressOptions};
use crate::checkpoint::load_checkpoint;
use crate::training::{config_hash, run_split, DataSplit, RunDirectory, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Relative norm a frequency of `W_L` needs to count as key.
    pub key_threshold: f64,
    pub neuron_fve_threshold: f64,
    /// How logit-space ablations read "key frequency".
    pub subspace: KeySubspace,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            key_threshold: 0.1,
            neuron_fve_threshold: 0.85,
            subspace: KeySubspace::SumDirections,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputPaths {
    pub run_dir: PathBuf,
    /// Where analyze / ablate / progress / report write; relative paths
    /// resolve against `run_dir`.
    pub report_dir: PathBuf,
}

impl Default for OutputPaths {
    fn default() -> Self {
        Self {
            run_dir: PathBuf::from("runs/main"),
            report_dir: PathBuf::from("report"),
        }
    }
}

impl OutputPaths {
    pub fn resolved_report_dir(&self) -> PathBuf {
        if self.report_dir.is_absolute() {
            self.report_dir.clone()
        } else {
            self.run_dir.join(&self.report_dir)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub train: TrainConfig,
    pub analysis: AnalysisConfig,
    pub progress: ProgressOptions,
    pub phases: PhaseParams,
    pub outputs: OutputPaths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            train: TrainConfig::default(),
            analysis: AnalysisConfig::default(),
            progress: ProgressOptions::default(),
            phases: PhaseParams::default(),
            outputs: OutputPaths::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses a config, rejecting unknown fields and newer schemas.
    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Version {
            #[serde(default)]
            schema_version: Option<u32>,
        }
        let v: Version = serde_json::from_str(text)?;
        if let Some(found) = v.schema_version {
            if found > SCHEMA_VERSION {
                return Err(Error::Version {
                    found,
                    supported: SCHEMA_VERSION,
                });
            }
        }
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let a = &self.analysis;
        if !(a.key_threshold > 0.0 && a.key_threshold < 1.0) {
            return Err(Error::arg(format!("key threshold must lie in (0, 1), got {}", a.key_threshold)));
        }
        if !(a.neuron_fve_threshold.is_finite()) {
            return Err(Error::arg("neuron FVE threshold must be finite"));
        }
        if self.phases.window == 0 {
            return Err(Error::arg("phase window must be positive"));
        }
        Ok(())
    }
}

/// A checkpoint together with the run it belongs to, widened to 64 bits.
pub struct LoadedCheckpoint {
    pub path: PathBuf,
    pub run_dir: PathBuf,
    pub epoch: u64,
    pub config: TrainConfig,
    pub split: DataSplit,
    pub params: ModelParams<f64>,
}

/// Loads `checkpoints/epoch_<N>` of a run directory, checking it against
/// the run's config.
pub fn load_run_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let run_dir = path
        .parent()
        .and_then(Path::parent)
        .ok_or_else(|| Error::arg(format!("{} is not inside a run directory", path.display())))?
        .to_path_buf();
    let config = RunDirectory::new(&run_dir).read_config()?;
    let ck = load_checkpoint(path)?;
    if ck.config_hash != config_hash(&config) {
        return Err(Error::Precondition(format!(
            "{} was not written under {}",
            path.display(),
            run_dir.join(crate::training::CONFIG_FILE).display()
        )));
    }
    Ok(LoadedCheckpoint {
        path: path.to_path_buf(),
        epoch: ck.epoch,
        split: run_split(&config)?,
        params: ck.params.cast(),
        config,
        run_dir,
    })
}

/// Newest checkpoint of a run.
pub fn latest_checkpoint(run_dir: &Path) -> Result<PathBuf> {
    RunDirectory::new(run_dir)
        .list_checkpoints()?
        .pop()
        .map(|(_, p)| p)
        .ok_or_else(|| Error::Precondition(format!("{} has no checkpoints", run_dir.display())))
}

/// Everything `analyze` computes for one checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub epoch: u64,
    pub p: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub key_frequencies: KeyFrequencyReport,
    /// Per-frequency norms of the number embeddings (index `k-1`).
    pub we_freq_norms: Vec<f64>,
    pub wl_residual_ratio: f64,
    pub mlp_projection: MlpProjectionFit,
    pub logit_fit: LogitCosFit,
    /// Test loss of the fitted `sum_k alpha_k cos(w_k(a+b-c))` logits.
    pub logit_fit_test_loss: f64,
    pub neuron_threshold: f64,
    pub neurons_clustered: usize,
    pub clustered_fraction: f64,
    pub cluster_sizes: BTreeMap<usize, usize>,
    pub attention: Vec<AttentionFit>,
    pub ov_spectra: Vec<Spectrum1D>,
    pub interference: InterferenceProfile,
    pub gini_we: f64,
    pub gini_wl: f64,
}

/// Fits that ablations and CSV exports need beyond the summary.
pub struct AnalysisDetail {
    pub sweep: FullSweep,
    pub neurons: NeuronFits,
}

fn score_pairs(logits: &ndarray::Array3<f64>, pairs: &[Example]) -> Result<(f64, f64)> {
    let l = crate::ablation::pair_logits(logits, pairs);
    let targets: Vec<usize> = pairs.iter().map(|e| e.target).collect();
    score_logits(&l, &targets)
}

/// Runs the full reverse-engineering pass on one set of parameters.
pub fn analyze(
    epoch: u64,
    params: &ModelParams<f64>,
    split: &DataSplit,
    cfg: &AnalysisConfig,
) -> Result<(AnalysisReport, AnalysisDetail)> {
    let p = params.config.p;
    let basis = make_basis(p)?;
    let sweep = sweep_all_inputs(params, &NoHook);
    let key_frequencies = detect_key_frequencies(params, cfg.key_threshold)?;
    let keys = key_frequencies.keys.clone();
    let wl = params.neuron_logit_map();
    let fact = factor_wl(wl.view(), &basis, &keys)?;
    let mlp_projection = project_mlp_fit(&sweep.mlp_post, &fact, &basis)?;
    let logit_fit = fit_logit_cos(&sweep.logits, &keys)?;
    let (logit_fit_test_loss, _) = score_pairs(&logit_fit.approximation(p), &split.test)?;
    let neurons = fit_neurons(&sweep.mlp_post, &keys, cfg.neuron_fve_threshold)?;
    let attention = fit_attention(params, &sweep.attn_pattern, &sweep.attn_scores)?;
    let (_, we) = dft_matrix(params.number_embeddings().view(), &basis, 1)?;
    let (gini_we, gini_wl) = fourier_ginis(params, &basis)?;
    let (train_loss, _) = score_pairs(&sweep.logits, &split.train)?;
    let (test_loss, test_acc) = score_pairs(&sweep.logits, &split.test)?;
    let report = AnalysisReport {
        epoch,
        p,
        train_loss,
        test_loss,
        test_acc,
        we_freq_norms: we.frequency_norms(),
        wl_residual_ratio: fact.residual_ratio,
        mlp_projection,
        logit_fit,
        logit_fit_test_loss,
        neuron_threshold: neurons.threshold,
        neurons_clustered: neurons.clusters.values().map(Vec::len).sum(),
        clustered_fraction: neurons.clustered_fraction(),
        cluster_sizes: neurons.clusters.iter().map(|(k, v)| (*k, v.len())).collect(),
        attention,
        ov_spectra: ov_spectrum(params)?,
        interference: interference_profile(&keys, p)?,
        gini_we,
        gini_wl,
        key_frequencies,
    };
    Ok((report, AnalysisDetail { sweep, neurons }))
}

pub const ANALYSIS_JSON: &str = "analysis.json";
pub const ABLATIONS_JSON: &str = "ablations.json";
pub const ABLATIONS_CSV: &str = "ablations.csv";
pub const PROGRESS_CSV: &str = "progress.csv";
pub const PROGRESS_JSON: &str = "progress.json";
pub const PHASES_JSON: &str = "phases.json";

impl AnalysisReport {
    /// Writes `analysis.json` plus the table-shaped CSV sidecars.
    pub fn write(&self, detail: &AnalysisDetail, dir: &Path) -> Result<()> {
        write_json(&dir.join(ANALYSIS_JSON), self)?;
        self.mlp_projection.write_csv(&dir.join("mlp_projection.csv"))?;
        write_attention_csv(&self.attention, &dir.join("attention.csv"))?;
        detail.neurons.write_csv(&dir.join("neurons.csv"))?;
        let freqs = 1..=self.key_frequencies.freq_norms.len();
        write_csv(
            &dir.join("frequency_norms.csv"),
            &["k", "wl_norm", "we_norm", "key"],
            freqs.map(|k| {
                vec![
                    k.to_string(),
                    sig17(self.key_frequencies.freq_norms[k - 1]),
                    sig17(self.we_freq_norms[k - 1]),
                    self.key_frequencies.keys.contains(&k).to_string(),
                ]
            }),
        )?;
        write_csv(
            &dir.join("interference.csv"),
            &["x", "f"],
            self.interference.values.iter().enumerate().map(|(x, v)| vec![x.to_string(), sig17(*v)]),
        )?;
        let mut header = vec!["component".to_string()];
        header.extend((0..self.ov_spectra.len()).map(|h| format!("head{h}")));
        let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
        let labels = self.ov_spectra.first().map(|s| s.labels.clone()).unwrap_or_default();
        write_csv(
            &dir.join("ov_spectrum.csv"),
            &header_refs,
            labels.iter().enumerate().map(|(i, l)| {
                std::iter::once(l.to_string())
                    .chain(self.ov_spectra.iter().map(|s| sig17(s.norms[i])))
                    .collect::<Vec<_>>()
            }),
        )
    }
}

/// Evaluation pairs for a split.
pub fn split_pairs(split: &DataSplit, which: EvalSplit) -> &[Example] {
    match which {
        EvalSplit::Train => &split.train,
        EvalSplit::Test => &split.test,
    }
}

/// Runs one ablation on its default split unless `split_override` is set.
pub fn run_ablation(
    params: &ModelParams<f64>,
    detail: &AnalysisDetail,
    report: &AnalysisReport,
    split: &DataSplit,
    mode: &AblationMode,
    split_override: Option<EvalSplit>,
) -> Result<AblationResult> {
    let which = split_override.unwrap_or_else(|| mode.default_split());
    let pairs = split_pairs(split, which);
    let result = if mode.is_logit_space() {
        ablate_logit_space(&detail.sweep.logits, mode, pairs)?
    } else {
        let pre = Prerequisites {
            neurons: Some(&detail.neurons),
            attention: Some(&report.attention),
        };
        ablate_model(params, mode, pairs, &pre)?
    };
    Ok(result.with_split(which))
}

/// Every ablation mode for the detected keys, plus one single-frequency
/// ablation per frequency.
pub fn ablation_suite(keys: &[usize], p: usize, subspace: KeySubspace) -> Vec<AblationMode> {
    let mut modes = vec![
        AblationMode::Restricted {
            keys: keys.to_vec(),
            subspace,
        },
        AblationMode::Excluded {
            keys: keys.to_vec(),
            subspace,
        },
        AblationMode::WlProjectKeep { keys: keys.to_vec() },
        AblationMode::WlProjectNull { keys: keys.to_vec() },
        AblationMode::NeuronPolyReplace,
        AblationMode::NeuronSumRestrict,
        AblationMode::SkipMlp { fill: SkipFill::Zero },
        AblationMode::SkipMlp { fill: SkipFill::Mean },
        AblationMode::AttnHeadsZero,
        AblationMode::AttnSkipZero,
        AblationMode::AttnLinearize,
        AblationMode::EqSelfAttnZero,
    ];
    modes.extend((1..=(p - 1) / 2).map(|k| AblationMode::SingleFrequency { k }));
    modes
}

/// The merged bundle `report` renders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub analysis: Option<AnalysisReport>,
    pub ablations: Vec<AblationResult>,
    pub phases: Option<PhaseReport>,
    /// Artifacts that were looked for and not found.
    pub missing: Vec<String>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

impl Report {
    /// Collects whatever analysis, ablation and phase artifacts `dir` holds.
    pub fn gather(dir: &Path) -> Result<Self> {
        let mut missing = Vec::new();
        let analysis = read_json::<AnalysisReport>(&dir.join(ANALYSIS_JSON))?;
        if analysis.is_none() {
            missing.push(ANALYSIS_JSON.to_string());
        }
        let ablations = read_json::<Vec<AblationResult>>(&dir.join(ABLATIONS_JSON))?.unwrap_or_else(|| {
            missing.push(ABLATIONS_JSON.to_string());
            Vec::new()
        });
        let phases = read_json::<PhaseReport>(&dir.join(PHASES_JSON))?;
        if phases.is_none() {
            missing.push(PHASES_JSON.to_string());
        }
        if analysis.is_none() && ablations.is_empty() && phases.is_none() {
            return Err(Error::Precondition(format!("{} holds no analysis, ablation or phase output", dir.display())));
        }
        Ok(Self {
            analysis,
            ablations,
            phases,
            missing,
        })
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("# Modular addition circuit report\n\n");
        let num = |x: f64| format!("{x:.4e}");
        let pct = |x: f64| format!("{:.1}%", 100.0 * x);
        if let Some(a) = &self.analysis {
            out += &format!("## Checkpoint at epoch {} (p = {})\n\n", a.epoch, a.p);
            out += &format!(
                "- train loss {}, test loss {}, test accuracy {}\n",
                num(a.train_loss),
                num(a.test_loss),
                pct(a.test_acc)
            );
            out += &format!(
                "- key frequencies (threshold {}): {:?}\n",
                a.key_frequencies.threshold, a.key_frequencies.keys
            );
            out += &format!("- W_L residual ratio: {}\n", num(a.wl_residual_ratio));
            out += &format!(
                "- logit fit FVE {}, test loss of fitted logits {}\n",
                pct(a.logit_fit.fve),
                num(a.logit_fit_test_loss)
            );
            out += &format!(
                "- neurons clustered at FVE >= {}: {} ({})\n",
                a.neuron_threshold,
                a.neurons_clustered,
                pct(a.clustered_fraction)
            );
            out += &format!("- Fourier Gini: W_E {:.3}, W_L {:.3}\n", a.gini_we, a.gini_wl);
            out += &format!(
                "- interference: f[0] = {}, runner-up f[{}] = {:.3}\n\n",
                a.interference.values[0], a.interference.runner_up.0, a.interference.runner_up.1
            );
            out += "### MLP projections onto W_L directions\n\n| key | direction | top terms | single-term FVE |\n|---|---|---|---|\n";
            for d in &a.mlp_projection.directions {
                let terms: Vec<String> = d.top_terms.iter().map(|t| t.to_string()).collect();
                out += &format!("| {} | {} | {} | {} |\n", d.key, d.direction, terms.join(" "), pct(d.single_term_fve));
            }
            out += "\n### Attention heads\n\n| head | k | alpha | beta | pattern FVE | sigmoid FVE |\n|---|---|---|---|---|---|\n";
            for h in &a.attention {
                out += &format!(
                    "| {} | {} | {:.3} | {:.3} | {} | {} |\n",
                    h.head,
                    h.pattern_fit.frequency,
                    h.pattern_fit.alpha,
                    h.pattern_fit.beta,
                    pct(h.pattern_fit.fve),
                    pct(h.sigmoid_fve)
                );
            }
            out += "\n";
        }
        if !self.ablations.is_empty() {
            out += "## Ablations\n\n| mode | parameters | split | loss | accuracy | baseline | ratio |\n|---|---|---|---|---|---|---|\n";
            for r in &self.ablations {
                let split = match r.split {
                    Some(EvalSplit::Train) => "train",
                    Some(EvalSplit::Test) => "test",
                    None => "",
                };
                out += &format!(
                    "| {} | {} | {} | {} | {} | {} | {:.3} |\n",
                    r.mode,
                    r.parameters,
                    split,
                    num(r.loss),
                    pct(r.accuracy),
                    num(r.baseline_loss),
                    r.ratio
                );
            }
            out += "\n";
        }
        if let Some(ph) = &self.phases {
            out += "## Training phases\n\n";
            out += &match &ph.outcome {
                crate::progress::PhaseOutcome::Grokked { boundaries: b } => format!(
                    "- memorization ends at epoch {}\n- cleanup runs from epoch {} to {}\n",
                    b.mem_end, b.cleanup_start, b.cleanup_end
                ),
                crate::progress::PhaseOutcome::NoGrokking { final_test_acc, mem_end } => format!(
                    "- no grokking: final test accuracy {}{}\n",
                    pct(*final_test_acc),
                    mem_end.map(|e| format!(", memorized by epoch {e}")).unwrap_or_default()
                ),
            };
            out += "\n";
        }
        if !self.missing.is_empty() {
            out += &format!("Not available: {}\n", self.missing.join(", "));
        }
        out
    }

    /// Writes `report.json` and `report.md` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("report.json"), self)?;
        let path = dir.join("report.md");
        std::fs::write(&path, self.to_markdown()).map_err(|e| Error::io(path, e))
    }
}

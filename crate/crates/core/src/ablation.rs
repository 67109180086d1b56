//! Logit-space and model-surgery ablations.

use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{factor_wl, neuron_poly_value, neuron_sum_part, AttentionFit, NeuronFits};
use crate::error::{Error, Result};
use crate::export::{sig17, write_csv};
use crate::fourier::{dft_logits, make_basis, split_key_components, KeySubspace, Spectrum2D};
use crate::model::{forward, logits_with_hook, score_logits, Example, Hook, HookCtx, ModelParams};
use crate::numerics::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipFill {
    #[default]
    Zero,
    Mean,
}

/// Which split an ablation is evaluated on unless overridden.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AblationMode {
    /// Keep only the constant and the key-frequency components of the logits.
    Restricted {
        keys: Vec<usize>,
        #[serde(default)]
        subspace: KeySubspace,
    },
    /// Remove only the key-frequency components.
    Excluded {
        keys: Vec<usize>,
        #[serde(default)]
        subspace: KeySubspace,
    },
    /// Remove the full 2x2 block of one frequency.
    SingleFrequency { k: usize },
    WlProjectKeep { keys: Vec<usize> },
    WlProjectNull { keys: Vec<usize> },
    NeuronPolyReplace,
    NeuronSumRestrict,
    SkipMlp { fill: SkipFill },
    AttnHeadsZero,
    AttnSkipZero,
    AttnLinearize,
    EqSelfAttnZero,
}

impl AblationMode {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Restricted { .. } => "restricted",
            Self::Excluded { .. } => "excluded",
            Self::SingleFrequency { .. } => "single_frequency",
            Self::WlProjectKeep { .. } => "wl_project_keep",
            Self::WlProjectNull { .. } => "wl_project_null",
            Self::NeuronPolyReplace => "neuron_poly_replace",
            Self::NeuronSumRestrict => "neuron_sum_restrict",
            Self::SkipMlp { .. } => "skip_mlp",
            Self::AttnHeadsZero => "attn_heads_zero",
            Self::AttnSkipZero => "attn_skip_zero",
            Self::AttnLinearize => "attn_linearize",
            Self::EqSelfAttnZero => "eq_self_attn_zero",
        }
    }

    /// Mode parameters as a compact string, for tables.
    pub fn parameters(&self) -> String {
        let keys = |ks: &[usize]| ks.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(" ");
        let sub = |s: &KeySubspace| match s {
            KeySubspace::SumDirections => "sum",
            KeySubspace::FullBlock => "block",
        };
        match self {
            Self::Restricted { keys: ks, subspace } | Self::Excluded { keys: ks, subspace } => {
                format!("keys={} subspace={}", keys(ks), sub(subspace))
            }
            Self::SingleFrequency { k } => format!("k={k}"),
            Self::WlProjectKeep { keys: ks } | Self::WlProjectNull { keys: ks } => format!("keys={}", keys(ks)),
            Self::SkipMlp { fill } => match fill {
                SkipFill::Zero => "fill=zero".into(),
                SkipFill::Mean => "fill=mean".into(),
            },
            _ => String::new(),
        }
    }

    pub fn is_logit_space(&self) -> bool {
        matches!(
            self,
            Self::Restricted { .. } | Self::Excluded { .. } | Self::SingleFrequency { .. }
        )
    }

    /// Excluded loss is a train-set measure; everything else is read off
    /// the held-out pairs.
    pub fn default_split(&self) -> EvalSplit {
        match self {
            Self::Excluded { .. } => EvalSplit::Train,
            _ => EvalSplit::Test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub mode: String,
    pub parameters: String,
    pub split: Option<EvalSplit>,
    pub loss: f64,
    pub accuracy: f64,
    pub baseline_loss: f64,
    pub baseline_accuracy: f64,
    /// `loss / baseline_loss`.
    pub ratio: f64,
}

impl AblationResult {
    fn new(mode: &AblationMode, (loss, accuracy): (f64, f64), (baseline_loss, baseline_accuracy): (f64, f64)) -> Self {
        Self {
            mode: mode.name().into(),
            parameters: mode.parameters(),
            split: None,
            loss,
            accuracy,
            baseline_loss,
            baseline_accuracy,
            ratio: loss / baseline_loss,
        }
    }

    pub fn with_split(mut self, split: EvalSplit) -> Self {
        self.split = Some(split);
        self
    }
}

pub fn write_ablation_csv(results: &[AblationResult], path: &Path) -> Result<()> {
    write_csv(
        path,
        &["mode", "parameters", "split", "loss", "accuracy", "baseline_loss", "baseline_accuracy", "ratio"],
        results.iter().map(|r| {
            vec![
                r.mode.clone(),
                r.parameters.clone(),
                match r.split {
                    Some(EvalSplit::Train) => "train".into(),
                    Some(EvalSplit::Test) => "test".into(),
                    None => String::new(),
                },
                sig17(r.loss),
                sig17(r.accuracy),
                sig17(r.baseline_loss),
                sig17(r.baseline_accuracy),
                sig17(r.ratio),
            ]
        }),
    )
}

/// Rows of a `[a, b, c]` logit tensor for the given pairs.
pub fn pair_logits(logits: &Array3<f64>, pairs: &[Example]) -> Array2<f64> {
    let p = logits.dim().2;
    let mut out = Array2::zeros((pairs.len(), p));
    for (mut row, e) in out.rows_mut().into_iter().zip(pairs) {
        row.assign(&logits.slice(ndarray::s![e.a, e.b, ..]));
    }
    out
}

fn score_pairs(logits: &Array3<f64>, pairs: &[Example]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::arg("ablation needs at least one evaluation pair"));
    }
    let targets: Vec<usize> = pairs.iter().map(|e| e.target).collect();
    score_logits(&pair_logits(logits, pairs), &targets)
}

/// Zeroes the full `{cos, sin} x {cos, sin}` blocks of `ks`.
pub fn zero_frequency_blocks(logits: &Array3<f64>, ks: &[usize]) -> Result<Array3<f64>> {
    let basis = make_basis(logits.dim().0)?;
    let spec = dft_logits(logits, &basis)?;
    let (_, rest) = split_key_components(&spec, ks, KeySubspace::FullBlock, false)?;
    Spectrum2D { p: spec.p, coeffs: rest }.reconstruct(&basis)
}

/// The logit tensor after a logit-space ablation.
pub fn ablated_logits(logits: &Array3<f64>, mode: &AblationMode) -> Result<Array3<f64>> {
    let p = logits.dim().0;
    if logits.dim() != (p, p, p) {
        return Err(Error::arg("logit tensor must be p x p x p"));
    }
    match mode {
        AblationMode::Restricted { keys, subspace } => {
            let basis = make_basis(p)?;
            let spec = dft_logits(logits, &basis)?;
            let (kept, _) = split_key_components(&spec, keys, *subspace, true)?;
            Spectrum2D { p, coeffs: kept }.reconstruct(&basis)
        }
        AblationMode::Excluded { keys, .. } if keys.is_empty() => Ok(logits.clone()),
        AblationMode::Excluded { keys, subspace } => {
            let basis = make_basis(p)?;
            let spec = dft_logits(logits, &basis)?;
            let (_, rest) = split_key_components(&spec, keys, *subspace, false)?;
            Spectrum2D { p, coeffs: rest }.reconstruct(&basis)
        }
        AblationMode::SingleFrequency { k } => zero_frequency_blocks(logits, &[*k]),
        other => Err(Error::arg(format!("{} is not a logit-space ablation", other.name()))),
    }
}

/// Ablates the full `[a, b, c]` logit tensor of one sweep and scores the
/// given pairs against the unablated tensor.
pub fn ablate_logit_space(logits: &Array3<f64>, mode: &AblationMode, pairs: &[Example]) -> Result<AblationResult> {
    let baseline = score_pairs(logits, pairs)?;
    let ablated = ablated_logits(logits, mode)?;
    Ok(AblationResult::new(mode, score_pairs(&ablated, pairs)?, baseline))
}

/// Fits a model ablation may depend on.
#[derive(Clone, Copy, Default)]
pub struct Prerequisites<'a> {
    pub neurons: Option<&'a NeuronFits>,
    pub attention: Option<&'a [AttentionFit]>,
}

enum Surgery {
    Project { basis: Array2<f64>, keep: bool },
    Neurons { fits: Vec<Option<(usize, Vec<f64>)>>, sum_only: bool },
    Skip(Option<Array1<f64>>),
    HeadsZero,
    SkipZero,
    Linearize(Vec<f64>),
    EqSelfZero,
}

struct SurgeryHook {
    surgery: Surgery,
    p: usize,
    last_layer: usize,
}

fn to_f64<T: Scalar>(m: &Array2<T>) -> Array2<f64> {
    m.mapv(|x| x.as_f64())
}

impl<T: Scalar> Hook<T> for SurgeryHook {
    fn attention_pattern(
        &self,
        layer: usize,
        query: usize,
        _ctx: &HookCtx<'_>,
        scores: &Array3<T>,
        pattern: &mut Array3<T>,
    ) {
        if query != 2 {
            return;
        }
        match &self.surgery {
            Surgery::Linearize(slopes) if layer == 0 => {
                for e in 0..pattern.dim().0 {
                    for (h, &slope) in slopes.iter().enumerate() {
                        let gap = scores[[e, h, 0]].as_f64() - scores[[e, h, 1]].as_f64();
                        let a0 = 0.5 + slope * gap;
                        pattern[[e, h, 0]] = T::from_f64_lossy(a0);
                        pattern[[e, h, 1]] = T::from_f64_lossy(1.0 - a0);
                        pattern[[e, h, 2]] = T::zero();
                    }
                }
            }
            Surgery::EqSelfZero => {
                for mut lane in pattern.lanes_mut(ndarray::Axis(2)) {
                    let rest = lane[0] + lane[1];
                    lane[0] = lane[0] / rest;
                    lane[1] = lane[1] / rest;
                    lane[2] = T::zero();
                }
            }
            _ => {}
        }
    }

    fn zero_attention_output(&self, _layer: usize) -> bool {
        matches!(self.surgery, Surgery::HeadsZero)
    }

    fn zero_attention_skip(&self, _layer: usize) -> bool {
        matches!(self.surgery, Surgery::SkipZero)
    }

    fn mlp_post(&self, layer: usize, _query: usize, ctx: &HookCtx<'_>, post: &mut Array2<T>) {
        if layer != self.last_layer {
            return;
        }
        match &self.surgery {
            Surgery::Project { basis, keep } => {
                let x = to_f64(post);
                let inside = x.dot(&basis.t()).dot(basis);
                let out = if *keep { inside } else { &x - &inside };
                post.zip_mut_with(&out, |d, &s| *d = T::from_f64_lossy(s));
            }
            Surgery::Neurons { fits, sum_only } => {
                for (e, mut row) in post.rows_mut().into_iter().enumerate() {
                    let (a, b) = (ctx.a[e], ctx.b[e]);
                    for (n, fit) in fits.iter().enumerate() {
                        let Some((k, coefs)) = fit else { continue };
                        let v = if *sum_only {
                            let (c, s) = neuron_sum_part(coefs);
                            let t = 2.0 * std::f64::consts::PI * (*k * ((a + b) % self.p)) as f64 / self.p as f64;
                            c * t.cos() + s * t.sin()
                        } else {
                            neuron_poly_value(coefs, self.p, *k, a, b)
                        };
                        row[n] = T::from_f64_lossy(v);
                    }
                }
            }
            _ => {}
        }
    }

    fn mlp_skip(&self, layer: usize, _query: usize, skip: &mut Array2<T>) {
        if layer != self.last_layer {
            return;
        }
        if let Surgery::Skip(fill) = &self.surgery {
            match fill {
                None => skip.fill(T::zero()),
                Some(mean) => {
                    for mut row in skip.rows_mut() {
                        row.zip_mut_with(mean, |d, &s| *d = T::from_f64_lossy(s));
                    }
                }
            }
        }
    }
}

/// Orthonormal rows spanning the key-frequency directions of `W_L` in
/// neuron space.
pub fn wl_key_subspace<T: Scalar>(params: &ModelParams<T>, keys: &[usize]) -> Result<Array2<f64>> {
    let basis = make_basis(params.config.p)?;
    let wl = params.neuron_logit_map();
    Ok(factor_wl(wl.view(), &basis, keys)?.neuron_subspace())
}

/// Projects activation rows onto (`keep`) or off the row space of `subspace`.
pub fn project_activations(acts: &Array2<f64>, subspace: &Array2<f64>, keep: bool) -> Array2<f64> {
    let inside = acts.dot(&subspace.t()).dot(subspace);
    if keep {
        inside
    } else {
        acts - &inside
    }
}

fn mean_mlp_skip<T: Scalar>(params: &ModelParams<T>, pairs: &[Example]) -> Result<Array1<f64>> {
    let rows: Vec<Array1<f64>> = pairs
        .par_iter()
        .map(|e| forward(params, e.a, e.b).map(|c| c.x1().clone()))
        .collect::<Result<_>>()?;
    let mut sum = Array1::zeros(params.config.d_model);
    for r in &rows {
        sum += r;
    }
    Ok(sum / pairs.len() as f64)
}

fn surgery_for<T: Scalar>(
    params: &ModelParams<T>,
    mode: &AblationMode,
    pairs: &[Example],
    pre: &Prerequisites<'_>,
) -> Result<Surgery> {
    let cfg = &params.config;
    Ok(match mode {
        AblationMode::WlProjectKeep { keys } | AblationMode::WlProjectNull { keys } => Surgery::Project {
            basis: wl_key_subspace(params, keys)?,
            keep: matches!(mode, AblationMode::WlProjectKeep { .. }),
        },
        AblationMode::NeuronPolyReplace | AblationMode::NeuronSumRestrict => {
            let nf = pre
                .neurons
                .ok_or_else(|| Error::Precondition(format!("{} needs neuron fits", mode.name())))?;
            if nf.fits.len() != cfg.d_mlp {
                return Err(Error::Precondition(format!(
                    "neuron fits cover {} neurons, model has {}",
                    nf.fits.len(),
                    cfg.d_mlp
                )));
            }
            Surgery::Neurons {
                fits: nf
                    .fits
                    .iter()
                    .map(|f| f.cluster.map(|k| (k, f.coefficients.clone())))
                    .collect(),
                sum_only: matches!(mode, AblationMode::NeuronSumRestrict),
            }
        }
        AblationMode::SkipMlp { fill: SkipFill::Zero } => Surgery::Skip(None),
        AblationMode::SkipMlp { fill: SkipFill::Mean } => Surgery::Skip(Some(mean_mlp_skip(params, pairs)?)),
        AblationMode::AttnHeadsZero => Surgery::HeadsZero,
        AblationMode::AttnSkipZero => Surgery::SkipZero,
        AblationMode::AttnLinearize => {
            let fits = pre
                .attention
                .ok_or_else(|| Error::Precondition("attn_linearize needs attention fits".into()))?;
            if fits.len() != cfg.n_heads {
                return Err(Error::Precondition(format!(
                    "attention fits cover {} heads, model has {}",
                    fits.len(),
                    cfg.n_heads
                )));
            }
            Surgery::Linearize(fits.iter().map(|f| f.sigmoid_slope).collect())
        }
        AblationMode::EqSelfAttnZero => Surgery::EqSelfZero,
        other => return Err(Error::arg(format!("{} is a logit-space ablation", other.name()))),
    })
}

/// Runs the model with one surgical modification and scores it on `pairs`
/// against the unmodified model.
pub fn ablate_model<T: Scalar>(
    params: &ModelParams<T>,
    mode: &AblationMode,
    pairs: &[Example],
    pre: &Prerequisites<'_>,
) -> Result<AblationResult> {
    if pairs.is_empty() {
        return Err(Error::arg("ablation needs at least one evaluation pair"));
    }
    let hook = SurgeryHook {
        surgery: surgery_for(params, mode, pairs, pre)?,
        p: params.config.p,
        last_layer: params.config.n_layers - 1,
    };
    let a: Vec<usize> = pairs.iter().map(|e| e.a).collect();
    let b: Vec<usize> = pairs.iter().map(|e| e.b).collect();
    let targets: Vec<usize> = pairs.iter().map(|e| e.target).collect();
    let base = logits_with_hook(params, &a, &b, &crate::model::NoHook)?.mapv(|x| x.as_f64());
    let ablated = logits_with_hook(params, &a, &b, &hook)?.mapv(|x| x.as_f64());
    Ok(AblationResult::new(
        mode,
        score_logits(&ablated, &targets)?,
        score_logits(&base, &targets)?,
    ))
}

use ndarray::{s, Array1, Array2, Array3, Axis};
use rayon::prelude::*;

use super::params::{Block, ModelParams, N_CTX};
use crate::error::{Error, Result};
use crate::numerics::{argmax, log_softmax_xent, RngStream, Scalar};

/// Number of examples processed together. Results never depend on the
/// thread count because chunk boundaries are fixed and partial sums are
/// combined in chunk order.
pub const CHUNK: usize = 512;

/// One labelled input `a + b = target (mod p)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Example {
    pub a: usize,
    pub b: usize,
    pub target: usize,
}

impl Example {
    pub fn new(a: usize, b: usize, p: usize) -> Self {
        Self {
            a,
            b,
            target: (a + b) % p,
        }
    }
}

/// Inputs visible to a [`Hook`] for the current batch.
pub struct HookCtx<'a> {
    pub a: &'a [usize],
    pub b: &'a [usize],
}

/// Interventions applied during a forward pass. Every method defaults to
/// leaving the computation untouched; hooks are only honoured by the
/// evaluation paths, never by gradient computation.
pub trait Hook<T: Scalar>: Sync {
    /// Edit the attention pattern (`batch x heads x keys`) for `query`.
    fn attention_pattern(
        &self,
        _layer: usize,
        _query: usize,
        _ctx: &HookCtx<'_>,
        _scores: &Array3<T>,
        _pattern: &mut Array3<T>,
    ) {
    }

    fn zero_attention_output(&self, _layer: usize) -> bool {
        false
    }

    /// Drop the residual connection around attention.
    fn zero_attention_skip(&self, _layer: usize) -> bool {
        false
    }

    /// Edit the post-ReLU MLP activations (`batch x d_mlp`).
    fn mlp_post(&self, _layer: usize, _query: usize, _ctx: &HookCtx<'_>, _post: &mut Array2<T>) {}

    /// Edit the residual term carried around the MLP (`batch x d_model`).
    fn mlp_skip(&self, _layer: usize, _query: usize, _skip: &mut Array2<T>) {}
}

/// The identity intervention.
pub struct NoHook;

impl<T: Scalar> Hook<T> for NoHook {}

/// Rows feeding one sequence position. Examples index into `rows`, which
/// lets the first layer work on per-token tables instead of per-example
/// copies.
pub(crate) struct PosRows<T> {
    pub rows: Array2<T>,
    /// Example `e` reads row `index[e]`; `None` means row `e`.
    pub index: Option<Vec<usize>>,
    /// Input token of each row (first layer only).
    pub tokens: Option<Vec<usize>>,
}

pub(crate) fn gather<T: Scalar>(rows: &Array2<T>, index: Option<&[usize]>) -> Array2<T> {
    match index {
        None => rows.clone(),
        Some(idx) => rows.select(Axis(0), idx),
    }
}

pub(crate) fn scatter_add<T: Scalar>(
    grad: &Array2<T>,
    index: Option<&[usize]>,
    n_rows: usize,
) -> Array2<T> {
    match index {
        None => grad.clone(),
        Some(idx) => {
            let mut out = Array2::zeros((n_rows, grad.ncols()));
            for (e, &r) in idx.iter().enumerate() {
                let mut dst = out.row_mut(r);
                dst += &grad.row(e);
            }
            out
        }
    }
}

pub(crate) struct QueryCache<T> {
    pub pos: usize,
    pub q: Array2<T>,
    pub scores: Array3<T>,
    pub pattern: Array3<T>,
    pub z: Array2<T>,
    pub x_mid: Array2<T>,
    pub pre: Array2<T>,
    pub post: Array2<T>,
    pub mask: Option<Array2<T>>,
    pub x_out: Array2<T>,
}

pub(crate) struct BlockCache<T> {
    pub inputs: Vec<PosRows<T>>,
    pub k: Vec<Array2<T>>,
    pub v: Vec<Array2<T>>,
    pub queries: Vec<QueryCache<T>>,
}

pub(crate) struct ForwardTrace<T> {
    pub blocks: Vec<BlockCache<T>>,
    pub final_resid: Array2<T>,
    pub logits: Array2<T>,
}

fn embed_inputs<T: Scalar>(params: &ModelParams<T>, a: &[usize], b: &[usize]) -> Vec<PosRows<T>> {
    let cfg = &params.config;
    let p = cfg.p;
    let n = a.len();
    let pos_row = |pos: usize| params.w_pos.column(pos).to_owned();
    let eq_row = {
        let mut r = params.w_e.column(cfg.eq_token()).to_owned();
        r += &pos_row(2);
        r.insert_axis(Axis(0))
    };
    let token_rows = |tokens: &[usize], pos: usize| -> Array2<T> {
        let mut rows = params.w_e.t().select(Axis(0), tokens);
        rows += &pos_row(pos);
        rows
    };
    if n >= p {
        let all: Vec<usize> = (0..p).collect();
        vec![
            PosRows {
                rows: token_rows(&all, 0),
                index: Some(a.to_vec()),
                tokens: Some(all.clone()),
            },
            PosRows {
                rows: token_rows(&all, 1),
                index: Some(b.to_vec()),
                tokens: Some(all),
            },
            PosRows {
                rows: eq_row,
                index: Some(vec![0; n]),
                tokens: Some(vec![cfg.eq_token()]),
            },
        ]
    } else {
        vec![
            PosRows {
                rows: token_rows(a, 0),
                index: None,
                tokens: Some(a.to_vec()),
            },
            PosRows {
                rows: token_rows(b, 1),
                index: None,
                tokens: Some(b.to_vec()),
            },
            PosRows {
                rows: eq_row.broadcast((n, cfg.d_model)).unwrap().to_owned(),
                index: None,
                tokens: Some(vec![cfg.eq_token(); n]),
            },
        ]
    }
}

fn softmax_rows<T: Scalar>(scores: &Array3<T>) -> Array3<T> {
    let mut out = scores.clone();
    for mut lane in out.lanes_mut(Axis(2)) {
        let max = lane.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        lane.iter_mut().for_each(|x| {
            *x = (*x - max).exp();
            sum = sum + *x;
        });
        lane.iter_mut().for_each(|x| *x = *x / sum);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn block_forward<T: Scalar>(
    blk: &Block<T>,
    layer: usize,
    n_heads: usize,
    attn_scale: T,
    inputs: Vec<PosRows<T>>,
    queries: &[usize],
    ctx: &HookCtx<'_>,
    hook: &dyn Hook<T>,
    mut dropout: Option<(f64, &mut RngStream)>,
) -> BlockCache<T> {
    let n = ctx.a.len();
    let hd = blk.w_q.nrows();
    let dh = hd / n_heads;
    let k: Vec<Array2<T>> = inputs
        .iter()
        .map(|r| gather(&r.rows.dot(&blk.w_k.t()), r.index.as_deref()))
        .collect();
    let v: Vec<Array2<T>> = inputs
        .iter()
        .map(|r| gather(&r.rows.dot(&blk.w_v.t()), r.index.as_deref()))
        .collect();

    let mut caches = Vec::with_capacity(queries.len());
    for &pos in queries {
        let inp = &inputs[pos];
        let q = gather(&inp.rows.dot(&blk.w_q.t()), inp.index.as_deref());
        let n_keys = pos + 1;
        let mut scores = Array3::<T>::zeros((n, n_heads, n_keys));
        {
            let qs = q.as_slice().unwrap();
            for i in 0..n_keys {
                let ks = k[i].as_slice().unwrap();
                for e in 0..n {
                    for h in 0..n_heads {
                        let off = e * hd + h * dh;
                        let mut acc = T::zero();
                        for t in 0..dh {
                            acc = acc + qs[off + t] * ks[off + t];
                        }
                        scores[[e, h, i]] = acc * attn_scale;
                    }
                }
            }
        }
        let mut pattern = softmax_rows(&scores);
        hook.attention_pattern(layer, pos, ctx, &scores, &mut pattern);

        let mut z = Array2::<T>::zeros((n, hd));
        {
            let zs = z.as_slice_mut().unwrap();
            for i in 0..n_keys {
                let vs = v[i].as_slice().unwrap();
                for e in 0..n {
                    for h in 0..n_heads {
                        let w = pattern[[e, h, i]];
                        let off = e * hd + h * dh;
                        for t in 0..dh {
                            zs[off + t] = zs[off + t] + w * vs[off + t];
                        }
                    }
                }
            }
        }

        let mut x_mid = if hook.zero_attention_skip(layer) {
            Array2::zeros((n, blk.w_o.nrows()))
        } else {
            gather(&inp.rows, inp.index.as_deref())
        };
        if !hook.zero_attention_output(layer) {
            x_mid += &z.dot(&blk.w_o.t());
        }

        let mut pre = x_mid.dot(&blk.w_in.t());
        pre += &blk.b_in;
        let mut post = pre.mapv(|x| x.max(T::zero()));
        let mask = dropout.as_mut().map(|(p, rng)| {
            let keep = T::from_f64_lossy(1.0 / (1.0 - *p));
            Array2::from_shape_simple_fn(post.dim(), || {
                if rng.uniform() < *p {
                    T::zero()
                } else {
                    keep
                }
            })
        });
        if let Some(m) = &mask {
            post *= m;
        }
        hook.mlp_post(layer, pos, ctx, &mut post);

        let mut x_out = x_mid.clone();
        hook.mlp_skip(layer, pos, &mut x_out);
        x_out += &post.dot(&blk.w_out.t());
        x_out += &blk.b_out;

        caches.push(QueryCache {
            pos,
            q,
            scores,
            pattern,
            z,
            x_mid,
            pre,
            post,
            mask,
            x_out,
        });
    }
    BlockCache {
        inputs,
        k,
        v,
        queries: caches,
    }
}

pub(crate) fn forward_trace<T: Scalar>(
    params: &ModelParams<T>,
    a: &[usize],
    b: &[usize],
    hook: &dyn Hook<T>,
    mut dropout: Option<(f64, &mut RngStream)>,
) -> ForwardTrace<T> {
    let cfg = &params.config;
    let ctx = HookCtx { a, b };
    let n_layers = params.blocks.len();
    let mut inputs = embed_inputs(params, a, b);
    let mut caches = Vec::with_capacity(n_layers);
    for (layer, blk) in params.blocks.iter().enumerate() {
        let last = layer + 1 == n_layers;
        let queries: Vec<usize> = if last { vec![N_CTX - 1] } else { (0..N_CTX).collect() };
        let drop = dropout.as_mut().map(|(p, rng)| (*p, &mut **rng));
        let cache = block_forward(blk, layer, cfg.n_heads, T::from_f64_lossy(cfg.attn_scale()), inputs, &queries, &ctx, hook, drop);
        if !last {
            inputs = cache
                .queries
                .iter()
                .map(|qc| PosRows {
                    rows: qc.x_out.clone(),
                    index: None,
                    tokens: None,
                })
                .collect();
        } else {
            inputs = Vec::new();
        }
        caches.push(cache);
    }
    let final_resid = caches
        .last()
        .and_then(|c| c.queries.last())
        .map(|q| q.x_out.clone())
        .expect("model has at least one block");
    let logits = final_resid.dot(&params.w_u.t());
    ForwardTrace {
        blocks: caches,
        final_resid,
        logits,
    }
}

fn check_inputs(p: usize, a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::arg("input vectors differ in length"));
    }
    if let Some(&x) = a.iter().chain(b).find(|&&x| x >= p) {
        return Err(Error::arg(format!("residue {x} out of range for modulus {p}")));
    }
    Ok(())
}

/// Logits (`n x p`) for every `(a[i], b[i])`, with an optional intervention.
pub fn logits_with_hook<T: Scalar>(
    params: &ModelParams<T>,
    a: &[usize],
    b: &[usize],
    hook: &dyn Hook<T>,
) -> Result<Array2<T>> {
    check_inputs(params.config.p, a, b)?;
    let chunks: Vec<Array2<T>> = a
        .par_chunks(CHUNK)
        .zip(b.par_chunks(CHUNK))
        .map(|(ca, cb)| forward_trace(params, ca, cb, hook, None).logits)
        .collect();
    let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
    if views.is_empty() {
        return Ok(Array2::zeros((0, params.config.p)));
    }
    Ok(ndarray::concatenate(Axis(0), &views).expect("matching widths"))
}

pub fn logits<T: Scalar>(params: &ModelParams<T>, a: &[usize], b: &[usize]) -> Result<Array2<T>> {
    logits_with_hook(params, a, b, &NoHook)
}

/// Mean cross-entropy (accumulated in `f64`) and accuracy of a logit matrix.
pub fn score_logits<T: Scalar>(logits: &Array2<T>, targets: &[usize]) -> Result<(f64, f64)> {
    if targets.is_empty() {
        return Err(Error::arg("cannot score an empty set of examples"));
    }
    if logits.nrows() != targets.len() {
        return Err(Error::arg("logit rows and targets differ in length"));
    }
    let mut total = 0.0;
    let mut correct = 0usize;
    for (row, &t) in logits.outer_iter().zip(targets) {
        let row = row.as_slice().expect("contiguous logits");
        total += log_softmax_xent(row, t)?;
        if argmax(row) == t {
            correct += 1;
        }
    }
    let n = targets.len() as f64;
    Ok((total / n, correct as f64 / n))
}

/// Mean loss and accuracy over `examples`.
pub fn batch_loss<T: Scalar>(params: &ModelParams<T>, examples: &[Example]) -> Result<(f64, f64)> {
    batch_loss_with_hook(params, examples, &NoHook)
}

pub fn batch_loss_with_hook<T: Scalar>(
    params: &ModelParams<T>,
    examples: &[Example],
    hook: &dyn Hook<T>,
) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Err(Error::arg("cannot evaluate an empty set of examples"));
    }
    let a: Vec<usize> = examples.iter().map(|e| e.a).collect();
    let b: Vec<usize> = examples.iter().map(|e| e.b).collect();
    let targets: Vec<usize> = examples.iter().map(|e| e.target).collect();
    if let Some(t) = targets.iter().find(|&&t| t >= params.config.p) {
        return Err(Error::arg(format!("target {t} out of range")));
    }
    let logits = logits_with_hook(params, &a, &b, hook)?;
    score_logits(&logits, &targets)
}

/// Activations of the final query position in one block.
#[derive(Clone, Debug)]
pub struct LayerActivations {
    /// Attention scores from `=` to each position, `heads x 3`.
    pub attn_scores: Array2<f64>,
    /// Softmax of the scores; rows sum to one.
    pub attn_pattern: Array2<f64>,
    /// Per-head contribution `W_O^j W_V^j (x . A^j)`, `heads x d_model`.
    pub head_outputs: Array2<f64>,
    /// Residual after attention.
    pub x_mid: Array1<f64>,
    pub mlp_pre: Array1<f64>,
    pub mlp_post: Array1<f64>,
    /// Residual after the MLP.
    pub x_out: Array1<f64>,
}

/// Every intermediate of one forward pass.
#[derive(Clone, Debug)]
pub struct ActivationCache {
    /// Initial residual stream, one row per position (`3 x d_model`).
    pub x0: Array2<f64>,
    pub layers: Vec<LayerActivations>,
    pub logits: Array1<f64>,
}

impl ActivationCache {
    /// Post-attention residual at `=` in the last layer.
    pub fn x1(&self) -> &Array1<f64> {
        &self.layers.last().unwrap().x_mid
    }

    /// MLP activations of the last layer.
    pub fn mlp_post(&self) -> &Array1<f64> {
        &self.layers.last().unwrap().mlp_post
    }

    pub fn x2(&self) -> &Array1<f64> {
        &self.layers.last().unwrap().x_out
    }
}

/// Single-input forward pass with the full activation cache.
pub fn forward<T: Scalar>(params: &ModelParams<T>, a: usize, b: usize) -> Result<ActivationCache> {
    let cfg = &params.config;
    check_inputs(cfg.p, &[a], &[b])?;
    let trace = forward_trace(params, &[a], &[b], &NoHook, None);
    let f = |x: T| x.as_f64();
    let x0 = {
        let rows: Vec<Array1<f64>> = trace.blocks[0]
            .inputs
            .iter()
            .map(|r| gather(&r.rows, r.index.as_deref()).row(0).mapv(f))
            .collect();
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        ndarray::stack(Axis(0), &views).unwrap()
    };
    let dh = cfg.d_head();
    let layers = trace
        .blocks
        .iter()
        .zip(&params.blocks)
        .map(|(bc, blk)| {
            let qc = bc.queries.last().unwrap();
            let mut head_outputs = Array2::zeros((cfg.n_heads, cfg.d_model));
            for h in 0..cfg.n_heads {
                let zh = qc.z.slice(s![0, h * dh..(h + 1) * dh]).mapv(f);
                let wo = blk.head_o(h, dh).mapv(f);
                head_outputs.row_mut(h).assign(&wo.dot(&zh));
            }
            LayerActivations {
                attn_scores: qc.scores.index_axis(Axis(0), 0).mapv(f),
                attn_pattern: qc.pattern.index_axis(Axis(0), 0).mapv(f),
                head_outputs,
                x_mid: qc.x_mid.row(0).mapv(f),
                mlp_pre: qc.pre.row(0).mapv(f),
                mlp_post: qc.post.row(0).mapv(f),
                x_out: qc.x_out.row(0).mapv(f),
            }
        })
        .collect();
    Ok(ActivationCache {
        x0,
        layers,
        logits: trace.logits.row(0).mapv(f),
    })
}

/// Activations for every input pair, indexed `[a, b, ...]`.
pub struct FullSweep {
    pub p: usize,
    /// `[a, b, c]`.
    pub logits: Array3<f64>,
    /// Last-layer MLP activations, `[a, b, neuron]`.
    pub mlp_post: Array3<f64>,
    /// Last-layer attention from `=`, `[a, b, head, position]`.
    pub attn_pattern: ndarray::Array4<f64>,
    pub attn_scores: ndarray::Array4<f64>,
}

/// Runs the model on all `p^2` inputs and keeps the tensors the analyses need.
pub fn sweep_all_inputs<T: Scalar>(params: &ModelParams<T>, hook: &dyn Hook<T>) -> FullSweep {
    let cfg = &params.config;
    let p = cfg.p;
    let (a, b): (Vec<usize>, Vec<usize>) = (0..p * p).map(|i| (i / p, i % p)).unzip();
    let parts: Vec<_> = a
        .par_chunks(CHUNK)
        .zip(b.par_chunks(CHUNK))
        .map(|(ca, cb)| {
            let tr = forward_trace(params, ca, cb, hook, None);
            let qc = tr.blocks.last().unwrap().queries.last().unwrap();
            (
                tr.logits.mapv(|x| x.as_f64()),
                qc.post.mapv(|x| x.as_f64()),
                qc.pattern.mapv(|x| x.as_f64()),
                qc.scores.mapv(|x| x.as_f64()),
            )
        })
        .collect();
    let cat2 = |sel: &dyn Fn(&(Array2<f64>, Array2<f64>, Array3<f64>, Array3<f64>)) -> ndarray::ArrayView2<'_, f64>| {
        let views: Vec<_> = parts.iter().map(sel).collect();
        ndarray::concatenate(Axis(0), &views).unwrap()
    };
    let logits = cat2(&|t| t.0.view());
    let post = cat2(&|t| t.1.view());
    let pat_views: Vec<_> = parts.iter().map(|t| t.2.view()).collect();
    let pattern = ndarray::concatenate(Axis(0), &pat_views).unwrap();
    let sc_views: Vec<_> = parts.iter().map(|t| t.3.view()).collect();
    let scores = ndarray::concatenate(Axis(0), &sc_views).unwrap();
    let h = cfg.n_heads;
    FullSweep {
        p,
        logits: logits.into_shape_with_order((p, p, p)).unwrap(),
        mlp_post: post.into_shape_with_order((p, p, cfg.d_mlp)).unwrap(),
        attn_pattern: pattern.into_shape_with_order((p, p, h, N_CTX)).unwrap(),
        attn_scores: scores.into_shape_with_order((p, p, h, N_CTX)).unwrap(),
    }
}

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, Axis};
use rayon::prelude::*;

use super::forward::{forward_trace, scatter_add, BlockCache, Example, NoHook, CHUNK};
use super::params::{col_sums, Block, Gradients, ModelParams, N_CTX};
use crate::error::{Error, Result};
use crate::numerics::{argmax, log_softmax_xent, softmax_into, RngStream, Scalar};

/// Regularization folded into the gradient. Decoupled weight decay is not
/// here; the optimizer applies it.
pub enum Regularizer<'a> {
    None,
    /// `lambda * sum |w|` over weight matrices (biases excluded).
    L1(f64),
    /// Inverted dropout on MLP activations with drop probability `p`.
    Dropout(f64, &'a mut RngStream),
}

/// Loss and gradient of one full-batch evaluation.
pub struct GradOutput<T> {
    /// Objective value: mean cross-entropy plus any L1 penalty.
    pub loss: f64,
    /// Mean cross-entropy alone (with dropout active, the noisy value).
    pub data_loss: f64,
    pub accuracy: f64,
    pub grads: Gradients<T>,
}

fn add_into<T: Scalar>(dst: &mut Array2<T>, a: &ndarray::ArrayView2<'_, T>, b: &Array2<T>) {
    general_mat_mul(T::one(), a, b, T::one(), dst);
}

fn block_backward<T: Scalar>(
    blk: &Block<T>,
    n_heads: usize,
    attn_scale: T,
    cache: &BlockCache<T>,
    d_out: &[Option<Array2<T>>],
    g: &mut Block<T>,
) -> Vec<Array2<T>> {
    let hd = blk.w_q.nrows();
    let dh = hd / n_heads;
    let mut d_rows: Vec<Array2<T>> = cache
        .inputs
        .iter()
        .map(|r| Array2::zeros(r.rows.dim()))
        .collect();
    let n = cache.k[0].nrows();
    let mut dk: Vec<Array2<T>> = (0..N_CTX).map(|_| Array2::zeros((n, hd))).collect();
    let mut dv: Vec<Array2<T>> = (0..N_CTX).map(|_| Array2::zeros((n, hd))).collect();

    for qc in &cache.queries {
        let Some(dx_out) = &d_out[qc.pos] else {
            continue;
        };
        let inp = &cache.inputs[qc.pos];

        // MLP
        let mut dx_mid = dx_out.clone();
        let mut dpost = dx_out.dot(&blk.w_out);
        add_into(&mut g.w_out, &dx_out.t(), &qc.post);
        g.b_out += &col_sums(dx_out);
        if let Some(mask) = &qc.mask {
            dpost *= mask;
        }
        let mut dpre = dpost;
        ndarray::Zip::from(&mut dpre)
            .and(&qc.pre)
            .for_each(|d, &x| {
                if x <= T::zero() {
                    *d = T::zero();
                }
            });
        add_into(&mut g.w_in, &dpre.t(), &qc.x_mid);
        g.b_in += &col_sums(&dpre);
        general_mat_mul(T::one(), &dpre, &blk.w_in, T::one(), &mut dx_mid);

        // residual around attention
        d_rows[qc.pos] += &scatter_add(&dx_mid, inp.index.as_deref(), inp.rows.nrows());

        // attention output
        add_into(&mut g.w_o, &dx_mid.t(), &qc.z);
        let dz = dx_mid.dot(&blk.w_o);

        let n_keys = qc.pos + 1;
        let mut dq = Array2::<T>::zeros((n, hd));
        {
            let dzs = dz.as_slice().unwrap();
            let qs = qc.q.as_slice().unwrap();
            let mut d_pat = Array3::<T>::zeros((n, n_heads, n_keys));
            for i in 0..n_keys {
                let vs = cache.v[i].as_slice().unwrap();
                let dvs = dv[i].as_slice_mut().unwrap();
                for e in 0..n {
                    for h in 0..n_heads {
                        let off = e * hd + h * dh;
                        let w = qc.pattern[[e, h, i]];
                        let mut acc = T::zero();
                        for t in 0..dh {
                            acc = acc + dzs[off + t] * vs[off + t];
                            dvs[off + t] = dvs[off + t] + w * dzs[off + t];
                        }
                        d_pat[[e, h, i]] = acc;
                    }
                }
            }
            // softmax backward
            let mut d_scores = d_pat;
            for e in 0..n {
                for h in 0..n_heads {
                    let mut dot = T::zero();
                    for i in 0..n_keys {
                        dot = dot + qc.pattern[[e, h, i]] * d_scores[[e, h, i]];
                    }
                    for i in 0..n_keys {
                        d_scores[[e, h, i]] = qc.pattern[[e, h, i]] * (d_scores[[e, h, i]] - dot);
                    }
                }
            }
            let dqs = dq.as_slice_mut().unwrap();
            for i in 0..n_keys {
                let ks = cache.k[i].as_slice().unwrap();
                let dks = dk[i].as_slice_mut().unwrap();
                for e in 0..n {
                    for h in 0..n_heads {
                        let off = e * hd + h * dh;
                        let ds = d_scores[[e, h, i]] * attn_scale;
                        for t in 0..dh {
                            dqs[off + t] = dqs[off + t] + ds * ks[off + t];
                            dks[off + t] = dks[off + t] + ds * qs[off + t];
                        }
                    }
                }
            }
        }
        let dq_rows = scatter_add(&dq, inp.index.as_deref(), inp.rows.nrows());
        add_into(&mut g.w_q, &dq_rows.t(), &inp.rows);
        general_mat_mul(T::one(), &dq_rows, &blk.w_q, T::one(), &mut d_rows[qc.pos]);
    }

    for (i, inp) in cache.inputs.iter().enumerate() {
        let dk_rows = scatter_add(&dk[i], inp.index.as_deref(), inp.rows.nrows());
        add_into(&mut g.w_k, &dk_rows.t(), &inp.rows);
        general_mat_mul(T::one(), &dk_rows, &blk.w_k, T::one(), &mut d_rows[i]);
        let dv_rows = scatter_add(&dv[i], inp.index.as_deref(), inp.rows.nrows());
        add_into(&mut g.w_v, &dv_rows.t(), &inp.rows);
        general_mat_mul(T::one(), &dv_rows, &blk.w_v, T::one(), &mut d_rows[i]);
    }
    d_rows
}

struct ChunkGrad<T> {
    ce_sum: f64,
    correct: usize,
    grads: Gradients<T>,
}

fn chunk_grad<T: Scalar>(
    params: &ModelParams<T>,
    examples: &[Example],
    inv_n: f64,
    dropout: Option<(f64, RngStream)>,
) -> Result<ChunkGrad<T>> {
    let cfg = &params.config;
    let a: Vec<usize> = examples.iter().map(|e| e.a).collect();
    let b: Vec<usize> = examples.iter().map(|e| e.b).collect();
    let mut drop_rng = dropout;
    let trace = forward_trace(
        params,
        &a,
        &b,
        &NoHook,
        drop_rng.as_mut().map(|(p, rng)| (*p, rng)),
    );

    let n = examples.len();
    let p = cfg.p;
    let mut dlogits = Array2::<T>::zeros((n, p));
    let mut probs = vec![0.0; p];
    let mut ce_sum = 0.0;
    let mut correct = 0;
    for (e, ex) in examples.iter().enumerate() {
        let row = trace.logits.row(e);
        let row = row.as_slice().unwrap();
        ce_sum += log_softmax_xent(row, ex.target)?;
        if argmax(row) == ex.target {
            correct += 1;
        }
        softmax_into(row, &mut probs);
        probs[ex.target] -= 1.0;
        for (c, pr) in probs.iter().enumerate() {
            dlogits[[e, c]] = T::from_f64_lossy(pr * inv_n);
        }
    }

    let mut g = params.zeros_like();
    add_into(&mut g.w_u, &dlogits.t(), &trace.final_resid);
    let d_resid = dlogits.dot(&params.w_u);

    let n_layers = params.blocks.len();
    let mut d_out: Vec<Option<Array2<T>>> = vec![None; N_CTX];
    d_out[N_CTX - 1] = Some(d_resid);
    for layer in (0..n_layers).rev() {
        let d_rows = block_backward(
            &params.blocks[layer],
            cfg.n_heads,
            T::from_f64_lossy(cfg.attn_scale()),
            &trace.blocks[layer],
            &d_out,
            &mut g.blocks[layer],
        );
        if layer > 0 {
            d_out = d_rows.into_iter().map(Some).collect();
        } else {
            for (pos, (inp, dr)) in trace.blocks[0].inputs.iter().zip(&d_rows).enumerate() {
                let tokens = inp.tokens.as_ref().expect("first layer rows carry tokens");
                for (r, &tok) in tokens.iter().enumerate() {
                    let mut col = g.w_e.column_mut(tok);
                    col += &dr.row(r);
                }
                let mut col = g.w_pos.column_mut(pos);
                col += &dr.sum_axis(Axis(0));
            }
        }
    }
    Ok(ChunkGrad {
        ce_sum,
        correct,
        grads: g,
    })
}

/// Analytic gradient of the mean cross-entropy over `examples`.
pub fn grads<T: Scalar>(
    params: &ModelParams<T>,
    examples: &[Example],
    regularizer: Regularizer<'_>,
) -> Result<GradOutput<T>> {
    if examples.is_empty() {
        return Err(Error::arg("cannot take gradients over an empty set of examples"));
    }
    let p = params.config.p;
    if let Some(ex) = examples.iter().find(|e| e.a >= p || e.b >= p || e.target >= p) {
        return Err(Error::arg(format!("example {ex:?} out of range for modulus {p}")));
    }
    let mut l1 = None;
    let mut dropout: Option<(f64, RngStream)> = None;
    match regularizer {
        Regularizer::None => {}
        Regularizer::L1(lambda) => {
            if !(lambda >= 0.0) {
                return Err(Error::arg(format!("l1 strength must be nonnegative, got {lambda}")));
            }
            l1 = Some(lambda);
        }
        Regularizer::Dropout(q, rng) => {
            if !(0.0..1.0).contains(&q) {
                return Err(Error::arg(format!("dropout probability must be in [0, 1), got {q}")));
            }
            // one fresh seed per call, one substream per chunk
            dropout = Some((q, RngStream::new(rng.next_u64())));
        }
    }

    let inv_n = 1.0 / examples.len() as f64;
    let parts: Vec<Result<ChunkGrad<T>>> = examples
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let drop = dropout
                .as_ref()
                .map(|(q, base)| (*q, base.substream(ci as u64 + 1)));
            chunk_grad(params, chunk, inv_n, drop)
        })
        .collect();
    let mut total = params.zeros_like();
    let mut ce_sum = 0.0;
    let mut correct = 0;
    for part in parts {
        let part = part?;
        ce_sum += part.ce_sum;
        correct += part.correct;
        total.add_scaled(&part.grads, T::one());
    }
    let data_loss = ce_sum * inv_n;
    let mut loss = data_loss;
    if let Some(lambda) = l1 {
        loss += apply_l1(params, &mut total, lambda);
    }
    Ok(GradOutput {
        loss,
        data_loss,
        accuracy: correct as f64 * inv_n,
        grads: total,
    })
}

/// Adds `lambda * sign(w)` to the weight-matrix gradients and returns the
/// penalty `lambda * sum |w|`.
pub fn apply_l1<T: Scalar>(params: &ModelParams<T>, grads: &mut Gradients<T>, lambda: f64) -> f64 {
    let mut penalty = 0.0;
    let lam = T::from_f64_lossy(lambda);
    for (w, g) in params.tensors().into_iter().zip(grads.tensors_mut()) {
        if w.is_bias {
            continue;
        }
        for (x, d) in w.data.iter().zip(g.data.iter_mut()) {
            penalty += x.as_f64().abs();
            if *x > T::zero() {
                *d = *d + lam;
            } else if *x < T::zero() {
                *d = *d - lam;
            }
        }
    }
    lambda * penalty
}

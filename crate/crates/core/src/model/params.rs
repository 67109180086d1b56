use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Scalar};

/// Number of tokens in every input sequence: `a b =`.
pub const N_CTX: usize = 3;

/// Shape of the one- or two-layer transformer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Modulus; also the number of output classes.
    pub p: usize,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_n_heads")]
    pub n_heads: usize,
    #[serde(default = "default_d_mlp")]
    pub d_mlp: usize,
    #[serde(default = "default_n_layers")]
    pub n_layers: usize,
    /// Divide attention scores by `sqrt(d_head)`.
    #[serde(default = "default_scale_attention")]
    pub scale_attention: bool,
}

fn default_d_model() -> usize {
    128
}
fn default_n_heads() -> usize {
    4
}
fn default_d_mlp() -> usize {
    512
}
fn default_n_layers() -> usize {
    1
}
fn default_scale_attention() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            p: 113,
            d_model: default_d_model(),
            n_heads: default_n_heads(),
            d_mlp: default_d_mlp(),
            n_layers: default_n_layers(),
            scale_attention: default_scale_attention(),
        }
    }
}

impl ModelConfig {
    pub fn with_p(p: usize) -> Self {
        Self {
            p,
            ..Self::default()
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Factor applied to `q . k` before the attention softmax.
    pub fn attn_scale(&self) -> f64 {
        if self.scale_attention {
            1.0 / (self.d_head() as f64).sqrt()
        } else {
            1.0
        }
    }

    /// Input vocabulary: the residues plus the `=` token (index `p`).
    pub fn vocab_in(&self) -> usize {
        self.p + 1
    }

    pub fn eq_token(&self) -> usize {
        self.p
    }

    pub fn validate(&self) -> Result<()> {
        if !is_prime(self.p) || self.p < 3 {
            return Err(Error::arg(format!("modulus must be an odd prime, got {}", self.p)));
        }
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::arg(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_mlp == 0 {
            return Err(Error::arg("d_mlp must be positive"));
        }
        if !(1..=2).contains(&self.n_layers) {
            return Err(Error::arg(format!("n_layers must be 1 or 2, got {}", self.n_layers)));
        }
        Ok(())
    }
}

pub fn is_prime(n: usize) -> bool {
    if n < 2 {
        return false;
    }
    let mut d = 2;
    while d * d <= n {
        if n % d == 0 {
            return false;
        }
        d += 1;
    }
    true
}

/// Attention + MLP block. Per-head query/key/value maps are stacked by rows
/// (head `j` owns rows `j*d_head..(j+1)*d_head`); the output map is stacked
/// by columns in the same order.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub w_q: Array2<T>,
    pub w_k: Array2<T>,
    pub w_v: Array2<T>,
    pub w_o: Array2<T>,
    pub w_in: Array2<T>,
    pub b_in: Array1<T>,
    pub w_out: Array2<T>,
    pub b_out: Array1<T>,
}

impl<T: Scalar> Block<T> {
    fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            w_q: Array2::zeros((d, d)),
            w_k: Array2::zeros((d, d)),
            w_v: Array2::zeros((d, d)),
            w_o: Array2::zeros((d, d)),
            w_in: Array2::zeros((cfg.d_mlp, d)),
            b_in: Array1::zeros(cfg.d_mlp),
            w_out: Array2::zeros((d, cfg.d_mlp)),
            b_out: Array1::zeros(d),
        }
    }

    fn map<U: Scalar>(&self, f: impl Fn(T) -> U + Copy) -> Block<U> {
        Block {
            w_q: self.w_q.mapv(f),
            w_k: self.w_k.mapv(f),
            w_v: self.w_v.mapv(f),
            w_o: self.w_o.mapv(f),
            w_in: self.w_in.mapv(f),
            b_in: self.b_in.mapv(f),
            w_out: self.w_out.mapv(f),
            b_out: self.b_out.mapv(f),
        }
    }

    /// Query map of head `j` (`d_head x d_model`).
    pub fn head_q(&self, j: usize, d_head: usize) -> ArrayView2<'_, T> {
        self.w_q.slice(ndarray::s![j * d_head..(j + 1) * d_head, ..])
    }

    pub fn head_k(&self, j: usize, d_head: usize) -> ArrayView2<'_, T> {
        self.w_k.slice(ndarray::s![j * d_head..(j + 1) * d_head, ..])
    }

    pub fn head_v(&self, j: usize, d_head: usize) -> ArrayView2<'_, T> {
        self.w_v.slice(ndarray::s![j * d_head..(j + 1) * d_head, ..])
    }

    /// Output map of head `j` (`d_model x d_head`).
    pub fn head_o(&self, j: usize, d_head: usize) -> ArrayView2<'_, T> {
        self.w_o.slice(ndarray::s![.., j * d_head..(j + 1) * d_head])
    }
}

/// All weights of the transformer. Gradients and optimizer moments reuse
/// this type, so every array here is shape-congruent across those uses.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    /// `d_model x (p+1)`; column `p` embeds `=`.
    pub w_e: Array2<T>,
    /// `d_model x 3`.
    pub w_pos: Array2<T>,
    pub blocks: Vec<Block<T>>,
    /// `p x d_model`; there is no row for `=`.
    pub w_u: Array2<T>,
}

/// Gradients share the parameter layout.
pub type Gradients<T> = ModelParams<T>;

/// A named, flat view of one parameter array.
pub struct TensorView<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub is_bias: bool,
    pub data: &'a [T],
}

pub struct TensorViewMut<'a, T> {
    pub name: String,
    pub is_bias: bool,
    pub data: &'a mut [T],
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        Self {
            config: config.clone(),
            w_e: Array2::zeros((d, config.vocab_in())),
            w_pos: Array2::zeros((d, N_CTX)),
            blocks: (0..config.n_layers).map(|_| Block::zeros(config)).collect(),
            w_u: Array2::zeros((config.p, d)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U + Copy) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            w_e: self.w_e.mapv(f),
            w_pos: self.w_pos.mapv(f),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            w_u: self.w_u.mapv(f),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        self.map(|x| U::from_f64_lossy(x.as_f64()))
    }

    /// The last block, whose MLP feeds the unembedding.
    pub fn last_block(&self) -> &Block<T> {
        self.blocks.last().expect("at least one block")
    }

    /// Every parameter array in a fixed order with stable names.
    pub fn tensors(&self) -> Vec<TensorView<'_, T>> {
        fn v2<'a, T>(name: String, a: &'a Array2<T>, is_bias: bool) -> TensorView<'a, T> {
            TensorView {
                name,
                shape: a.shape().to_vec(),
                is_bias,
                data: a.as_slice().expect("standard layout"),
            }
        }
        fn v1<'a, T>(name: String, a: &'a Array1<T>) -> TensorView<'a, T> {
            TensorView {
                name,
                shape: a.shape().to_vec(),
                is_bias: true,
                data: a.as_slice().expect("standard layout"),
            }
        }
        let mut out = vec![
            v2("w_e".into(), &self.w_e, false),
            v2("w_pos".into(), &self.w_pos, false),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.push(v2(format!("blocks.{l}.w_q"), &b.w_q, false));
            out.push(v2(format!("blocks.{l}.w_k"), &b.w_k, false));
            out.push(v2(format!("blocks.{l}.w_v"), &b.w_v, false));
            out.push(v2(format!("blocks.{l}.w_o"), &b.w_o, false));
            out.push(v2(format!("blocks.{l}.w_in"), &b.w_in, false));
            out.push(v1(format!("blocks.{l}.b_in"), &b.b_in));
            out.push(v2(format!("blocks.{l}.w_out"), &b.w_out, false));
            out.push(v1(format!("blocks.{l}.b_out"), &b.b_out));
        }
        out.push(v2("w_u".into(), &self.w_u, false));
        out
    }

    /// Mutable counterpart of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_, T>> {
        fn m2<'a, T>(name: String, a: &'a mut Array2<T>) -> TensorViewMut<'a, T> {
            TensorViewMut {
                name,
                is_bias: false,
                data: a.as_slice_mut().expect("standard layout"),
            }
        }
        fn m1<'a, T>(name: String, a: &'a mut Array1<T>) -> TensorViewMut<'a, T> {
            TensorViewMut {
                name,
                is_bias: true,
                data: a.as_slice_mut().expect("standard layout"),
            }
        }
        let mut out = vec![m2("w_e".into(), &mut self.w_e), m2("w_pos".into(), &mut self.w_pos)];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            out.push(m2(format!("blocks.{l}.w_q"), &mut b.w_q));
            out.push(m2(format!("blocks.{l}.w_k"), &mut b.w_k));
            out.push(m2(format!("blocks.{l}.w_v"), &mut b.w_v));
            out.push(m2(format!("blocks.{l}.w_o"), &mut b.w_o));
            out.push(m2(format!("blocks.{l}.w_in"), &mut b.w_in));
            out.push(m1(format!("blocks.{l}.b_in"), &mut b.b_in));
            out.push(m2(format!("blocks.{l}.w_out"), &mut b.w_out));
            out.push(m1(format!("blocks.{l}.b_out"), &mut b.b_out));
        }
        out.push(m2("w_u".into(), &mut self.w_u));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// All entries concatenated in [`ModelParams::tensors`] order.
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            out.extend_from_slice(t.data);
        }
        out
    }

    pub fn from_flat(config: &ModelConfig, flat: &[T]) -> Result<Self> {
        let mut params = Self::zeros(config);
        if flat.len() != params.num_params() {
            return Err(Error::arg(format!(
                "expected {} parameters, got {}",
                params.num_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for t in params.tensors_mut() {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(params)
    }

    /// `self += other * scale`, entrywise.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d = *d + *s * scale;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = *x * factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    /// Name of the first parameter group containing a non-finite entry.
    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|t| t.data.iter().any(|x| !x.is_finite()))
            .map(|t| t.name)
    }

    /// Neuron-logit map `W_U W_out` of the last block (`p x d_mlp`).
    pub fn neuron_logit_map(&self) -> Array2<f64> {
        let w_u = self.w_u.mapv(|x| x.as_f64());
        let w_out = self.last_block().w_out.mapv(|x| x.as_f64());
        w_u.dot(&w_out)
    }

    /// Number-token embeddings as a `d_model x p` matrix.
    pub fn number_embeddings(&self) -> Array2<f64> {
        self.w_e
            .slice(ndarray::s![.., ..self.config.p])
            .mapv(|x| x.as_f64())
    }
}

/// Sum of squares of every parameter entry, in `f64`.
pub fn l2_sq<T: Scalar>(params: &ModelParams<T>) -> f64 {
    params
        .tensors()
        .iter()
        .flat_map(|t| t.data.iter())
        .map(|x| {
            let x = x.as_f64();
            x * x
        })
        .sum()
}

/// Gaussian initialization scaled by `1/sqrt(fan_in)`, biases zero.
///
/// Fan-in is the input width of each linear map. Embedding tables are
/// lookups, so they are scaled by the residual width instead.
pub fn init_params<T: Scalar>(config: &ModelConfig, rng: &mut RngStream) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut params = ModelParams::<T>::zeros(config);
    let d = config.d_model as f64;
    let fill = |a: &mut Array2<T>, fan_in: f64, rng: &mut RngStream| {
        let std = 1.0 / fan_in.sqrt();
        a.iter_mut()
            .for_each(|x| *x = T::from_f64_lossy(rng.normal() * std));
    };
    fill(&mut params.w_e, d, rng);
    fill(&mut params.w_pos, d, rng);
    for b in params.blocks.iter_mut() {
        fill(&mut b.w_q, d, rng);
        fill(&mut b.w_k, d, rng);
        fill(&mut b.w_v, d, rng);
        fill(&mut b.w_o, d, rng);
        fill(&mut b.w_in, d, rng);
        fill(&mut b.w_out, config.d_mlp as f64, rng);
    }
    fill(&mut params.w_u, d, rng);
    Ok(params)
}

/// Row-wise sum of a 2-D array.
pub(crate) fn col_sums<T: Scalar>(a: &Array2<T>) -> Array1<T> {
    a.sum_axis(Axis(0))
}

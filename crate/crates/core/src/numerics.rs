//! Dense linear algebra helpers, deterministic random streams, stable loss
//! primitives, least-squares fitting and sparsity statistics.
//!
//! Dense matrices are `ndarray` arrays. Analysis work happens in `f64`;
//! training stores weights as `f32` and accumulates losses in `f64`.

use std::fmt::{Debug, Display};

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView1, ArrayView2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major real matrix used by every analysis routine.
pub type DenseMatrix = Array2<f64>;

/// Floating point types the model can be instantiated with.
pub trait Scalar:
    LinalgScalar + ScalarOperand + Float + NumAssign + FromPrimitive + Debug + Display + Send + Sync + 'static
{
    const DTYPE: &'static str;

    fn from_f64_lossy(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    #[inline]
    fn from_f64_lossy(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    #[inline]
    fn from_f64_lossy(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Serializable position of an [`RngStream`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// ChaCha word position, stored as a decimal string (it is a u128).
    pub word_pos: String,
}

/// Seeded, platform-independent random stream (ChaCha8).
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// An independent stream derived from the same seed.
    pub fn substream(&self, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        Self {
            seed: self.seed,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.gen()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream: self.rng.get_stream(),
            word_pos: self.rng.get_word_pos().to_string(),
        }
    }

    pub fn from_state(state: &RngState) -> Result<Self> {
        let word_pos: u128 = state
            .word_pos
            .parse()
            .map_err(|_| Error::arg(format!("bad rng word position {:?}", state.word_pos)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(state.seed);
        rng.set_stream(state.stream);
        rng.set_word_pos(word_pos);
        Ok(Self {
            seed: state.seed,
            rng,
        })
    }
}

/// Result of an ordinary least-squares fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeastSquaresFit {
    pub coefficients: Vec<f64>,
    /// `1 - SSE/SST`, SST taken about the target mean. Zero when SST is zero.
    pub fve: f64,
    pub residual_norm: f64,
    pub rank: usize,
    /// True when the design was rank deficient and the minimum-norm
    /// solution was returned.
    pub degenerate: bool,
}

/// Relative singular-value cutoff used to decide numerical rank.
pub const RANK_CUTOFF: f64 = 1e-10;

/// Factorized design matrix, reusable across many right-hand sides.
///
/// The design is reduced with a Householder QR, then the small triangular
/// factor is decomposed with an SVD. Singular values below
/// [`RANK_CUTOFF`] times the largest are treated as zero, which yields the
/// minimum-norm solution for rank-deficient designs.
pub struct LeastSquaresSolver {
    design: Array2<f64>,
    qr: nalgebra::linalg::QR<f64, nalgebra::Dyn, nalgebra::Dyn>,
    u_r: DMatrix<f64>,
    singular: Vec<f64>,
    v_t: DMatrix<f64>,
    rank: usize,
}

impl LeastSquaresSolver {
    pub fn new(design: &Array2<f64>) -> Result<Self> {
        let (m, k) = design.dim();
        if k == 0 {
            return Err(Error::arg("least squares design has no columns"));
        }
        if m < k {
            return Err(Error::arg(format!(
                "least squares needs at least as many rows as columns, got {m}x{k}"
            )));
        }
        if design.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite entry in design matrix".into()));
        }
        let dm = DMatrix::from_fn(m, k, |i, j| design[[i, j]]);
        let qr = dm.qr();
        let r = qr.r();
        let svd = r.svd(true, true);
        let u_r = svd.u.expect("svd computed with u");
        let v_t = svd.v_t.expect("svd computed with v_t");
        let singular: Vec<f64> = svd.singular_values.iter().copied().collect();
        let max_sv = singular.iter().copied().fold(0.0_f64, f64::max);
        let cutoff = RANK_CUTOFF * max_sv;
        let rank = singular.iter().filter(|&&s| s > cutoff && s > 0.0).count();
        Ok(Self {
            design: design.clone(),
            qr,
            u_r,
            singular,
            v_t,
            rank,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn columns(&self) -> usize {
        self.design.ncols()
    }

    /// Coefficients for every column of `targets` (`m x r`), as a `k x r` matrix.
    pub fn coefficients(&self, targets: ArrayView2<f64>) -> Result<Array2<f64>> {
        let (m, k) = self.design.dim();
        if targets.nrows() != m {
            return Err(Error::arg(format!(
                "target has {} rows but design has {m}",
                targets.nrows()
            )));
        }
        if targets.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite entry in least squares target".into()));
        }
        let r = targets.ncols();
        let mut rhs = DMatrix::from_fn(m, r, |i, j| targets[[i, j]]);
        self.qr.q_tr_mul(&mut rhs);
        let head = rhs.rows(0, k).into_owned();
        // x = V * S^+ * U_r^T * (Q^T y)[..k]
        let mut projected = self.u_r.transpose() * head;
        let max_sv = self.singular.iter().copied().fold(0.0_f64, f64::max);
        let cutoff = RANK_CUTOFF * max_sv;
        for (i, &s) in self.singular.iter().enumerate() {
            let inv = if s > cutoff && s > 0.0 { 1.0 / s } else { 0.0 };
            for j in 0..r {
                projected[(i, j)] *= inv;
            }
        }
        let x = self.v_t.transpose() * projected;
        Ok(Array2::from_shape_fn((k, r), |(i, j)| x[(i, j)]))
    }

    pub fn fit(&self, target: ArrayView1<f64>) -> Result<LeastSquaresFit> {
        let col = target.insert_axis(ndarray::Axis(1));
        Ok(self.fit_many(col)?.pop().expect("one target column"))
    }

    pub fn fit_many(&self, targets: ArrayView2<f64>) -> Result<Vec<LeastSquaresFit>> {
        let coef = self.coefficients(targets)?;
        let pred = self.design.dot(&coef);
        let degenerate = self.rank < self.columns();
        Ok((0..targets.ncols())
            .map(|j| {
                let y = targets.column(j);
                let p = pred.column(j);
                let (fve, sse) = fve_and_sse(y, p);
                LeastSquaresFit {
                    coefficients: coef.column(j).to_vec(),
                    fve,
                    residual_norm: sse.sqrt(),
                    rank: self.rank,
                    degenerate,
                }
            })
            .collect())
    }
}

/// Ordinary least squares of `target` on the columns of `design`.
pub fn least_squares(design: &DenseMatrix, target: ArrayView1<f64>) -> Result<LeastSquaresFit> {
    if design.nrows() != target.len() {
        return Err(Error::arg(format!(
            "design has {} rows but target has length {}",
            design.nrows(),
            target.len()
        )));
    }
    LeastSquaresSolver::new(design)?.fit(target)
}

/// Fraction of variance explained and the sum of squared errors.
///
/// SST is measured about the target mean. A constant target has nothing to
/// explain and gets an FVE of zero.
pub fn fve_and_sse(target: ArrayView1<f64>, prediction: ArrayView1<f64>) -> (f64, f64) {
    let n = target.len() as f64;
    let mean = target.sum() / n;
    let sst: f64 = target.iter().map(|y| (y - mean).powi(2)).sum();
    let sse: f64 = target
        .iter()
        .zip(prediction.iter())
        .map(|(y, p)| (y - p).powi(2))
        .sum();
    let fve = if sst > 0.0 { 1.0 - sse / sst } else { 0.0 };
    (fve, sse)
}

/// Gini sparsity of a nonnegative vector (sorted Hurley-Rickard form).
///
/// Zero for uniform vectors, `1 - 1/n` for a one-hot vector, scale invariant.
pub fn gini(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::arg("gini of an empty vector"));
    }
    if let Some(x) = values.iter().find(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite value {x} in gini input")));
    }
    if values.iter().any(|&x| x < 0.0) {
        return Err(Error::arg("gini requires nonnegative entries"));
    }
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return Err(Error::Domain("gini of an all-zero vector".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| (x / total) * ((n - (i + 1) as f64 + 0.5) / n))
        .sum();
    Ok(1.0 - 2.0 * weighted)
}

/// `logsumexp(logits) - logits[target]`, max-shifted, accumulated in `f64`.
pub fn log_softmax_xent<S: Scalar>(logits: &[S], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::arg(format!(
            "target {target} out of range for {} logits",
            logits.len()
        )));
    }
    let mut max = f64::NEG_INFINITY;
    for &l in logits {
        let l = l.as_f64();
        if !l.is_finite() {
            return Err(Error::Numeric(format!("non-finite logit {l}")));
        }
        max = max.max(l);
    }
    let sum: f64 = logits.iter().map(|&l| (l.as_f64() - max).exp()).sum();
    let loss = max + sum.ln() - logits[target].as_f64();
    Ok(loss.max(0.0))
}

/// Softmax probabilities in `f64`, written into `out`.
pub fn softmax_into<S: Scalar>(logits: &[S], out: &mut [f64]) {
    let max = logits
        .iter()
        .map(|l| l.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l.as_f64() - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax<S: Scalar>(values: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Central finite-difference gradient of `loss_fn` at `params`.
pub fn finite_diff_grad<F>(mut loss_fn: F, params: &[f64], epsilon: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(epsilon > 0.0) {
        return Err(Error::arg(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut theta = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + epsilon;
        let plus = loss_fn(&theta);
        theta[i] = orig - epsilon;
        let minus = loss_fn(&theta);
        theta[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at perturbed coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * epsilon));
    }
    Ok(grad)
}

/// Largest relative difference `|a-b| / max(|a|, |b|, floor)` over two vectors.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn frobenius_sq(m: ArrayView2<f64>) -> f64 {
    m.iter().map(|x| x * x).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use proptest::prelude::*;

    /// Solves the normal equations by Gaussian elimination with partial pivoting.
    fn normal_equations_oracle(x: &Array2<f64>, y: &Array1<f64>) -> Vec<f64> {
        let k = x.ncols();
        let xtx = x.t().dot(x);
        let xty = x.t().dot(y);
        let mut aug: Vec<Vec<f64>> = (0..k)
            .map(|i| {
                let mut row: Vec<f64> = xtx.row(i).to_vec();
                row.push(xty[i]);
                row
            })
            .collect();
        for col in 0..k {
            let piv = (col..k)
                .max_by(|&a, &b| aug[a][col].abs().total_cmp(&aug[b][col].abs()))
                .unwrap();
            aug.swap(col, piv);
            for row in 0..k {
                if row != col {
                    let f = aug[row][col] / aug[col][col];
                    for c in col..=k {
                        aug[row][c] -= f * aug[col][c];
                    }
                }
            }
        }
        (0..k).map(|i| aug[i][k] / aug[i][i]).collect()
    }

    #[test]
    fn identity_design_interpolates() {
        let fit = least_squares(&Array2::eye(3), array![1.0, 2.0, 3.0].view()).unwrap();
        for (c, e) in fit.coefficients.iter().zip([1.0, 2.0, 3.0]) {
            assert!((c - e).abs() < 1e-12);
        }
        assert_eq!(fit.fve, 1.0);
        assert!(!fit.degenerate);
    }

    #[test]
    fn constant_column_gives_mean_and_zero_fve() {
        let design = Array2::ones((5, 1));
        let y = array![1.0, 4.0, 2.0, 8.0, 5.0];
        let fit = least_squares(&design, y.view()).unwrap();
        assert!((fit.coefficients[0] - 4.0).abs() < 1e-12);
        assert!(fit.fve.abs() < 1e-12);
    }

    #[test]
    fn planted_coefficients_match_normal_equations() {
        let mut rng = RngStream::new(7);
        let design = Array2::from_shape_fn((50, 4), |_| rng.normal());
        let planted = array![1.5, -2.0, 0.25, 3.0];
        let noise = Array1::from_shape_fn(50, |_| 0.1 * rng.normal());
        let y = design.dot(&planted) + noise;
        let fit = least_squares(&design, y.view()).unwrap();
        let oracle = normal_equations_oracle(&design, &y);
        for (c, o) in fit.coefficients.iter().zip(&oracle) {
            assert!((c - o).abs() < 1e-10, "{c} vs {o}");
        }
        assert!(fit.fve > 0.99 && fit.fve < 1.0);
    }

    #[test]
    fn rank_deficient_design_returns_min_norm() {
        // Two identical columns: min-norm splits the weight evenly.
        let col = array![1.0, 2.0, 3.0, 4.0];
        let mut design = Array2::zeros((4, 2));
        design.column_mut(0).assign(&col);
        design.column_mut(1).assign(&col);
        let fit = least_squares(&design, (&col * 2.0).view()).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.rank, 1);
        assert!((fit.coefficients[0] - 1.0).abs() < 1e-10);
        assert!((fit.coefficients[1] - 1.0).abs() < 1e-10);
        assert!((fit.fve - 1.0).abs() < 1e-12);
    }

    #[test]
    fn least_squares_rejects_bad_shapes() {
        let design = Array2::<f64>::ones((2, 3));
        assert!(matches!(
            least_squares(&design, array![1.0, 2.0].view()),
            Err(Error::Argument(_))
        ));
        let design = Array2::<f64>::ones((3, 1));
        assert!(matches!(
            least_squares(&design, array![1.0, 2.0].view()),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn target_in_design_is_fully_explained() {
        let mut rng = RngStream::new(3);
        let mut design = Array2::from_shape_fn((40, 3), |_| rng.normal());
        let y = Array1::from_shape_fn(40, |_| rng.normal());
        design.column_mut(1).assign(&y);
        let fit = least_squares(&design, y.view()).unwrap();
        assert!(1.0 - fit.fve < 1e-12);
    }

    #[test]
    fn gini_examples() {
        assert!(gini(&[1.0, 1.0, 1.0, 1.0]).unwrap().abs() < 1e-15);
        assert!((gini(&[0.0, 0.0, 0.0, 1.0]).unwrap() - 0.75).abs() < 1e-15);
        assert!(matches!(gini(&[0.0, 0.0]), Err(Error::Domain(_))));
        assert!(matches!(gini(&[1.0, -0.5]), Err(Error::Argument(_))));
    }

    #[test]
    fn gini_matches_pairwise_difference_oracle() {
        let mut rng = RngStream::new(11);
        let v: Vec<f64> = (0..20).map(|_| rng.uniform() * 3.0).collect();
        let n = v.len() as f64;
        let sum: f64 = v.iter().sum();
        let pairwise: f64 = v
            .iter()
            .flat_map(|a| v.iter().map(move |b| (a - b).abs()))
            .sum();
        let oracle = pairwise / (2.0 * n * sum);
        assert!((gini(&v).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn xent_examples() {
        let uniform = vec![0.3_f64; 113];
        assert!((log_softmax_xent(&uniform, 5).unwrap() - 113f64.ln()).abs() < 1e-12);
        let mut sat = vec![0.0_f64; 113];
        sat[7] = 40.0;
        assert!(log_softmax_xent(&sat, 7).unwrap() < 1e-15);
        assert!(matches!(
            log_softmax_xent(&[1.0_f64, f64::NAN], 0),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(log_softmax_xent(&[1.0_f64], 1), Err(Error::Argument(_))));
    }

    #[test]
    fn xent_matches_naive_formula() {
        let mut rng = RngStream::new(5);
        let logits: Vec<f64> = (0..7).map(|_| 2.0 * rng.normal()).collect();
        let naive = -(logits[3].exp() / logits.iter().map(|l| l.exp()).sum::<f64>()).ln();
        assert!((log_softmax_xent(&logits, 3).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|t| t.iter().map(|x| x * x).sum(), &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
        let g = finite_diff_grad(|_| 3.0, &[1.0, -2.0, 0.5], 1e-5).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-10));
        assert!(finite_diff_grad(|_| 0.0, &[1.0], 0.0).is_err());
        assert!(matches!(
            finite_diff_grad(|t| if t[0] > 1.0 { f64::INFINITY } else { 0.0 }, &[1.0], 1e-3),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn rng_state_round_trip() {
        let mut a = RngStream::new(99);
        for _ in 0..17 {
            a.next_u64();
        }
        let mut b = RngStream::from_state(&a.state()).unwrap();
        for _ in 0..50 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0_f64, 3.0, 3.0, 2.0]), 1);
    }

    proptest! {
        #[test]
        fn gini_is_scale_invariant(v in prop::collection::vec(0.0f64..10.0, 1..30), c in 0.01f64..100.0) {
            prop_assume!(v.iter().any(|&x| x > 1e-6));
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            prop_assert!((gini(&v).unwrap() - gini(&scaled).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn xent_is_shift_invariant(v in prop::collection::vec(-20.0f64..20.0, 2..20), c in -50.0f64..50.0, t in 0usize..2) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let a = log_softmax_xent(&v, t).unwrap();
            let b = log_softmax_xent(&shifted, t).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

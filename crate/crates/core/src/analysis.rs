//! Reverse-engineering fits: key frequencies, the neuron-logit map, MLP and
//! neuron polynomial fits, attention lookup tables and interference.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::export::{sig17, write_csv};
use crate::fourier::{cos_wave, dft_matrix, sin_wave, Component, FourierBasis, Spectrum1D};
use crate::model::ModelParams;
use crate::numerics::{fve_and_sse, LeastSquaresSolver, Scalar};

fn angle(p: usize, k: usize, x: i64) -> f64 {
    2.0 * std::f64::consts::PI * (k as i64 * x).rem_euclid(p as i64) as f64 / p as f64
}

/// Detected key frequencies of the neuron-logit map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyFrequencyReport {
    /// Sorted ascending.
    pub keys: Vec<usize>,
    /// Norm of the cos/sin directions of every frequency `1..=(p-1)/2`
    /// (index `k-1`).
    pub freq_norms: Vec<f64>,
    pub threshold: f64,
}

/// Key frequencies of a `p x d_mlp` neuron-logit map: every frequency whose
/// combined cos/sin norm reaches `threshold` times the largest one.
pub fn detect_key_frequencies_wl(wl: ArrayView2<f64>, basis: &FourierBasis, threshold: f64) -> Result<KeyFrequencyReport> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::arg(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let (_, spec) = dft_matrix(wl, basis, 0)?;
    let freq_norms = spec.frequency_norms();
    let max = freq_norms.iter().copied().fold(0.0f64, f64::max);
    if !(max > 0.0) {
        return Err(Error::Domain("neuron-logit map has no non-constant Fourier content".into()));
    }
    let keys = freq_norms
        .iter()
        .enumerate()
        .filter(|(_, &n)| n >= threshold * max)
        .map(|(i, _)| i + 1)
        .collect();
    Ok(KeyFrequencyReport {
        keys,
        freq_norms,
        threshold,
    })
}

pub fn detect_key_frequencies<T: Scalar>(params: &ModelParams<T>, threshold: f64) -> Result<KeyFrequencyReport> {
    let basis = crate::fourier::make_basis(params.config.p)?;
    detect_key_frequencies_wl(params.neuron_logit_map().view(), &basis, threshold)
}

/// `W_L ~ sum_k cos(w_k) u_k^T + sin(w_k) v_k^T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WLFactorization {
    pub keys: Vec<usize>,
    /// `[key, neuron]`.
    pub u: Array2<f64>,
    pub v: Array2<f64>,
    pub residual_ratio: f64,
}

impl WLFactorization {
    /// The rank-`2|keys|` reconstruction.
    pub fn reconstruction(&self, p: usize) -> Array2<f64> {
        let mut out = Array2::zeros((p, self.u.ncols()));
        for (i, &k) in self.keys.iter().enumerate() {
            let c = cos_wave(p, k).insert_axis(Axis(1));
            let sn = sin_wave(p, k).insert_axis(Axis(1));
            out = out + c.dot(&self.u.row(i).insert_axis(Axis(0))) + sn.dot(&self.v.row(i).insert_axis(Axis(0)));
        }
        out
    }

    /// Orthonormal basis (rows) of `span{u_k, v_k}` in neuron space.
    pub fn neuron_subspace(&self) -> Array2<f64> {
        let rows: Vec<ArrayView1<f64>> = self.u.rows().into_iter().chain(self.v.rows()).collect();
        orthonormal_rows(&rows)
    }
}

fn orthonormal_rows(rows: &[ArrayView1<f64>]) -> Array2<f64> {
    let n = rows.first().map_or(0, |r| r.len());
    let mut out: Vec<Array1<f64>> = Vec::new();
    for r in rows {
        let mut v = r.to_owned();
        // two passes of Gram-Schmidt for stability
        for _ in 0..2 {
            for q in &out {
                let d = q.dot(&v);
                v.scaled_add(-d, q);
            }
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 * r.dot(r).sqrt().max(f64::MIN_POSITIVE) {
            out.push(v / norm);
        }
    }
    let mut m = Array2::zeros((out.len(), n));
    for (i, v) in out.iter().enumerate() {
        m.row_mut(i).assign(v);
    }
    m
}

pub fn factor_wl(wl: ArrayView2<f64>, basis: &FourierBasis, keys: &[usize]) -> Result<WLFactorization> {
    if keys.is_empty() {
        return Err(Error::arg("factorization needs at least one key frequency"));
    }
    for &k in keys {
        basis.check_freq(k)?;
    }
    let p = basis.p;
    let (coeffs, _) = dft_matrix(wl, basis, 0)?;
    // Rows of F are unit vectors; cos(w_k) itself has norm sqrt(p/2).
    let scale = (2.0 / p as f64).sqrt();
    let n = wl.ncols();
    let mut u = Array2::zeros((keys.len(), n));
    let mut v = Array2::zeros((keys.len(), n));
    for (i, &k) in keys.iter().enumerate() {
        u.row_mut(i).assign(&(&coeffs.row(FourierBasis::cos_row(k)) * scale));
        v.row_mut(i).assign(&(&coeffs.row(FourierBasis::sin_row(k)) * scale));
    }
    let mut f = WLFactorization {
        keys: keys.to_vec(),
        u,
        v,
        residual_ratio: 0.0,
    };
    let resid = &wl - &f.reconstruction(p);
    let total = wl.iter().map(|x| x * x).sum::<f64>().sqrt();
    let rn = resid.iter().map(|x| x * x).sum::<f64>().sqrt();
    f.residual_ratio = if total > 0.0 { rn / total } else { 0.0 };
    Ok(f)
}

/// One raw product term `f(w a) g(w b)` and its coefficient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductTerm {
    pub a: Component,
    pub b: Component,
    pub coefficient: f64,
}

impl std::fmt::Display for ProductTerm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = |c: &Component, v: &str| match c {
            Component::Const => String::new(),
            Component::Cos(k) => format!("cos(w{k}{v})"),
            Component::Sin(k) => format!("sin(w{k}{v})"),
        };
        let parts: Vec<String> = [name(&self.a, "a"), name(&self.b, "b")]
            .into_iter()
            .filter(|s| !s.is_empty())
            .collect();
        let body = if parts.is_empty() { "1".to_string() } else { parts.join("") };
        write!(f, "{:.1}{body}", self.coefficient)
    }
}

/// Fit of one projected activation surface `dir . MLP(a, b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionFit {
    pub key: usize,
    /// `cos` for `u_k` (reads `cos(w_k c)`), `sin` for `v_k`.
    pub direction: Component,
    /// The two largest non-constant product terms of the surface.
    pub top_terms: Vec<ProductTerm>,
    /// FVE of `const + coef * cos(w_k(a+b))` (or `sin` for `v_k`).
    pub single_term_fve: f64,
    pub single_term_coef: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpProjectionFit {
    pub directions: Vec<DirectionFit>,
}

impl MlpProjectionFit {
    pub fn mean_fve(&self) -> f64 {
        self.directions.iter().map(|d| d.single_term_fve).sum::<f64>() / self.directions.len().max(1) as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(
            path,
            &["direction", "key", "term1", "coef1", "term2", "coef2", "single_term_fve"],
            self.directions.iter().map(|d| {
                let term = |i: usize| {
                    d.top_terms
                        .get(i)
                        .map(|t| (format!("{}*{}", t.a, t.b), sig17(t.coefficient)))
                        .unwrap_or_default()
                };
                let (t1, c1) = term(0);
                let (t2, c2) = term(1);
                vec![
                    d.direction.to_string(),
                    d.key.to_string(),
                    t1,
                    c1,
                    t2,
                    c2,
                    sig17(d.single_term_fve),
                ]
            }),
        )
    }
}

/// Coefficients of a `p x p` surface on the raw product terms
/// `f(a) g(b)` where `f, g` range over `1, cos(w_k x), sin(w_k x)`.
fn raw_product_coefficients(surface: &Array2<f64>, basis: &FourierBasis) -> Array2<f64> {
    let f = &basis.matrix;
    let hat = f.dot(surface).dot(&f.t());
    let p = basis.p as f64;
    // unit basis vector = raw wave * (1/sqrt(p) or sqrt(2/p))
    let raw_scale = |row: usize| if row == 0 { 1.0 / p.sqrt() } else { (2.0 / p).sqrt() };
    Array2::from_shape_fn(hat.dim(), |(i, j)| hat[[i, j]] * raw_scale(i) * raw_scale(j))
}

fn single_wave_fve(surface: ArrayView1<f64>, wave: &Array1<f64>) -> Result<(f64, f64)> {
    let n = wave.len();
    let mut design = Array2::ones((n, 2));
    design.column_mut(1).assign(wave);
    let fit = LeastSquaresSolver::new(&design)?.fit(surface)?;
    Ok((fit.fve, fit.coefficients[1]))
}

/// Projects last-layer MLP activations (`[a, b, neuron]`) onto each `u_k`
/// and `v_k` (unit-normalized) and fits the resulting surfaces.
pub fn project_mlp_fit(mlp_post: &Array3<f64>, factorization: &WLFactorization, basis: &FourierBasis) -> Result<MlpProjectionFit> {
    let p = basis.p;
    let (pa, pb, n) = mlp_post.dim();
    if pa != p || pb != p || n != factorization.u.ncols() {
        return Err(Error::arg("activation tensor does not match the factorization"));
    }
    let flat = mlp_post
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((p * p, n))
        .expect("standard layout");
    let mut directions = Vec::new();
    for (i, &k) in factorization.keys.iter().enumerate() {
        for (dir, comp, rows) in [
            (factorization.u.row(i), Component::Cos(k), true),
            (factorization.v.row(i), Component::Sin(k), false),
        ] {
            let norm = dir.dot(&dir).sqrt();
            let unit = if norm > 0.0 { &dir / norm } else { dir.to_owned() };
            let surface_flat = flat.dot(&unit);
            let surface = surface_flat.clone().into_shape_with_order((p, p)).expect("p x p");
            let raw = raw_product_coefficients(&surface, basis);
            let mut terms: Vec<ProductTerm> = raw
                .indexed_iter()
                .filter(|((i, j), _)| !(*i == 0 && *j == 0))
                .map(|((i, j), &c)| ProductTerm {
                    a: basis.labels[i],
                    b: basis.labels[j],
                    coefficient: c,
                })
                .collect();
            terms.sort_by(|x, y| y.coefficient.abs().total_cmp(&x.coefficient.abs()));
            terms.truncate(2);
            let wave = Array1::from_iter((0..p * p).map(|idx| {
                let t = angle(p, k, (idx / p + idx % p) as i64);
                if rows { t.cos() } else { t.sin() }
            }));
            let (fve, coef) = single_wave_fve(surface_flat.view(), &wave)?;
            directions.push(DirectionFit {
                key: k,
                direction: comp,
                top_terms: terms,
                single_term_fve: fve,
                single_term_coef: coef,
            });
        }
    }
    Ok(MlpProjectionFit { directions })
}

/// `logits[a,b,c] ~ intercept + sum_k alpha_k cos(w_k(a+b-c))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitCosFit {
    pub keys: Vec<usize>,
    pub alpha: Vec<f64>,
    pub intercept: f64,
    pub fve: f64,
}

impl LogitCosFit {
    pub fn approximation(&self, p: usize) -> Array3<f64> {
        Array3::from_shape_fn((p, p, p), |(a, b, c)| {
            self.intercept
                + self
                    .keys
                    .iter()
                    .zip(&self.alpha)
                    .map(|(&k, al)| al * angle(p, k, a as i64 + b as i64 - c as i64).cos())
                    .sum::<f64>()
        })
    }
}

/// Least-squares fit of the logit tensor on `{1} U {cos(w_k(a+b-c))}`.
///
/// Over the full `p^3` grid these regressors are mutually orthogonal
/// (distinct `k` in `1..=(p-1)/2`), so each coefficient is a single inner
/// product: `alpha_k = <L, R_k> / (p^3 / 2)`.
pub fn fit_logit_cos(logits: &Array3<f64>, keys: &[usize]) -> Result<LogitCosFit> {
    let (p, p2, p3) = logits.dim();
    if p != p2 || p != p3 {
        return Err(Error::arg(format!("expected a cubic logit tensor, got {:?}", logits.dim())));
    }
    let basis_p = p;
    for (i, &k) in keys.iter().enumerate() {
        if k == 0 || 2 * k >= basis_p {
            return Err(Error::arg(format!("key frequency {k} out of range for p = {p}")));
        }
        if keys[..i].contains(&k) {
            return Err(Error::arg(format!("key frequency {k} repeated")));
        }
    }
    let n = (p * p * p) as f64;
    let intercept = logits.sum() / n;
    // cos(w_k m) tables indexed by (a + b - c) mod p
    let tables: Vec<Vec<f64>> = keys
        .iter()
        .map(|&k| (0..p).map(|m| angle(p, k, m as i64).cos()).collect())
        .collect();
    let mut dots = vec![0.0; keys.len()];
    for ((a, b, c), &l) in logits.indexed_iter() {
        let m = (a + b + p - c) % p;
        for (d, t) in dots.iter_mut().zip(&tables) {
            *d += l * t[m];
        }
    }
    let alpha: Vec<f64> = dots.iter().map(|d| d / (n / 2.0)).collect();
    let mut sse = 0.0;
    let mut sst = 0.0;
    for ((a, b, c), &l) in logits.indexed_iter() {
        let m = (a + b + p - c) % p;
        let pred = intercept + alpha.iter().zip(&tables).map(|(al, t)| al * t[m]).sum::<f64>();
        sse += (l - pred).powi(2);
        sst += (l - intercept).powi(2);
    }
    Ok(LogitCosFit {
        keys: keys.to_vec(),
        alpha,
        intercept,
        fve: if sst > 0.0 { 1.0 - sse / sst } else { 0.0 },
    })
}

/// Names of the 15 monomials, in design-column order.
pub const NEURON_MONOMIALS: [&str; 15] = [
    "1", "ca", "sa", "cb", "sb", "ca*ca", "ca*sa", "ca*cb", "ca*sb", "sa*sa", "sa*cb", "sa*sb", "cb*cb", "cb*sb",
    "sb*sb",
];

/// Degree-2 design over `(a, b)` for one frequency, rows `a * p + b`.
pub fn neuron_design(p: usize, k: usize) -> Array2<f64> {
    let mut d = Array2::zeros((p * p, 15));
    for a in 0..p {
        for b in 0..p {
            let (ta, tb) = (angle(p, k, a as i64), angle(p, k, b as i64));
            let x = [ta.cos(), ta.sin(), tb.cos(), tb.sin()];
            let mut row = d.row_mut(a * p + b);
            row[0] = 1.0;
            for i in 0..4 {
                row[1 + i] = x[i];
            }
            let mut col = 5;
            for i in 0..4 {
                for j in i..4 {
                    row[col] = x[i] * x[j];
                    col += 1;
                }
            }
        }
    }
    d
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronFit {
    pub neuron: usize,
    pub frequency: usize,
    /// Minimum-norm coefficients on [`NEURON_MONOMIALS`].
    pub coefficients: Vec<f64>,
    pub fve: f64,
    /// Best frequency when `fve` clears the threshold.
    pub cluster: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronFits {
    pub threshold: f64,
    pub keys: Vec<usize>,
    pub fits: Vec<NeuronFit>,
    /// Frequency -> neurons clustered there.
    pub clusters: BTreeMap<usize, Vec<usize>>,
}

impl NeuronFits {
    pub fn clustered_fraction(&self) -> f64 {
        let n: usize = self.clusters.values().map(|v| v.len()).sum();
        n as f64 / self.fits.len().max(1) as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut header = vec!["neuron", "frequency", "fve", "cluster"];
        header.extend(NEURON_MONOMIALS);
        write_csv(
            path,
            &header,
            self.fits.iter().map(|f| {
                let mut row = vec![
                    f.neuron.to_string(),
                    f.frequency.to_string(),
                    sig17(f.fve),
                    f.cluster.map(|c| c.to_string()).unwrap_or_default(),
                ];
                row.extend(f.coefficients.iter().map(|c| sig17(*c)));
                row
            }),
        )
    }
}

/// Fits every neuron's activation surface (`[a, b, neuron]`) with the
/// degree-2 basis at each candidate frequency and keeps the best.
pub fn fit_neurons(mlp_post: &Array3<f64>, keys: &[usize], fve_threshold: f64) -> Result<NeuronFits> {
    let (p, p2, n) = mlp_post.dim();
    if p != p2 {
        return Err(Error::arg("activation tensor must be p x p x neurons"));
    }
    if keys.is_empty() {
        return Err(Error::arg("neuron fits need at least one candidate frequency"));
    }
    for &k in keys {
        if k == 0 || 2 * k >= p {
            return Err(Error::arg(format!("frequency {k} out of range for p = {p}")));
        }
    }
    let targets = mlp_post
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((p * p, n))
        .expect("standard layout");
    let per_key: Vec<Vec<crate::numerics::LeastSquaresFit>> = keys
        .par_iter()
        .map(|&k| LeastSquaresSolver::new(&neuron_design(p, k))?.fit_many(targets.view()))
        .collect::<Result<_>>()?;
    let mut fits = Vec::with_capacity(n);
    let mut clusters: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for neuron in 0..n {
        let mut best = 0;
        for ki in 1..keys.len() {
            if per_key[ki][neuron].fve > per_key[best][neuron].fve {
                best = ki;
            }
        }
        let fit = &per_key[best][neuron];
        let cluster = (fit.fve >= fve_threshold).then_some(keys[best]);
        if let Some(k) = cluster {
            clusters.entry(k).or_default().push(neuron);
        }
        fits.push(NeuronFit {
            neuron,
            frequency: keys[best],
            coefficients: fit.coefficients.clone(),
            fve: fit.fve,
            cluster,
        });
    }
    Ok(NeuronFits {
        threshold: fve_threshold,
        keys: keys.to_vec(),
        fits,
        clusters,
    })
}

/// Evaluates a fitted neuron polynomial at `(a, b)`.
pub fn neuron_poly_value(coefficients: &[f64], p: usize, k: usize, a: usize, b: usize) -> f64 {
    let (ta, tb) = (angle(p, k, a as i64), angle(p, k, b as i64));
    let x = [ta.cos(), ta.sin(), tb.cos(), tb.sin()];
    let mut v = coefficients[0];
    for i in 0..4 {
        v += coefficients[1 + i] * x[i];
    }
    let mut col = 5;
    for i in 0..4 {
        for j in i..4 {
            v += coefficients[col] * x[i] * x[j];
            col += 1;
        }
    }
    v
}

/// The `cos(w(a+b))` / `sin(w(a+b))` part of a fitted neuron polynomial,
/// as coefficients `(c, s)` with value `c cos(w(a+b)) + s sin(w(a+b))`.
///
/// The product terms satisfy `ca*cb = (cos(a+b) + cos(a-b))/2`,
/// `sa*sb = (cos(a-b) - cos(a+b))/2`, `ca*sb = (sin(a+b) - sin(a-b))/2` and
/// `sa*cb = (sin(a+b) + sin(a-b))/2`.
pub fn neuron_sum_part(coefficients: &[f64]) -> (f64, f64) {
    let ca_cb = coefficients[7];
    let ca_sb = coefficients[8];
    let sa_cb = coefficients[10];
    let sa_sb = coefficients[11];
    ((ca_cb - sa_sb) / 2.0, (ca_sb + sa_cb) / 2.0)
}

/// Single-frequency fit of a lookup table `C[t] ~ c0 + F cos(w t) + G sin(w t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LookupFit {
    pub frequency: usize,
    pub intercept: f64,
    pub cos_coef: f64,
    pub sin_coef: f64,
    pub fve: f64,
}

/// `A_0 ~ 0.5 + alpha (cos(w a) - cos(w b)) + beta (sin(w a) - sin(w b))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternFit {
    pub frequency: usize,
    pub alpha: f64,
    pub beta: f64,
    pub fve: f64,
}

impl PatternFit {
    pub fn value(&self, p: usize, a: usize, b: usize) -> f64 {
        let (ta, tb) = (angle(p, self.frequency, a as i64), angle(p, self.frequency, b as i64));
        0.5 + self.alpha * (ta.cos() - tb.cos()) + self.beta * (ta.sin() - tb.sin())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionFit {
    pub head: usize,
    /// Score contribution of each number token, `W_E^T W_K^T W_Q x_=`.
    pub lookup: Vec<f64>,
    pub lookup_fit: LookupFit,
    pub pattern_fit: PatternFit,
    /// Slope `E` of `A_0 ~ 0.5 + E (s_a - s_b)` in the observed score gap.
    pub sigmoid_slope: f64,
    pub sigmoid_fve: f64,
}

pub fn write_attention_csv(fits: &[AttentionFit], path: &Path) -> Result<()> {
    write_csv(
        path,
        &[
            "head",
            "pattern_k",
            "alpha",
            "beta",
            "pattern_fve",
            "lookup_k",
            "lookup_cos",
            "lookup_sin",
            "lookup_fve",
            "sigmoid_slope",
            "sigmoid_fve",
        ],
        fits.iter().map(|f| {
            vec![
                f.head.to_string(),
                f.pattern_fit.frequency.to_string(),
                sig17(f.pattern_fit.alpha),
                sig17(f.pattern_fit.beta),
                sig17(f.pattern_fit.fve),
                f.lookup_fit.frequency.to_string(),
                sig17(f.lookup_fit.cos_coef),
                sig17(f.lookup_fit.sin_coef),
                sig17(f.lookup_fit.fve),
                sig17(f.sigmoid_slope),
                sig17(f.sigmoid_fve),
            ]
        }),
    )
}

fn best_lookup_fit(c: &Array1<f64>) -> Result<LookupFit> {
    let p = c.len();
    let mut best: Option<LookupFit> = None;
    for k in 1..=(p - 1) / 2 {
        let mut d = Array2::ones((p, 3));
        d.column_mut(1).assign(&cos_wave(p, k));
        d.column_mut(2).assign(&sin_wave(p, k));
        let fit = LeastSquaresSolver::new(&d)?.fit(c.view())?;
        if best.as_ref().map_or(true, |b| fit.fve > b.fve) {
            best = Some(LookupFit {
                frequency: k,
                intercept: fit.coefficients[0],
                cos_coef: fit.coefficients[1],
                sin_coef: fit.coefficients[2],
                fve: fit.fve,
            });
        }
    }
    Ok(best.expect("p >= 3 has a frequency"))
}

/// Pins the intercept at 0.5 and regresses `A_0 - 0.5` on the two
/// difference waves, searching every frequency.
pub fn fit_pattern(pattern_to_a: &Array2<f64>) -> Result<PatternFit> {
    let p = pattern_to_a.nrows();
    let target: Array1<f64> = pattern_to_a.iter().copied().collect();
    let centered = &target - 0.5;
    let mut best: Option<PatternFit> = None;
    for k in 1..=(p - 1) / 2 {
        let d = Array2::from_shape_fn((p * p, 2), |(idx, j)| {
            let (ta, tb) = (angle(p, k, (idx / p) as i64), angle(p, k, (idx % p) as i64));
            if j == 0 { ta.cos() - tb.cos() } else { ta.sin() - tb.sin() }
        });
        let coef = LeastSquaresSolver::new(&d)?.coefficients(centered.view().insert_axis(Axis(1)))?;
        let pred = d.dot(&coef.column(0)) + 0.5;
        let (fve, _) = fve_and_sse(target.view(), pred.view());
        if best.as_ref().map_or(true, |b| fve > b.fve) {
            best = Some(PatternFit {
                frequency: k,
                alpha: coef[[0, 0]],
                beta: coef[[1, 0]],
                fve,
            });
        }
    }
    Ok(best.expect("p >= 3 has a frequency"))
}

/// Attention lookup tables of the first layer: `C_j[t] = x_t^T W_K^T W_Q x_=`
/// for number tokens `t` (times the score scale), with `x` the token
/// embedding alone.
pub fn attention_lookup<T: Scalar>(params: &ModelParams<T>) -> Vec<Array1<f64>> {
    let cfg = &params.config;
    let dh = cfg.d_head();
    let blk = &params.blocks[0];
    let w_e = params.w_e.mapv(|x| x.as_f64());
    let x_eq = &w_e.column(cfg.p) + &params.w_pos.column(2).mapv(|x| x.as_f64());
    let numbers = w_e.slice(s![.., ..cfg.p]);
    (0..cfg.n_heads)
        .map(|j| {
            let q = blk.head_q(j, dh).mapv(|x| x.as_f64()).dot(&x_eq);
            let k = blk.head_k(j, dh).mapv(|x| x.as_f64()).dot(&numbers);
            k.t().dot(&q) * cfg.attn_scale()
        })
        .collect()
}

/// Attention fits for every head. `attn_pattern` and `attn_scores` are the
/// `[a, b, head, position]` tensors of a full input sweep.
pub fn fit_attention<T: Scalar>(
    params: &ModelParams<T>,
    attn_pattern: &Array4<f64>,
    attn_scores: &Array4<f64>,
) -> Result<Vec<AttentionFit>> {
    let cfg = &params.config;
    let p = cfg.p;
    if attn_pattern.dim() != (p, p, cfg.n_heads, 3) || attn_scores.dim() != attn_pattern.dim() {
        return Err(Error::arg("attention tensors do not match the model"));
    }
    let lookups = attention_lookup(params);
    (0..cfg.n_heads)
        .map(|j| {
            let lookup = &lookups[j];
            let lookup_fit = best_lookup_fit(lookup)?;
            let to_a = attn_pattern.slice(s![.., .., j, 0]).to_owned();
            let pattern_fit = fit_pattern(&to_a)?;
            let gap: Array1<f64> = attn_scores
                .slice(s![.., .., j, 0])
                .iter()
                .zip(attn_scores.slice(s![.., .., j, 1]).iter())
                .map(|(x, y)| x - y)
                .collect();
            let target: Array1<f64> = to_a.iter().copied().collect();
            let centered = &target - 0.5;
            let gg = gap.dot(&gap);
            let slope = if gg > 0.0 { gap.dot(&centered) / gg } else { 0.0 };
            let pred = &gap * slope + 0.5;
            let (sigmoid_fve, _) = fve_and_sse(target.view(), pred.view());
            Ok(AttentionFit {
                head: j,
                lookup: lookup.to_vec(),
                lookup_fit,
                pattern_fit,
                sigmoid_slope: slope,
                sigmoid_fve,
            })
        })
        .collect()
}

/// Spectrum of each first-layer head's OV circuit applied to the number
/// embeddings, `W_O^j W_V^j W_E`, over the token axis.
pub fn ov_spectrum<T: Scalar>(params: &ModelParams<T>) -> Result<Vec<Spectrum1D>> {
    let cfg = &params.config;
    let basis = crate::fourier::make_basis(cfg.p)?;
    let dh = cfg.d_head();
    let blk = &params.blocks[0];
    let numbers = params.number_embeddings();
    (0..cfg.n_heads)
        .map(|j| {
            let ov = blk
                .head_o(j, dh)
                .mapv(|x| x.as_f64())
                .dot(&blk.head_v(j, dh).mapv(|x| x.as_f64()))
                .dot(&numbers);
            Ok(dft_matrix(ov.view(), &basis, 1)?.1)
        })
        .collect()
}

/// `f[x] = sum_k cos(w_k x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterferenceProfile {
    pub keys: Vec<usize>,
    pub values: Vec<f64>,
    pub argmax: usize,
    /// Largest value away from `x = 0` and where it occurs.
    pub runner_up: (usize, f64),
}

pub fn interference_profile(keys: &[usize], p: usize) -> Result<InterferenceProfile> {
    if keys.is_empty() {
        return Err(Error::arg("interference profile needs at least one frequency"));
    }
    if p < 3 {
        return Err(Error::arg(format!("modulus must be at least 3, got {p}")));
    }
    let values: Vec<f64> = (0..p)
        .map(|x| {
            if x == 0 {
                keys.len() as f64
            } else {
                keys.iter().map(|&k| angle(p, k, x as i64).cos()).sum()
            }
        })
        .collect();
    let argmax = crate::numerics::argmax(&values);
    let runner_up = (1..p)
        .map(|x| (x, values[x]))
        .fold((1, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
    Ok(InterferenceProfile {
        keys: keys.to_vec(),
        values,
        argmax,
        runner_up,
    })
}

/// Gini sparsity of the Fourier component norms of the number embeddings
/// (over the token axis) and of the neuron-logit map (over the logit axis).
pub fn fourier_ginis<T: Scalar>(params: &ModelParams<T>, basis: &FourierBasis) -> Result<(f64, f64)> {
    let (_, we) = dft_matrix(params.number_embeddings().view(), basis, 1)?;
    let (_, wl) = dft_matrix(params.neuron_logit_map().view(), basis, 0)?;
    Ok((crate::numerics::gini(&we.norms)?, crate::numerics::gini(&wl.norms)?))
}

#[cfg(test)]
mod tests;

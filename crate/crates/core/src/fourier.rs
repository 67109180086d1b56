//! Real Fourier basis over Z_p and the transforms built on it.

use std::fmt;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::export::{sig17, write_csv};

/// Name of one basis row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Const,
    Cos(usize),
    Sin(usize),
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Component::Const => write!(f, "const"),
            Component::Cos(k) => write!(f, "cos {k}"),
            Component::Sin(k) => write!(f, "sin {k}"),
        }
    }
}

/// Orthonormal cosine/sine basis. Row 0 is constant; rows `2k-1` and `2k`
/// hold `cos(2 pi k x / p)` and `sin(2 pi k x / p)`, scaled to unit norm.
#[derive(Clone, Debug)]
pub struct FourierBasis {
    pub p: usize,
    /// `p x p`, rows are basis vectors.
    pub matrix: Array2<f64>,
    pub labels: Vec<Component>,
}

pub fn make_basis(p: usize) -> Result<FourierBasis> {
    if p < 3 || p % 2 == 0 {
        return Err(Error::arg(format!("Fourier basis needs an odd modulus >= 3, got {p}")));
    }
    let pf = p as f64;
    let mut matrix = Array2::zeros((p, p));
    let mut labels = vec![Component::Const];
    matrix.row_mut(0).fill(1.0 / pf.sqrt());
    let scale = (2.0 / pf).sqrt();
    for k in 1..=(p - 1) / 2 {
        for x in 0..p {
            // reduce kx first so large arguments stay exact
            let theta = 2.0 * std::f64::consts::PI * ((k * x) % p) as f64 / pf;
            matrix[[2 * k - 1, x]] = scale * theta.cos();
            matrix[[2 * k, x]] = scale * theta.sin();
        }
        labels.push(Component::Cos(k));
        labels.push(Component::Sin(k));
    }
    Ok(FourierBasis { p, matrix, labels })
}

impl FourierBasis {
    pub fn n_freqs(&self) -> usize {
        (self.p - 1) / 2
    }

    pub fn cos_row(k: usize) -> usize {
        2 * k - 1
    }

    pub fn sin_row(k: usize) -> usize {
        2 * k
    }

    pub fn row_of(&self, c: Component) -> usize {
        match c {
            Component::Const => 0,
            Component::Cos(k) => Self::cos_row(k),
            Component::Sin(k) => Self::sin_row(k),
        }
    }

    pub fn check_freq(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.n_freqs() {
            return Err(Error::arg(format!(
                "frequency {k} outside 1..={} for p = {}",
                self.n_freqs(),
                self.p
            )));
        }
        Ok(())
    }
}

/// `cos(2 pi k x / p)` for `x` in `0..p`, unnormalized.
pub fn cos_wave(p: usize, k: usize) -> Array1<f64> {
    Array1::from_iter((0..p).map(|x| (2.0 * std::f64::consts::PI * ((k * x) % p) as f64 / p as f64).cos()))
}

pub fn sin_wave(p: usize, k: usize) -> Array1<f64> {
    Array1::from_iter((0..p).map(|x| (2.0 * std::f64::consts::PI * ((k * x) % p) as f64 / p as f64).sin()))
}

/// Norm of each basis component of a transformed matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrum1D {
    pub labels: Vec<Component>,
    pub norms: Vec<f64>,
}

impl Spectrum1D {
    /// `sqrt(cos^2 + sin^2)` per frequency `1..=(p-1)/2` (index `k-1`).
    pub fn frequency_norms(&self) -> Vec<f64> {
        let n = (self.norms.len() - 1) / 2;
        (1..=n)
            .map(|k| self.norms[2 * k - 1].hypot(self.norms[2 * k]))
            .collect()
    }

    pub fn total_sq(&self) -> f64 {
        self.norms.iter().map(|x| x * x).sum()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(
            path,
            &["component", "norm"],
            self.labels
                .iter()
                .zip(&self.norms)
                .map(|(l, n)| [l.to_string(), sig17(*n)]),
        )
    }
}

/// Transforms `m` along `axis` (which must have length `p`) and returns the
/// coefficients together with their per-component norms. For `axis = 0`
/// this is `F m`; for `axis = 1` it is `m F^T`.
pub fn dft_matrix(m: ArrayView2<f64>, basis: &FourierBasis, axis: usize) -> Result<(Array2<f64>, Spectrum1D)> {
    let f = &basis.matrix;
    let (coeffs, norms) = match axis {
        0 => {
            if m.nrows() != basis.p {
                return Err(Error::arg(format!("axis 0 has length {}, expected {}", m.nrows(), basis.p)));
            }
            let c = f.dot(&m);
            let n = c.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
            (c, n)
        }
        1 => {
            if m.ncols() != basis.p {
                return Err(Error::arg(format!("axis 1 has length {}, expected {}", m.ncols(), basis.p)));
            }
            let c = m.dot(&f.t());
            let n = c.columns().into_iter().map(|r| r.dot(&r).sqrt()).collect();
            (c, n)
        }
        _ => return Err(Error::arg(format!("axis must be 0 or 1, got {axis}"))),
    };
    Ok((
        coeffs,
        Spectrum1D {
            labels: basis.labels.clone(),
            norms,
        },
    ))
}

fn check_cube(t: &Array3<f64>, p: usize) -> Result<()> {
    if t.dim() != (p, p, p) {
        return Err(Error::arg(format!("expected a {p}x{p}x{p} tensor, got {:?}", t.dim())));
    }
    Ok(())
}

/// Applies `m` to the first two axes of `t`: `out[i,j,c] = sum m[i,a] m[j,b] t[a,b,c]`.
fn transform_inputs(m: &Array2<f64>, t: &Array3<f64>) -> Array3<f64> {
    let (p, q, r) = t.dim();
    let t = t.as_standard_layout();
    let flat = t.view().into_shape_with_order((p, q * r)).expect("standard layout");
    let first = m.dot(&flat).into_shape_with_order((p, q, r)).expect("shape");
    let mut out = Array3::zeros((p, q, r));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(first.axis_iter(Axis(0)).into_par_iter())
        .for_each(|(mut o, slab)| o.assign(&m.dot(&slab)));
    out
}

/// Coefficients of a `[a, b, c]` tensor in the product basis over `(a, b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum2D {
    pub p: usize,
    /// `[alpha, beta, c]`.
    pub coeffs: Array3<f64>,
}

impl Spectrum2D {
    /// L2 norm over `c` of each `(alpha, beta)` coefficient.
    pub fn norm_grid(&self) -> Array2<f64> {
        self.coeffs.map_axis(Axis(2), |v| v.dot(&v).sqrt())
    }

    pub fn reconstruct(&self, basis: &FourierBasis) -> Result<Array3<f64>> {
        check_cube(&self.coeffs, basis.p)?;
        Ok(transform_inputs(&basis.matrix.t().to_owned(), &self.coeffs))
    }

    pub fn write_norm_grid_csv(&self, basis: &FourierBasis, path: &Path) -> Result<()> {
        let grid = self.norm_grid();
        let mut header = vec!["component".to_string()];
        header.extend(basis.labels.iter().map(|l| l.to_string()));
        let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
        write_csv(
            path,
            &header_refs,
            grid.rows().into_iter().zip(&basis.labels).map(|(row, l)| {
                std::iter::once(l.to_string()).chain(row.iter().map(|x| sig17(*x))).collect::<Vec<_>>()
            }),
        )
    }
}

/// 2D transform over the input axes of a `p x p x p` logit tensor.
pub fn dft_logits(logits: &Array3<f64>, basis: &FourierBasis) -> Result<Spectrum2D> {
    check_cube(logits, basis.p)?;
    Ok(Spectrum2D {
        p: basis.p,
        coeffs: transform_inputs(&basis.matrix, logits),
    })
}

/// Which part of a key frequency's 2x2 coefficient block counts as "key".
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeySubspace {
    /// Only the `cos(w(a+b))` and `sin(w(a+b))` directions.
    #[default]
    SumDirections,
    /// The whole `{cos, sin} x {cos, sin}` block.
    FullBlock,
}

/// Key-frequency sum-direction coordinates of a 2D spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct SumSubspaceCoords {
    pub keys: Vec<usize>,
    /// `[key, c]`: coefficient of the `cos(w_k(a+b))` direction,
    /// `(L_cc - L_ss) / 2`.
    pub p_coef: Array2<f64>,
    /// `[key, c]`: `(L_cs + L_sc) / 2`, the `sin(w_k(a+b))` direction.
    pub q_coef: Array2<f64>,
    /// Everything outside the sum directions, same layout as the spectrum.
    pub remainder: Array3<f64>,
}

fn check_keys(keys: &[usize], basis_p: usize) -> Result<()> {
    let n = (basis_p - 1) / 2;
    for (i, &k) in keys.iter().enumerate() {
        if k == 0 || k > n {
            return Err(Error::arg(format!("key frequency {k} outside 1..={n}")));
        }
        if keys[..i].contains(&k) {
            return Err(Error::arg(format!("key frequency {k} repeated")));
        }
    }
    Ok(())
}

impl SumSubspaceCoords {
    /// The sum-direction components alone, as a spectrum-shaped tensor.
    pub fn reembed(&self) -> Array3<f64> {
        self.reembed_into(self.remainder.dim())
    }

    fn reembed_into(&self, dim: (usize, usize, usize)) -> Array3<f64> {
        let mut out = Array3::zeros(dim);
        for (i, &k) in self.keys.iter().enumerate() {
            let (c, s) = (FourierBasis::cos_row(k), FourierBasis::sin_row(k));
            let pc = self.p_coef.row(i);
            let qc = self.q_coef.row(i);
            out.slice_mut(s![c, c, ..]).assign(&pc);
            out.slice_mut(s![s, s, ..]).assign(&(-&pc));
            out.slice_mut(s![c, s, ..]).assign(&qc);
            out.slice_mut(s![s, c, ..]).assign(&qc);
        }
        out
    }

    /// Coefficient of the raw `cos(w_k(a+b))` raster for each key and `c`.
    pub fn cos_raster_coef(&self, p: usize) -> Array2<f64> {
        &self.p_coef * (2.0 / p as f64)
    }
}

/// Splits a 2D spectrum into the key-frequency sum-direction components and
/// an orthogonal remainder.
pub fn sum_subspace_decompose(spectrum: &Spectrum2D, keys: &[usize]) -> Result<SumSubspaceCoords> {
    check_keys(keys, spectrum.p)?;
    let r = spectrum.coeffs.dim().2;
    let mut p_coef = Array2::zeros((keys.len(), r));
    let mut q_coef = Array2::zeros((keys.len(), r));
    for (i, &k) in keys.iter().enumerate() {
        let (c, s) = (FourierBasis::cos_row(k), FourierBasis::sin_row(k));
        let l = &spectrum.coeffs;
        p_coef
            .row_mut(i)
            .assign(&((&l.slice(s![c, c, ..]) - &l.slice(s![s, s, ..])) * 0.5));
        q_coef
            .row_mut(i)
            .assign(&((&l.slice(s![c, s, ..]) + &l.slice(s![s, c, ..])) * 0.5));
    }
    let mut coords = SumSubspaceCoords {
        keys: keys.to_vec(),
        p_coef,
        q_coef,
        remainder: Array3::zeros((0, 0, 0)),
    };
    coords.remainder = &spectrum.coeffs - &coords.reembed_into(spectrum.coeffs.dim());
    Ok(coords)
}

/// Splits spectrum coefficients into `(key part, rest)` with `key part +
/// rest = coeffs`. The key part holds the key frequencies under `variant`
/// and, if `with_const`, the `(const, const)` entry.
pub fn split_key_components(
    spectrum: &Spectrum2D,
    keys: &[usize],
    variant: KeySubspace,
    with_const: bool,
) -> Result<(Array3<f64>, Array3<f64>)> {
    check_keys(keys, spectrum.p)?;
    let mut key_part = match variant {
        KeySubspace::SumDirections => sum_subspace_decompose(spectrum, keys)?.reembed(),
        KeySubspace::FullBlock => {
            let mut out = Array3::zeros(spectrum.coeffs.dim());
            for &k in keys {
                let rows = [FourierBasis::cos_row(k), FourierBasis::sin_row(k)];
                for &i in &rows {
                    for &j in &rows {
                        out.slice_mut(s![i, j, ..]).assign(&spectrum.coeffs.slice(s![i, j, ..]));
                    }
                }
            }
            out
        }
    };
    if with_const {
        key_part
            .slice_mut(s![0, 0, ..])
            .assign(&spectrum.coeffs.slice(s![0, 0, ..]));
    }
    let rest = &spectrum.coeffs - &key_part;
    Ok((key_part, rest))
}

use approx::assert_abs_diff_eq;
use ndarray::{Array1, Array2, Array3};
use proptest::prelude::*;

use super::*;
use crate::fourier::make_basis;
use crate::model::{init_params, sweep_all_inputs, ModelConfig, NoHook};
use crate::numerics::{least_squares, RngStream};

fn randn(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = RngStream::new(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.normal())
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    a.view().insert_axis(Axis(1)).dot(&b.view().insert_axis(Axis(0)))
}

#[test]
fn planted_single_frequency_is_detected() {
    let p = 13;
    let basis = make_basis(p).unwrap();
    let r: Array1<f64> = randn(1, 20, 1).row(0).to_owned();
    let wl = outer(&cos_wave(p, 3), &r);
    let rep = detect_key_frequencies_wl(wl.view(), &basis, 0.1).unwrap();
    assert_eq!(rep.keys, vec![3]);
    assert!(detect_key_frequencies_wl(wl.view(), &basis, 1.5).is_err());
    let zero = Array2::zeros((p, 20));
    assert!(matches!(
        detect_key_frequencies_wl(zero.view(), &basis, 0.1),
        Err(Error::Domain(_))
    ));
}

#[test]
fn rank_two_planted_map_factors_exactly() {
    let p = 11;
    let basis = make_basis(p).unwrap();
    let u: Array1<f64> = randn(1, 9, 2).row(0).to_owned();
    let v: Array1<f64> = randn(1, 9, 3).row(0).to_owned();
    let wl = outer(&cos_wave(p, 4), &u) + outer(&sin_wave(p, 4), &v);
    let f = factor_wl(wl.view(), &basis, &[4]).unwrap();
    assert!(f.residual_ratio < 1e-10);
    for (x, y) in f.u.row(0).iter().zip(u.iter()) {
        assert_abs_diff_eq!(x, y, epsilon = 1e-12);
    }
    assert!(factor_wl(wl.view(), &basis, &[]).is_err());
    assert!(factor_wl(wl.view(), &basis, &[6]).is_err());
}

#[test]
fn residual_matches_explicit_projector() {
    let p = 7;
    let basis = make_basis(p).unwrap();
    let wl = randn(p, 12, 4);
    let f = factor_wl(wl.view(), &basis, &[1]).unwrap();
    let c = cos_wave(p, 1);
    let s = sin_wave(p, 1);
    let ch = &c / c.dot(&c).sqrt();
    let sh = &s / s.dot(&s).sqrt();
    let proj = outer(&ch, &ch) + outer(&sh, &sh);
    let resid = &wl - &proj.dot(&wl);
    let want = resid.iter().map(|x| x * x).sum::<f64>().sqrt() / wl.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert_abs_diff_eq!(f.residual_ratio, want, epsilon = 1e-12);
    // decomposition identity
    let back = &f.reconstruction(p) + &resid;
    assert!(back.iter().zip(wl.iter()).all(|(x, y)| (x - y).abs() < 1e-10));
}

#[test]
fn neuron_subspace_is_orthonormal() {
    let p = 11;
    let basis = make_basis(p).unwrap();
    let f = factor_wl(randn(p, 30, 5).view(), &basis, &[1, 2, 5]).unwrap();
    let q = f.neuron_subspace();
    assert_eq!(q.nrows(), 6);
    let g = q.dot(&q.t());
    assert!((&g - &Array2::<f64>::eye(6)).iter().all(|x| x.abs() < 1e-12));
}

#[test]
fn exact_sum_surface_has_unit_fve() {
    let p = 11;
    let k = 3;
    let basis = make_basis(p).unwrap();
    let n = 6;
    let u: Array1<f64> = randn(1, n, 6).row(0).to_owned();
    let v: Array1<f64> = randn(1, n, 7).row(0).to_owned();
    let mlp = Array3::from_shape_fn((p, p, n), |(a, b, i)| {
        let t = angle(p, k, (a + b) as i64);
        t.cos() * u[i] + t.sin() * v[i]
    });
    let wl = outer(&cos_wave(p, k), &u) + outer(&sin_wave(p, k), &v);
    let f = factor_wl(wl.view(), &basis, &[k]).unwrap();
    let fit = project_mlp_fit(&mlp, &f, &basis).unwrap();
    assert_eq!(fit.directions.len(), 2);
    // u and v are not orthogonal, so each projection mixes in a little of the
    // other wave; a neuron space where they are orthogonal is exact.
    let mut q = Array2::zeros((2, n));
    q[[0, 0]] = 1.0;
    q[[1, 1]] = 1.0;
    let mlp = Array3::from_shape_fn((p, p, n), |(a, b, i)| {
        let t = angle(p, k, (a + b) as i64);
        t.cos() * q[[0, i]] + t.sin() * q[[1, i]] + 0.25
    });
    let f = WLFactorization {
        keys: vec![k],
        u: q.slice(s![0..1, ..]).to_owned(),
        v: q.slice(s![1..2, ..]).to_owned(),
        residual_ratio: 0.0,
    };
    let fit = project_mlp_fit(&mlp, &f, &basis).unwrap();
    for d in &fit.directions {
        assert_abs_diff_eq!(d.single_term_fve, 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(d.single_term_coef, 1.0, epsilon = 1e-10);
    }
    // cos(w(a+b)) = cos cos - sin sin
    let top = &fit.directions[0].top_terms;
    assert_abs_diff_eq!(top[0].coefficient.abs(), 1.0, epsilon = 1e-10);
    assert_abs_diff_eq!(top[1].coefficient.abs(), 1.0, epsilon = 1e-10);
    assert_abs_diff_eq!(fit.mean_fve(), 1.0, epsilon = 1e-10);
}

#[test]
fn logit_cos_fit_planted() {
    let p = 7;
    let l = Array3::from_shape_fn((p, p, p), |(a, b, c)| 3.0 * angle(p, 2, a as i64 + b as i64 - c as i64).cos());
    let fit = fit_logit_cos(&l, &[2]).unwrap();
    assert_abs_diff_eq!(fit.alpha[0], 3.0, epsilon = 1e-12);
    assert_abs_diff_eq!(fit.fve, 1.0, epsilon = 1e-12);
    assert!(fit_logit_cos(&l, &[4]).is_err());
}

#[test]
fn logit_cos_fit_matches_least_squares() {
    let p = 7;
    let mut rng = RngStream::new(8);
    let l = Array3::from_shape_fn((p, p, p), |_| rng.normal());
    let keys = [1, 3];
    let fit = fit_logit_cos(&l, &keys).unwrap();
    let design = Array2::from_shape_fn((p * p * p, 3), |(i, j)| {
        let (a, b, c) = (i / (p * p), (i / p) % p, i % p);
        if j == 0 {
            1.0
        } else {
            angle(p, keys[j - 1], a as i64 + b as i64 - c as i64).cos()
        }
    });
    let target: Array1<f64> = l.iter().copied().collect();
    let oracle = least_squares(&design, target.view()).unwrap();
    assert_abs_diff_eq!(fit.intercept, oracle.coefficients[0], epsilon = 1e-12);
    assert_abs_diff_eq!(fit.alpha[0], oracle.coefficients[1], epsilon = 1e-12);
    assert_abs_diff_eq!(fit.alpha[1], oracle.coefficients[2], epsilon = 1e-12);
    assert_abs_diff_eq!(fit.fve, oracle.fve, epsilon = 1e-12);
    let approx = fit.approximation(p);
    assert_abs_diff_eq!(approx[[1, 2, 3]], design.row(1 * 49 + 2 * 7 + 3).dot(&Array1::from(oracle.coefficients.clone())), epsilon = 1e-12);
}

#[test]
fn neuron_product_surface_fits_exactly() {
    let p = 11;
    let k = 4;
    let mlp = Array3::from_shape_fn((p, p, 3), |(a, b, i)| {
        let (ta, tb) = (angle(p, k, a as i64), angle(p, k, b as i64));
        match i {
            0 => ta.cos() * tb.cos(),
            1 => 2.0 + ta.sin() - 0.5 * tb.cos() * tb.sin(),
            _ => 0.0,
        }
    });
    let fits = fit_neurons(&mlp, &[1, k], 0.85).unwrap();
    assert_eq!(fits.fits[0].frequency, k);
    assert_abs_diff_eq!(fits.fits[0].fve, 1.0, epsilon = 1e-10);
    assert_abs_diff_eq!(fits.fits[1].fve, 1.0, epsilon = 1e-10);
    assert_eq!(fits.fits[0].coefficients.len(), 15);
    // a dead neuron explains nothing and is not clustered
    assert_eq!(fits.fits[2].fve, 0.0);
    assert_eq!(fits.fits[2].cluster, None);
    assert_eq!(fits.clusters[&k], vec![0, 1]);
    assert_abs_diff_eq!(fits.clustered_fraction(), 2.0 / 3.0);
    // the polynomial evaluates back to the surface
    let v = neuron_poly_value(&fits.fits[1].coefficients, p, k, 3, 5);
    assert_abs_diff_eq!(v, mlp[[3, 5, 1]], epsilon = 1e-10);
}

#[test]
fn neuron_design_has_rank_thirteen() {
    let d = neuron_design(11, 2);
    assert_eq!(d.ncols(), 15);
    assert_eq!(LeastSquaresSolver::new(&d).unwrap().rank(), 13);
}

#[test]
fn neuron_sum_part_extracts_sum_waves() {
    let p = 13;
    let k = 5;
    // 0.7 cos(w(a+b)) - 0.2 sin(w(a+b)) + 0.4 cos(w(a-b)) as product terms
    let mlp = Array3::from_shape_fn((p, p, 1), |(a, b, _)| {
        0.7 * angle(p, k, (a + b) as i64).cos() - 0.2 * angle(p, k, (a + b) as i64).sin()
            + 0.4 * angle(p, k, a as i64 - b as i64).cos()
    });
    let fits = fit_neurons(&mlp, &[k], 0.5).unwrap();
    let (c, s) = neuron_sum_part(&fits.fits[0].coefficients);
    assert_abs_diff_eq!(c, 0.7, epsilon = 1e-10);
    assert_abs_diff_eq!(s, -0.2, epsilon = 1e-10);
}

fn tiny_params(seed: u64) -> ModelParams<f64> {
    let cfg = ModelConfig {
        p: 11,
        d_model: 8,
        n_heads: 2,
        d_mlp: 16,
        n_layers: 1,
        scale_attention: true,
    };
    init_params(&cfg, &mut RngStream::new(seed)).unwrap()
}

#[test]
fn zero_query_gives_flat_attention_fit() {
    let mut params = tiny_params(1);
    params.blocks[0].w_q.fill(0.0);
    let sweep = sweep_all_inputs(&params, &NoHook);
    let fits = fit_attention(&params, &sweep.attn_pattern, &sweep.attn_scores).unwrap();
    for f in &fits {
        assert!(f.lookup.iter().all(|x| x.abs() < 1e-15));
        assert!(f.pattern_fit.alpha.abs() < 1e-12 && f.pattern_fit.beta.abs() < 1e-12);
        for (a, b) in [(0, 0), (3, 7), (10, 2)] {
            assert_abs_diff_eq!(f.pattern_fit.value(11, a, b), 0.5, epsilon = 1e-12);
        }
    }
}

#[test]
fn planted_pattern_is_recovered() {
    let p = 13;
    let want = PatternFit {
        frequency: 4,
        alpha: -0.26,
        beta: 0.14,
        fve: 1.0,
    };
    let a0 = Array2::from_shape_fn((p, p), |(a, b)| want.value(p, a, b));
    let got = fit_pattern(&a0).unwrap();
    assert_eq!(got.frequency, 4);
    assert_abs_diff_eq!(got.alpha, -0.26, epsilon = 1e-12);
    assert_abs_diff_eq!(got.beta, 0.14, epsilon = 1e-12);
    assert_abs_diff_eq!(got.fve, 1.0, epsilon = 1e-12);
}

#[test]
fn lookup_matches_attention_scores() {
    // scores differ from the lookup only by position terms, which cancel in a
    // difference between two inputs sharing the other token
    let params = tiny_params(2);
    let sweep = sweep_all_inputs(&params, &NoHook);
    let lookup = attention_lookup(&params);
    for j in 0..2 {
        let d_scores = sweep.attn_scores[[5, 0, j, 0]] - sweep.attn_scores[[2, 0, j, 0]];
        assert_abs_diff_eq!(d_scores, lookup[j][5] - lookup[j][2], epsilon = 1e-10);
    }
    let fits = fit_attention(&params, &sweep.attn_pattern, &sweep.attn_scores).unwrap();
    assert_eq!(fits.len(), 2);
    assert!(fits.iter().all(|f| f.sigmoid_fve <= 1.0 && f.lookup_fit.fve <= 1.0));
}

#[test]
fn ov_spectrum_of_zero_values_is_zero() {
    let mut params = tiny_params(3);
    params.blocks[0].w_v.fill(0.0);
    let spectra = ov_spectrum(&params).unwrap();
    assert_eq!(spectra.len(), 2);
    assert!(spectra.iter().all(|s| s.norms.iter().all(|&x| x == 0.0)));
}

#[test]
fn interference_examples() {
    let f = interference_profile(&[14], 113).unwrap();
    assert!((f.values[8] - 0.998).abs() < 5e-4, "{}", f.values[8]);
    let f = interference_profile(&[35], 113).unwrap();
    assert!((f.values[8] + 0.990).abs() < 5e-4, "{}", f.values[8]);
    let f = interference_profile(&[14, 35, 41, 42, 52], 113).unwrap();
    assert_eq!(f.argmax, 0);
    assert_eq!(f.values[0], 5.0);
    assert!(f.runner_up.1 < 5.0);
    assert!(interference_profile(&[], 113).is_err());
}

#[test]
fn gini_of_planted_maps() {
    let params = tiny_params(4);
    let basis = make_basis(11).unwrap();
    let (ge, gl) = fourier_ginis(&params, &basis).unwrap();
    assert!((0.0..1.0).contains(&ge) && (0.0..1.0).contains(&gl));
}

proptest! {
    #[test]
    fn interference_is_symmetric(keys in prop::collection::btree_set(1usize..56, 1..6)) {
        let keys: Vec<usize> = keys.into_iter().collect();
        let f = interference_profile(&keys, 113).unwrap();
        prop_assert_eq!(f.argmax, 0);
        for x in 1..113 {
            prop_assert!((f.values[x] - f.values[113 - x]).abs() < 1e-12);
            prop_assert!(f.values[x] < f.values[0]);
        }
    }

    #[test]
    fn key_detection_is_scale_invariant(seed: u64, scale in 0.01f64..100.0) {
        let p = 13;
        let basis = make_basis(p).unwrap();
        let wl = randn(p, 10, seed);
        let a = detect_key_frequencies_wl(wl.view(), &basis, 0.3).unwrap();
        let b = detect_key_frequencies_wl((&wl * scale).view(), &basis, 0.3).unwrap();
        prop_assert_eq!(a.keys, b.keys);
    }

    #[test]
    fn enlarging_candidates_never_lowers_fve(seed: u64) {
        let p = 11;
        let mut rng = RngStream::new(seed);
        let mlp = Array3::from_shape_fn((p, p, 4), |_| rng.normal().max(0.0));
        let small = fit_neurons(&mlp, &[2], 0.85).unwrap();
        let big = fit_neurons(&mlp, &[2, 3, 5], 0.85).unwrap();
        for (s, b) in small.fits.iter().zip(&big.fits) {
            prop_assert!(b.fve >= s.fve - 1e-12);
        }
    }

    #[test]
    fn fitted_pattern_is_antisymmetric(k in 1usize..6, alpha in -1.0f64..1.0, beta in -1.0f64..1.0, a in 0usize..13, b in 0usize..13) {
        let f = PatternFit { frequency: k, alpha, beta, fve: 0.0 };
        prop_assert!((f.value(13, a, b) + f.value(13, b, a) - 1.0).abs() < 1e-12);
    }
}

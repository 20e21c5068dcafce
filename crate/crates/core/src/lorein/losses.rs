//! The four terms of the reconstruction objective.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::acquisition::{kspace_difference, EncodingOperator, KSpaceData};
use crate::error::{Error, Result};
use crate::linalg::svd;
use crate::maps::{MapKind, ParametricMaps};
use crate::phantom::CoilMaps;
use crate::scalar::Scalar;
use crate::signal::WeightedImages;

/// Relative floor of the WNNM weights: `eps = WNNM_EPS_REL * sigma_1`.
pub const WNNM_EPS_REL: f64 = 1e-4;
/// Singular values closer than this share their gradient.
const CLUSTER_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_wnnm: BTreeMap<MapKind, f64>,
    pub prior_weight: f64,
    pub dc1_weight: f64,
    pub dc2_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        let lambda_wnnm = [
            (MapKind::A, 0.05),
            (MapKind::T1, 0.2),
            (MapKind::Phi0, 0.2),
            (MapKind::Freq, 0.2),
            (MapKind::T2, 2.0),
            (MapKind::T2s, 2.0),
        ]
        .into_iter()
        .collect();
        Self {
            lambda_wnnm,
            prior_weight: 1.0,
            dc1_weight: 1.0,
            dc2_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn lambda(&self, kind: MapKind) -> f64 {
        self.lambda_wnnm.get(&kind).copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.prior_weight, self.dc1_weight, self.dc2_weight]
            .into_iter()
            .chain(self.lambda_wnnm.values().copied());
        for w in all {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidParameter(format!("loss weights must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// `||ks - M F C I||^2` for predicted weighted images.
pub fn loss_dc<T: Scalar>(predicted: &WeightedImages<T>, coils: &CoilMaps<T>, ks: &KSpaceData<T>) -> Result<f64> {
    let pred = EncodingOperator::new(&ks.mask).forward_images(&predicted.data, coils, &ks.protocol)?;
    Ok(kspace_difference(ks, &pred)?.norm_sqr().as_f64())
}

/// `||a - b||^2` over all voxels and frames.
pub fn loss_prior<T: Scalar>(a: &WeightedImages<T>, b: &WeightedImages<T>) -> Result<f64> {
    if a.data.shape() != b.data.shape() {
        return Err(Error::Dimension(format!("prior term needs equal shapes, got {:?} and {:?}", a.data.shape(), b.data.shape())));
    }
    Ok(a.data.iter().zip(b.data.iter()).map(|(x, y)| (x - y).norm_sqr().as_f64()).sum())
}

/// `w_j = c / (sigma_j + eps)` for descending singular values.
pub fn wnnm_weight_schedule(singular_values: &[f64], c: f64, eps: f64) -> Result<Vec<f64>> {
    if !(eps >= 0.0) {
        return Err(Error::InvalidParameter(format!("WNNM eps must be >= 0, got {eps}")));
    }
    if singular_values.iter().any(|&s| !(s >= 0.0)) {
        return Err(Error::InvalidParameter("singular values must be >= 0".into()));
    }
    if singular_values.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::InvalidParameter("singular values must be sorted descending".into()));
    }
    if eps == 0.0 && singular_values.contains(&0.0) {
        return Err(Error::InvalidParameter("eps = 0 with a zero singular value".into()));
    }
    Ok(singular_values.iter().map(|&s| c / (s + eps)).collect())
}

/// `sum_j sigma_j / (sigma_j + eps)` with `eps = WNNM_EPS_REL * sigma_1`, and its
/// gradient with respect to the matrix. The gradient includes the dependence
/// of `eps` on `sigma_1`.
pub(crate) fn wnnm_matrix(x: &Array2<f64>) -> (f64, Array2<f64>) {
    let d = svd(x);
    let s = d.s.to_vec();
    let s1 = s.first().copied().unwrap_or(0.0);
    if !(s1 > 0.0) {
        return (0.0, Array2::zeros(x.raw_dim()));
    }
    let eps = WNNM_EPS_REL * s1;
    let w = wnnm_weight_schedule(&s, 1.0, eps).expect("valid spectrum");
    let value: f64 = s.iter().zip(&w).map(|(a, b)| a * b).sum();
    let mut g: Vec<f64> = s.iter().map(|&sj| eps / (sj + eps).powi(2)).collect();
    g[0] -= WNNM_EPS_REL * s.iter().map(|&sj| sj / (sj + eps).powi(2)).sum::<f64>();
    let mut start = 0;
    while start < g.len() {
        let mut end = start + 1;
        while end < g.len() && s[end - 1] - s[end] < CLUSTER_TOL {
            end += 1;
        }
        if end - start > 1 {
            let mean = g[start..end].iter().sum::<f64>() / (end - start) as f64;
            g[start..end].iter_mut().for_each(|v| *v = mean);
        }
        start = end;
    }
    let mut us = d.u.clone();
    for (mut col, &gj) in us.axis_iter_mut(Axis(1)).zip(&g) {
        col *= gj;
    }
    (value, us.dot(&d.vt))
}

fn slice_matrix<T: Scalar>(map: &Array3<T>, k: usize) -> Array2<f64> {
    map.index_axis(Axis(2), k).mapv(|v| v.as_f64())
}

/// `sum_i lambda_i sum_slices sum_j w_j sigma_j` over axial slices of every
/// weighted map.
pub fn loss_wnnm<T: Scalar>(maps: &ParametricMaps<T>, weights: &LossWeights) -> Result<f64> {
    Ok(wnnm_value_and_gradient(maps, weights, false)?.0)
}

/// [`loss_wnnm`] and its gradient with respect to each weighted map.
pub fn wnnm_value_and_gradient<T: Scalar>(
    maps: &ParametricMaps<T>,
    weights: &LossWeights,
    want_grad: bool,
) -> Result<(f64, BTreeMap<MapKind, Array3<f64>>)> {
    let mut total = 0.0;
    let mut grads = BTreeMap::new();
    for (kind, map) in maps.iter() {
        let lambda = weights.lambda(kind);
        if lambda == 0.0 {
            continue;
        }
        if map.iter().any(|v| !v.as_f64().is_finite()) {
            return Err(Error::InvalidParameter(format!("map {kind} has non-finite values")));
        }
        let mut g = Array3::<f64>::zeros(map.raw_dim());
        for k in 0..map.len_of(Axis(2)) {
            let (v, gs) = wnnm_matrix(&slice_matrix(map, k));
            total += lambda * v;
            if want_grad {
                g.index_axis_mut(Axis(2), k).assign(&(gs * lambda));
            }
        }
        if want_grad {
            grads.insert(kind, g);
        }
    }
    Ok((total, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex;
    use crate::acquisition::{make_mask, MaskPattern};
    use crate::phantom::{make_coil_maps, make_phantom};
    use crate::signal::{simulate_weighted, SequenceProtocol};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    #[test]
    fn weight_schedule() {
        assert_eq!(wnnm_weight_schedule(&[2.0, 1.0], 1.0, 0.0).unwrap(), vec![0.5, 1.0]);
        let w = wnnm_weight_schedule(&[3.0; 4], 1.0, 0.1).unwrap();
        assert!(w.iter().all(|&x| x == w[0]));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..5.0)).collect();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let w = wnnm_weight_schedule(&s, 2.0, 1e-3).unwrap();
        assert!(w.windows(2).all(|p| p[0] <= p[1]));
        assert!(wnnm_weight_schedule(&[1.0], 1.0, -1.0).is_err());
        assert!(wnnm_weight_schedule(&[1.0, 0.0], 1.0, 0.0).is_err());
        assert!(wnnm_weight_schedule(&[1.0, 2.0], 1.0, 0.1).is_err());
    }

    #[test]
    fn wnnm_zero_and_rank_one() {
        let shape = [8, 8, 2];
        let mut maps = ParametricMaps::<f64>::new(shape);
        maps.insert(MapKind::T1, Array3::zeros(shape)).unwrap();
        let weights = LossWeights::default();
        assert_eq!(loss_wnnm(&maps, &weights).unwrap(), 0.0);
        // a 3x3 block of value 7 in one slice: sigma_1 = 21
        let mut block = Array3::zeros(shape);
        for i in 2..5 {
            for j in 1..4 {
                block[[i, j, 0]] = 7.0;
            }
        }
        maps.insert(MapKind::T1, block).unwrap();
        let s1 = 21.0;
        let expected = 0.2 * s1 / (s1 + WNNM_EPS_REL * s1);
        assert!((loss_wnnm(&maps, &weights).unwrap() - expected).abs() < 1e-9);
        maps.get_mut(MapKind::T1).unwrap()[[0, 0, 1]] = f64::NAN;
        assert!(loss_wnnm(&maps, &weights).is_err());
    }

    #[test]
    fn wnnm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // well separated spectrum: U diag(s) V^T with random orthogonal factors
        let q = |rng: &mut ChaCha8Rng| {
            let a = Array2::from_shape_fn((8, 8), |_| rng.random_range(-1.0..1.0));
            svd(&a).u
        };
        let (u, v) = (q(&mut rng), q(&mut rng));
        let s = Array2::from_diag(&ndarray::arr1(&[9.0, 7.0, 5.0, 3.5, 2.0, 1.2, 0.6, 0.05]));
        let x = u.dot(&s).dot(&v.t());
        let (_, g) = wnnm_matrix(&x);
        for _ in 0..10 {
            let (i, j) = (rng.random_range(0..8), rng.random_range(0..8));
            let h = 1e-6;
            let mut hi = x.clone();
            hi[[i, j]] += h;
            let mut lo = x.clone();
            lo[[i, j]] -= h;
            let fd = (wnnm_matrix(&hi).0 - wnnm_matrix(&lo).0) / (2.0 * h);
            assert!((fd - g[[i, j]]).abs() <= 1e-3 * g[[i, j]].abs().max(1e-6), "{fd} vs {}", g[[i, j]]);
        }
    }

    #[test]
    fn prior_is_symmetric_squared_distance() {
        let p = SequenceProtocol::vfa_megre_default();
        let gt = make_phantom::<f64>([8, 8, 8], 1).unwrap();
        let a = simulate_weighted(&gt, &p).unwrap();
        assert_eq!(loss_prior(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b.data[[3, 4, 4, 4]] += Complex::new(0.3, -0.4);
        assert!((loss_prior(&a, &b).unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(loss_prior(&a, &b).unwrap(), loss_prior(&b, &a).unwrap());
    }

    #[test]
    fn data_consistency_limits() {
        let p = SequenceProtocol::vfa_megre_default();
        let shape = [16, 16, 8];
        let gt = make_phantom::<f64>(shape, 2).unwrap();
        let iw = simulate_weighted(&gt, &p).unwrap();
        let coils = make_coil_maps(shape, 4, 2).unwrap();
        let mask = Arc::new(make_mask([16, 16, 8, 60], MaskPattern::UniformRandom, 4.0, [0, 0, 0], 2).unwrap());
        let ks = crate::acquisition::forward(&iw, &coils, &mask).unwrap();
        assert!(loss_dc(&iw, &coils, &ks).unwrap() <= 1e-10 * ks.norm_sqr());
        let zero = WeightedImages::new(iw.data.mapv(|_| Complex::new(0.0, 0.0)), p).unwrap();
        assert!((loss_dc(&zero, &coils, &ks).unwrap() - ks.norm_sqr()).abs() < 1e-9 * ks.norm_sqr());
    }

    #[test]
    fn residual_count_halves_with_mask_density() {
        // white residual images: the expected DC loss is proportional to the
        // number of sampled points
        let p = SequenceProtocol::vfa_megre_default();
        let shape = [16, 16, 8];
        let coils = CoilMaps::<f64>::unit(shape);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = ndarray::Array4::from_shape_simple_fn((60, 16, 16, 8), || {
            Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        let pred = WeightedImages::new(noise, p.clone()).unwrap();
        let loss_at = |r: f64| {
            let mask = Arc::new(make_mask([16, 16, 8, 60], MaskPattern::UniformRandom, r, [0, 0, 0], 4).unwrap());
            let ks = KSpaceData::zeros(mask, p.clone(), 1);
            loss_dc(&pred, &coils, &ks).unwrap()
        };
        let ratio = loss_at(2.0) / loss_at(4.0);
        assert!((ratio - 2.0).abs() < 0.05, "{ratio}");
    }
}

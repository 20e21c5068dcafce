//! Temporal subspace extraction and the low-rank link between spatial bases
//! and weighted images.

use ndarray::{Array2, Array4, Axis};
use num_complex::Complex;

use crate::error::{Error, Result};
use crate::linalg::svd;
use crate::scalar::Scalar;
use crate::signal::{SequenceProtocol, WeightedImages};

/// Real temporal basis `phi` of shape `(K, T)` with orthonormal rows.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalBasis<T: Scalar> {
    pub phi: Array2<T>,
    /// Full singular spectrum of the source matrix, non-increasing.
    pub singular_values: Vec<f64>,
}

impl<T: Scalar> TemporalBasis<T> {
    pub fn rank(&self) -> usize {
        self.phi.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.phi.ncols()
    }

    /// Fraction of the source matrix energy captured by the retained rows.
    pub fn captured_energy(&self) -> f64 {
        captured_energy(&self.singular_values, self.rank())
    }

    pub fn cast<U: Scalar>(&self) -> TemporalBasis<U> {
        TemporalBasis {
            phi: self.phi.mapv(|x| U::lit(x.as_f64())),
            singular_values: self.singular_values.clone(),
        }
    }
}

pub fn captured_energy(singular_values: &[f64], k: usize) -> f64 {
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return 1.0;
    }
    singular_values.iter().take(k).map(|s| s * s).sum::<f64>() / total
}

/// Spatial bases `(K, H, W, D)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialBases<T: Scalar> {
    pub u: Array4<Complex<T>>,
}

impl<T: Scalar> SpatialBases<T> {
    pub fn rank(&self) -> usize {
        self.u.len_of(Axis(0))
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.u.shape();
        [s[1], s[2], s[3]]
    }
}

/// Top-`k` right singular vectors of a `(rows, T)` signal matrix. Each row's
/// sign is fixed so its largest-magnitude entry is positive.
pub fn temporal_basis<T: Scalar>(dictionary: &Array2<T>, k: usize) -> Result<TemporalBasis<T>> {
    let (rows, cols) = dictionary.dim();
    let limit = rows.min(cols);
    if k == 0 || k > limit {
        return Err(Error::InvalidParameter(format!("rank {k} outside 1..={limit}")));
    }
    let d = svd(&dictionary.mapv(|x| x.as_f64()));
    let mut phi = Array2::<T>::zeros((k, cols));
    for r in 0..k {
        let row = d.vt.row(r);
        let pivot = row.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for (t, &x) in row.iter().enumerate() {
            phi[[r, t]] = T::lit(sign * x);
        }
    }
    Ok(TemporalBasis {
        phi,
        singular_values: d.s.to_vec(),
    })
}

/// `I(v, t) = sum_k U(v, k) phi(k, t)`.
pub fn compose_weighted<T: Scalar>(
    u: &SpatialBases<T>,
    phi: &TemporalBasis<T>,
    protocol: &SequenceProtocol,
) -> Result<WeightedImages<T>> {
    WeightedImages::new(compose_raw(&u.u, &phi.phi)?, protocol.clone())
}

pub(crate) fn compose_raw<T: Scalar>(u: &Array4<Complex<T>>, phi: &Array2<T>) -> Result<Array4<Complex<T>>> {
    let s = u.shape();
    if s[0] != phi.nrows() {
        return Err(Error::ShapeMismatch {
            axis: "rank",
            expected: phi.nrows(),
            got: s[0],
        });
    }
    let n = s[1] * s[2] * s[3];
    let frames = phi.ncols();
    let src = u.as_slice().expect("standard layout");
    let mut out = vec![Complex::new(T::zero(), T::zero()); frames * n];
    for t in 0..frames {
        let dst = &mut out[t * n..(t + 1) * n];
        for k in 0..s[0] {
            let p = phi[[k, t]];
            for (o, &x) in dst.iter_mut().zip(&src[k * n..(k + 1) * n]) {
                *o += x.scale(p);
            }
        }
    }
    Ok(Array4::from_shape_vec((frames, s[1], s[2], s[3]), out).expect("layout"))
}

/// Least-squares spatial bases `U = I phi^H` (exact for orthonormal rows).
pub fn project_to_subspace<T: Scalar>(iw: &WeightedImages<T>, phi: &TemporalBasis<T>) -> Result<SpatialBases<T>> {
    Ok(SpatialBases {
        u: project_raw(&iw.data, &phi.phi)?,
    })
}

pub(crate) fn project_raw<T: Scalar>(images: &Array4<Complex<T>>, phi: &Array2<T>) -> Result<Array4<Complex<T>>> {
    let s = images.shape();
    if s[0] != phi.ncols() {
        return Err(Error::ShapeMismatch {
            axis: "frame",
            expected: phi.ncols(),
            got: s[0],
        });
    }
    let n = s[1] * s[2] * s[3];
    let rank = phi.nrows();
    let src = images.as_slice().expect("standard layout");
    let mut out = vec![Complex::new(T::zero(), T::zero()); rank * n];
    for k in 0..rank {
        let dst = &mut out[k * n..(k + 1) * n];
        for t in 0..s[0] {
            let p = phi[[k, t]];
            for (o, &x) in dst.iter_mut().zip(&src[t * n..(t + 1) * n]) {
                *o += x.scale(p);
            }
        }
    }
    Ok(Array4::from_shape_vec((rank, s[1], s[2], s[3]), out).expect("layout"))
}

/// Relative Frobenius error `||a - b|| / ||b||` between two complex arrays.
pub fn relative_error<T: Scalar>(a: &Array4<Complex<T>>, b: &Array4<Complex<T>>) -> f64 {
    let num: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm_sqr().as_f64()).sum();
    let den: f64 = b.iter().map(|y| y.norm_sqr().as_f64()).sum();
    (num / den).sqrt()
}

//! Thin wrappers around nalgebra's SVD returning ndarray factors in descending order.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};

/// Thin SVD `m = u diag(s) vt` with `s` sorted in non-increasing order.
pub struct Svd {
    pub u: Array2<f64>,
    pub s: Array1<f64>,
    pub vt: Array2<f64>,
}

pub fn svd(m: &Array2<f64>) -> Svd {
    let (rows, cols) = m.dim();
    let dm = DMatrix::from_fn(rows, cols, |i, j| m[[i, j]]);
    let decomposition = dm.svd(true, true);
    let u = decomposition.u.expect("requested U");
    let vt = decomposition.v_t.expect("requested V^T");
    let sv = decomposition.singular_values;
    let k = sv.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    Svd {
        u: Array2::from_shape_fn((rows, k), |(i, j)| u[(i, order[j])]),
        s: Array1::from_iter(order.iter().map(|&j| sv[j])),
        vt: Array2::from_shape_fn((k, cols), |(i, j)| vt[(order[i], j)]),
    }
}

//! Coordinate-based function approximators: multiresolution hash encoding
//! followed by small ReLU networks, with output heads for positive, real and
//! complex quantities.

mod adam;
mod field;
mod hash;
mod mlp;

pub use adam::Adam;
pub use field::{FieldConfig, Head, NeuralField, Tape};
pub use hash::{hash_encode, hash_encode_backward, HashEncoding, HashEncodingConfig};
pub use mlp::Mlp;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A point in the unit cube.
pub type Coord<T> = [T; 3];

/// Voxel centres of an `(H, W, D)` grid mapped to `[0, 1]^3`, row-major with the
/// last axis fastest. Voxel `(1, 1, 1)` maps to the origin.
pub fn coordinate_grid<T: Scalar>(shape: [usize; 3]) -> Result<Vec<Coord<T>>> {
    if shape.iter().any(|&n| n == 0) {
        return Err(Error::Dimension(format!("empty coordinate grid {shape:?}")));
    }
    let axis = |i: usize, n: usize| {
        if n > 1 {
            T::lit(i as f64 / (n - 1) as f64)
        } else {
            T::zero()
        }
    };
    let [h, w, d] = shape;
    let mut out = Vec::with_capacity(h * w * d);
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                out.push([axis(i, h), axis(j, w), axis(k, d)]);
            }
        }
    }
    Ok(out)
}

pub(crate) fn check_coords<T: Scalar>(coords: &[Coord<T>]) -> Result<()> {
    for (index, c) in coords.iter().enumerate() {
        if c.iter().any(|&x| !(x >= T::zero() && x <= T::one())) {
            return Err(Error::CoordinateOutOfRange {
                index,
                value: c.map(|x| x.as_f64()),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_order_and_size() {
        let g = coordinate_grid::<f64>([2, 2, 1]).unwrap();
        assert_eq!(g.len(), 4);
        assert_eq!(g[0], [0.0, 0.0, 0.0]);
        assert_eq!(g[1], [0.0, 1.0, 0.0]);
        assert_eq!(g[3], [1.0, 1.0, 0.0]);
        assert_eq!(coordinate_grid::<f32>([5, 3, 7]).unwrap().len(), 105);
        assert!(coordinate_grid::<f64>([0, 3, 7]).is_err());
    }
}

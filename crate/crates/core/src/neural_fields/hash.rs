//! Multiresolution hash encoding with trilinear interpolation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_coords, Coord};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashEncodingConfig {
    /// Number of resolution levels.
    pub levels: usize,
    /// log2 of the maximum number of entries per level.
    pub log2_table_size: u32,
    /// Features stored per entry.
    pub features: usize,
    /// Coarsest grid resolution.
    pub base_resolution: usize,
    /// Growth ratio between consecutive levels.
    pub per_level_scale: f64,
}

impl HashEncodingConfig {
    fn scale_to(levels: usize, base: usize, finest: f64) -> f64 {
        if levels <= 1 || finest <= base as f64 {
            1.0
        } else {
            (finest / base as f64).powf(1.0 / (levels - 1) as f64)
        }
    }

    /// 16 levels, 2^19 entries, 2 features, coarsest 16, finest about twice the
    /// largest volume dimension.
    pub fn for_volume(shape: [usize; 3]) -> Self {
        let largest = *shape.iter().max().unwrap_or(&1) as f64;
        Self {
            levels: 16,
            log2_table_size: 19,
            features: 2,
            base_resolution: 16,
            per_level_scale: Self::scale_to(16, 16, 2.0 * largest),
        }
    }

    /// Phase maps: coarsest resolution 1 and 2^12 entries.
    pub fn for_phase(shape: [usize; 3]) -> Self {
        let largest = *shape.iter().max().unwrap_or(&1) as f64;
        Self {
            levels: 16,
            log2_table_size: 12,
            features: 2,
            base_resolution: 1,
            per_level_scale: Self::scale_to(16, 1, 2.0 * largest),
        }
    }

    /// Coil sensitivities: 8 levels from resolution 2 to a quarter of the largest
    /// dimension, 2^12 entries.
    pub fn for_coils(shape: [usize; 3]) -> Self {
        let largest = *shape.iter().max().unwrap_or(&1) as f64;
        Self {
            levels: 8,
            log2_table_size: 12,
            features: 2,
            base_resolution: 2,
            per_level_scale: Self::scale_to(8, 2, (largest / 4.0).max(2.0)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.features == 0 || self.base_resolution == 0 {
            return Err(Error::InvalidParameter("hash encoding needs levels, features and resolution >= 1".into()));
        }
        if !(1..=30).contains(&self.log2_table_size) {
            return Err(Error::InvalidParameter(format!("log2 table size {} out of range", self.log2_table_size)));
        }
        if !(self.per_level_scale >= 1.0) {
            return Err(Error::InvalidParameter(format!("per-level scale {} must be >= 1", self.per_level_scale)));
        }
        Ok(())
    }

    /// `floor(N_min * b^l)` for every level.
    pub fn resolutions(&self) -> Vec<usize> {
        (0..self.levels)
            .map(|l| (self.base_resolution as f64 * self.per_level_scale.powi(l as i32) + 1e-9).floor() as usize)
            .collect()
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.features
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Level {
    resolution: usize,
    entries: usize,
    dense: bool,
    offset: usize,
}

/// Table layout of one encoding. Parameters live in a caller-owned slice of
/// length [`HashEncoding::n_params`].
///
/// Levels whose full vertex grid fits in the table are indexed directly; finer
/// levels use the XOR-of-primes spatial hash. Colliding entries receive the sum
/// of their gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct HashEncoding {
    config: HashEncodingConfig,
    levels: Vec<Level>,
    n_entries: usize,
}

impl HashEncoding {
    pub fn new(config: HashEncodingConfig) -> Result<Self> {
        config.validate()?;
        let cap = 1usize << config.log2_table_size;
        let mut offset = 0;
        let levels = config
            .resolutions()
            .into_iter()
            .map(|resolution| {
                let side = resolution + 1;
                let full = side.checked_pow(3).unwrap_or(usize::MAX);
                let dense = full <= cap;
                let entries = if dense { full } else { cap };
                let level = Level {
                    resolution,
                    entries,
                    dense,
                    offset,
                };
                offset += entries;
                level
            })
            .collect();
        Ok(Self {
            config,
            levels,
            n_entries: offset,
        })
    }

    pub fn config(&self) -> &HashEncodingConfig {
        &self.config
    }

    pub fn n_params(&self) -> usize {
        self.n_entries * self.config.features
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    /// Uniform initialization in `[-1e-4, 1e-4]`.
    pub fn init_params<T: Scalar>(&self, rng: &mut ChaCha8Rng, out: &mut [T]) {
        for p in out.iter_mut() {
            *p = T::lit(rng.random_range(-1e-4..1e-4));
        }
    }

    #[inline]
    fn entry(level: &Level, x: usize, y: usize, z: usize) -> usize {
        let local = if level.dense {
            let side = level.resolution + 1;
            x + side * (y + side * z)
        } else {
            let h = (x as u32).wrapping_mul(PRIMES[0])
                ^ (y as u32).wrapping_mul(PRIMES[1])
                ^ (z as u32).wrapping_mul(PRIMES[2]);
            (h as usize) & (level.entries - 1)
        };
        level.offset + local
    }

    /// Visits the 8 `(entry, weight)` pairs of every level for one coordinate.
    #[inline]
    fn corners<T: Scalar>(&self, c: &Coord<T>, mut visit: impl FnMut(usize, usize, T)) {
        for (l, level) in self.levels.iter().enumerate() {
            let res = level.resolution;
            let mut base = [0usize; 3];
            let mut frac = [T::zero(); 3];
            for a in 0..3 {
                let pos = c[a] * T::lit(res as f64);
                let cell = num_traits::Float::floor(pos).to_usize().unwrap_or(0).min(res.saturating_sub(1));
                base[a] = cell;
                frac[a] = pos - T::lit(cell as f64);
            }
            for corner in 0..8usize {
                let mut w = T::one();
                let mut v = [0usize; 3];
                for a in 0..3 {
                    if corner >> a & 1 == 1 {
                        w = w * frac[a];
                        v[a] = base[a] + 1;
                    } else {
                        w = w * (T::one() - frac[a]);
                        v[a] = base[a];
                    }
                }
                visit(l, Self::entry(level, v[0], v[1], v[2]), w);
            }
        }
    }

    /// Writes `coords.len() x output_dim` features (level-major) into `out`.
    pub fn forward<T: Scalar>(&self, params: &[T], coords: &[Coord<T>], out: &mut [T]) {
        let f = self.config.features;
        let dim = self.output_dim();
        debug_assert_eq!(out.len(), coords.len() * dim);
        out.iter_mut().for_each(|x| *x = T::zero());
        for (c, row) in coords.iter().zip(out.chunks_exact_mut(dim)) {
            self.corners(c, |l, e, w| {
                let src = &params[e * f..(e + 1) * f];
                for (o, &p) in row[l * f..(l + 1) * f].iter_mut().zip(src) {
                    *o += w * p;
                }
            });
        }
    }

    /// Accumulates `d loss / d params` into `grad` given `d loss / d features`.
    pub fn backward<T: Scalar>(&self, coords: &[Coord<T>], dout: &[T], grad: &mut [T]) {
        let f = self.config.features;
        let dim = self.output_dim();
        for (c, row) in coords.iter().zip(dout.chunks_exact(dim)) {
            self.corners(c, |l, e, w| {
                let dst = &mut grad[e * f..(e + 1) * f];
                for (g, &d) in dst.iter_mut().zip(&row[l * f..(l + 1) * f]) {
                    *g += w * d;
                }
            });
        }
    }
}

/// Features of `coords` (validated to lie in the unit cube) under `params`.
pub fn hash_encode<T: Scalar>(coords: &[Coord<T>], config: &HashEncodingConfig, params: &[T]) -> Result<ndarray::Array2<T>> {
    check_coords(coords)?;
    let enc = HashEncoding::new(*config)?;
    if params.len() != enc.n_params() {
        return Err(Error::ShapeMismatch {
            axis: "parameter",
            expected: enc.n_params(),
            got: params.len(),
        });
    }
    let mut out = vec![T::zero(); coords.len() * enc.output_dim()];
    enc.forward(params, coords, &mut out);
    Ok(ndarray::Array2::from_shape_vec((coords.len(), enc.output_dim()), out).expect("layout"))
}

/// Gradient of `sum(dout * hash_encode(coords))` with respect to the tables.
pub fn hash_encode_backward<T: Scalar>(coords: &[Coord<T>], config: &HashEncodingConfig, dout: &ndarray::Array2<T>) -> Result<Vec<T>> {
    check_coords(coords)?;
    let enc = HashEncoding::new(*config)?;
    let mut grad = vec![T::zero(); enc.n_params()];
    let dout = dout.as_standard_layout();
    enc.backward(coords, dout.as_slice().expect("standard layout"), &mut grad);
    Ok(grad)
}

//! Parameter state of the two reconstruction blocks and their predictions.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, Array4};
use num_complex::Complex;

use super::cnn::{Refiner, RefinerTape};
use crate::error::{Error, Result};
use crate::maps::{MapKind, ParametricMaps};
use crate::neural_fields::{Coord, FieldConfig, HashEncodingConfig, Head, NeuralField};
use crate::phantom::CoilMaps;
use crate::scalar::Scalar;
use crate::signal::{FrameConsts, SequenceProtocol, TissueParams, WeightedImages};
use crate::subspace::SpatialBases;

/// Spatial-basis field, its refiner, and the coil-sensitivity field.
#[derive(Clone, Debug)]
pub struct LrrState<T: Scalar> {
    pub basis_field: NeuralField<T>,
    pub refiner: Refiner<T>,
    pub coil_field: NeuralField<T>,
}

impl<T: Scalar> LrrState<T> {
    pub fn new(shape: [usize; 3], rank: usize, n_coils: usize, seed: u64) -> Result<Self> {
        let basis = FieldConfig::new(HashEncodingConfig::for_volume(shape), Head::ComplexTwoHead, rank);
        let coil = FieldConfig::new(HashEncodingConfig::for_coils(shape), Head::ComplexTwoHead, n_coils);
        Ok(Self {
            basis_field: NeuralField::new(basis, seed)?,
            refiner: Refiner::new(rank, seed.wrapping_add(1))?,
            coil_field: NeuralField::new(coil, seed.wrapping_add(2))?,
        })
    }

    pub fn rank(&self) -> usize {
        self.basis_field.config().out_dim
    }

    pub fn n_coils(&self) -> usize {
        self.coil_field.config().out_dim
    }
}

/// Complex field output `(N, 2K)` as volumes `(K, H, W, D)`.
pub(crate) fn columns_to_volumes<T: Scalar>(out: &Array2<T>, shape: [usize; 3]) -> Array4<Complex<T>> {
    let k = out.ncols() / 2;
    let n = out.nrows();
    let mut vol = Vec::with_capacity(k * n);
    for b in 0..k {
        for v in 0..n {
            vol.push(Complex::new(out[[v, b]], out[[v, k + b]]));
        }
    }
    Array4::from_shape_vec((k, shape[0], shape[1], shape[2]), vol).expect("layout")
}

/// Inverse of [`columns_to_volumes`], used for gradients.
pub(crate) fn volumes_to_columns<T: Scalar>(vol: &Array4<Complex<T>>) -> Array2<T> {
    let s = vol.shape();
    let (k, n) = (s[0], s[1] * s[2] * s[3]);
    let src = vol.as_slice().expect("standard layout");
    let mut out = Array2::zeros((n, 2 * k));
    for b in 0..k {
        for v in 0..n {
            let z = src[b * n + v];
            out[[v, b]] = z.re;
            out[[v, k + b]] = z.im;
        }
    }
    out
}

/// Per-voxel coil normalization of raw field values `(C, H, W, D)`: unit
/// root-sum-of-squares and a real, non-negative coil sum, as for simulated
/// sensitivities.
pub(crate) fn normalize_coils<T: Scalar>(raw: &Array4<Complex<T>>) -> CoilMaps<T> {
    let s = raw.shape();
    let (c, n) = (s[0], s[1] * s[2] * s[3]);
    let src = raw.as_slice().expect("standard layout");
    let mut out = vec![Complex::new(T::zero(), T::zero()); c * n];
    let mut buf = vec![Complex::new(T::zero(), T::zero()); c];
    for v in 0..n {
        for (b, i) in buf.iter_mut().zip(0..c) {
            *b = src[i * n + v];
        }
        crate::phantom::normalize_coil_voxel(&mut buf);
        for (i, &b) in buf.iter().enumerate() {
            out[i * n + v] = b;
        }
    }
    CoilMaps {
        maps: Array4::from_shape_vec((c, s[1], s[2], s[3]), out).expect("layout"),
    }
}

/// Gradient through [`normalize_coils`]: given `g = dL/dRe c + i dL/dIm c`
/// for the normalized maps, returns the same for the raw values.
pub(crate) fn normalize_coils_backward<T: Scalar>(raw: &Array4<Complex<T>>, g: &Array4<Complex<T>>) -> Array4<Complex<T>> {
    let s = raw.shape();
    let (c, n) = (s[0], s[1] * s[2] * s[3]);
    let z = raw.as_slice().expect("standard layout");
    let gs = g.as_slice().expect("standard layout");
    let zero = Complex::new(T::zero(), T::zero());
    let mut out = vec![zero; c * n];
    for v in 0..n {
        let r2: T = (0..c).map(|i| z[i * n + v].norm_sqr()).sum();
        if r2 <= T::zero() {
            continue;
        }
        let r = r2.sqrt();
        let sum: Complex<T> = (0..c).fold(zero, |a, i| a + z[i * n + v]);
        let sum_abs = sum.norm();
        let u = if sum_abs > T::zero() {
            sum.conj() / sum_abs
        } else {
            Complex::new(T::one(), T::zero())
        };
        let a: Complex<T> = (0..c).fold(zero, |acc, i| acc + gs[i * n + v].conj() * z[i * n + v]) * u / r;
        let rot = if sum_abs > T::zero() {
            Complex::new(T::zero(), a.im) / sum.conj()
        } else {
            zero
        };
        for i in 0..c {
            let zi = z[i * n + v];
            out[i * n + v] = gs[i * n + v] * u.conj() / r + rot - zi * (a.re / r2);
        }
    }
    Array4::from_shape_vec((c, s[1], s[2], s[3]), out).expect("layout")
}

/// Spatial bases and coil maps on the full grid.
pub fn lrr_predict<T: Scalar>(state: &LrrState<T>, coords: &[Coord<T>], shape: [usize; 3]) -> Result<(SpatialBases<T>, CoilMaps<T>)> {
    check_grid(coords, shape)?;
    let raw = columns_to_volumes(&state.basis_field.forward(coords)?, shape);
    let u = state.refiner.forward(&raw)?;
    let coils = normalize_coils(&columns_to_volumes(&state.coil_field.forward(coords)?, shape));
    Ok((SpatialBases { u }, coils))
}

fn check_grid<T>(coords: &[Coord<T>], shape: [usize; 3]) -> Result<()> {
    let n: usize = shape.iter().product();
    if coords.len() != n {
        return Err(Error::ShapeMismatch {
            axis: "coordinate",
            expected: n,
            got: coords.len(),
        });
    }
    Ok(())
}

/// Typical scale of each positive map; fields predict `log(value / unit)`.
pub fn map_unit(kind: MapKind) -> f64 {
    match kind {
        MapKind::T1 => 1000.0,
        MapKind::T2 => 100.0,
        MapKind::T2s => 50.0,
        MapKind::Freq => 10.0,
        _ => 1.0,
    }
}

/// The inversion-efficiency field predicts `logit(b) - B_OFFSET`, so an output
/// of zero means `b` close to 0.95.
const B_OFFSET: f64 = 3.0;

/// One field per parametric map of the active signal model.
#[derive(Clone, Debug)]
pub struct PmrState<T: Scalar> {
    pub fields: BTreeMap<MapKind, NeuralField<T>>,
    /// Scale of the amplitude map.
    pub a_unit: f64,
}

impl<T: Scalar> PmrState<T> {
    /// Positive maps use the exponential head, `b` a shifted sigmoid of a real
    /// head, and the phase maps real heads on the coarse phase encoding.
    pub fn new(shape: [usize; 3], protocol: &SequenceProtocol, a_unit: f64, seed: u64) -> Result<Self> {
        let mut fields = BTreeMap::new();
        for (i, &kind) in protocol.required_maps().iter().enumerate() {
            let cfg = match kind {
                MapKind::Phi0 | MapKind::Freq => FieldConfig::new(HashEncodingConfig::for_phase(shape), Head::LinearReal, 1),
                MapKind::B => FieldConfig::new(HashEncodingConfig::for_volume(shape), Head::LinearReal, 1),
                _ => FieldConfig::new(HashEncodingConfig::for_volume(shape), Head::PositiveExp, 1),
            };
            fields.insert(kind, NeuralField::new(cfg, seed.wrapping_add(10 + i as u64))?);
        }
        Ok(Self { fields, a_unit })
    }

    fn unit(&self, kind: MapKind) -> f64 {
        if kind == MapKind::A {
            self.a_unit
        } else {
            map_unit(kind)
        }
    }

    /// Map value from the field's head output.
    fn value(&self, kind: MapKind, head: T) -> T {
        match kind {
            MapKind::B => T::one() / (T::one() + num_traits::Float::exp(-(head + T::lit(B_OFFSET)))),
            _ => head * T::lit(self.unit(kind)),
        }
    }

    /// `d value / d head` given the value.
    fn slope(&self, kind: MapKind, value: T) -> T {
        match kind {
            MapKind::B => value * (T::one() - value),
            _ => T::lit(self.unit(kind)),
        }
    }

    fn check_protocol(&self, protocol: &SequenceProtocol) -> Result<()> {
        for kind in protocol.required_maps() {
            if !self.fields.contains_key(kind) {
                return Err(Error::MissingField(format!("no field for map {kind}")));
            }
        }
        Ok(())
    }
}

/// Outputs of the PMR block kept for its backward pass.
pub(crate) struct PmrForward<T: Scalar> {
    pub maps: ParametricMaps<T>,
    pub images: Array4<Complex<T>>,
}

/// Voxel parameters from maps; absent maps keep neutral values.
fn voxel<T: Scalar>(maps: &BTreeMap<MapKind, &[T]>, v: usize) -> TissueParams<T> {
    let mut p = TissueParams {
        a: T::zero(),
        b: T::one(),
        t1: T::one(),
        t2: T::one(),
        t2s: T::one(),
        phi0: T::zero(),
        freq: T::zero(),
    };
    for (&kind, values) in maps {
        p.set(kind, values[v]);
    }
    p
}

/// Weighted images of every voxel of `maps` through the Bloch model of
/// `protocol`, `(T, H, W, D)`.
pub(crate) fn bloch_images<T: Scalar>(maps: &ParametricMaps<T>, protocol: &SequenceProtocol) -> Result<Array4<Complex<T>>> {
    let shape = maps.shape();
    let n: usize = shape.iter().product();
    let frames = FrameConsts::<T>::for_protocol(protocol);
    let mut values = BTreeMap::new();
    for &kind in protocol.required_maps() {
        values.insert(kind, maps.require(kind)?.as_slice().expect("standard layout"));
    }
    let mut out = vec![Complex::new(T::zero(), T::zero()); frames.len() * n];
    for v in 0..n {
        let p = voxel(&values, v);
        for (t, f) in frames.iter().enumerate() {
            out[t * n + v] = f.signal(&p);
        }
    }
    Ok(Array4::from_shape_vec((frames.len(), shape[0], shape[1], shape[2]), out).expect("layout"))
}

pub(crate) fn pmr_forward<T: Scalar>(
    state: &PmrState<T>,
    coords: &[Coord<T>],
    shape: [usize; 3],
    protocol: &SequenceProtocol,
) -> Result<PmrForward<T>> {
    check_grid(coords, shape)?;
    state.check_protocol(protocol)?;
    let mut maps = ParametricMaps::new(shape);
    for &kind in protocol.required_maps() {
        let out = state.fields[&kind].forward(coords)?;
        let values = out.column(0).mapv(|h| state.value(kind, h));
        maps.insert(kind, values.into_shape_with_order(shape).expect("grid size"))?;
    }
    let images = bloch_images(&maps, protocol)?;
    Ok(PmrForward { maps, images })
}

/// Parametric maps and their weighted images.
pub fn pmr_predict<T: Scalar>(
    state: &PmrState<T>,
    coords: &[Coord<T>],
    shape: [usize; 3],
    protocol: &SequenceProtocol,
) -> Result<(ParametricMaps<T>, WeightedImages<T>)> {
    let f = pmr_forward(state, coords, shape, protocol)?;
    Ok((f.maps, WeightedImages::new(f.images, protocol.clone())?))
}

/// Backward pass of the PMR block. `g_images` is the image gradient and
/// `g_maps` extra gradients on map values (from regularizers). Returns one
/// parameter gradient per field.
/// Loss gradients with respect to the head output of every map field, `(N, 1)`.
pub(crate) fn pmr_output_gradients<T: Scalar>(
    state: &PmrState<T>,
    forward: &PmrForward<T>,
    protocol: &SequenceProtocol,
    g_images: Option<&Array4<Complex<T>>>,
    g_maps: &BTreeMap<MapKind, Array3<f64>>,
) -> Result<BTreeMap<MapKind, Array2<T>>> {
    let kinds = protocol.required_maps();
    let n = forward.images.len() / forward.images.len_of(ndarray::Axis(0));
    let mut g_values: BTreeMap<MapKind, Vec<T>> = kinds.iter().map(|&k| (k, vec![T::zero(); n])).collect();
    if let Some(g) = g_images {
        let gs = g.as_slice().expect("standard layout");
        let frames = FrameConsts::<T>::for_protocol(protocol);
        let mut values = BTreeMap::new();
        for &kind in kinds {
            values.insert(kind, forward.maps.require(kind)?.as_slice().expect("standard layout"));
        }
        let idx: Vec<usize> = kinds.iter().map(|&k| k as usize).collect();
        for v in 0..n {
            let p = voxel(&values, v);
            let mut acc = [T::zero(); 7];
            for (t, f) in frames.iter().enumerate() {
                let gt = gs[t * n + v];
                if gt.re == T::zero() && gt.im == T::zero() {
                    continue;
                }
                let (_, ds) = f.signal_and_gradient(&p);
                for &j in &idx {
                    acc[j] += gt.re * ds[j].re + gt.im * ds[j].im;
                }
            }
            for &kind in kinds {
                g_values.get_mut(&kind).unwrap()[v] += acc[kind as usize];
            }
        }
    }
    for (kind, g) in g_maps {
        if let Some(dst) = g_values.get_mut(kind) {
            for (d, &x) in dst.iter_mut().zip(g.iter()) {
                *d += T::lit(x);
            }
        }
    }
    let mut out = BTreeMap::new();
    for &kind in kinds {
        let values = forward.maps.require(kind)?.as_slice().expect("standard layout");
        out.insert(kind, Array2::from_shape_fn((n, 1), |(v, _)| g_values[&kind][v] * state.slope(kind, values[v])));
    }
    Ok(out)
}

/// Outputs of the LRR block kept for its backward pass.
pub(crate) struct LrrForward<T: Scalar> {
    pub u: Array4<Complex<T>>,
    pub coils: CoilMaps<T>,
    pub raw_coils: Array4<Complex<T>>,
    pub refiner_tape: RefinerTape<T>,
}

pub(crate) fn lrr_forward<T: Scalar>(state: &LrrState<T>, coords: &[Coord<T>], shape: [usize; 3]) -> Result<LrrForward<T>> {
    check_grid(coords, shape)?;
    let raw = state.basis_field.forward(coords)?;
    let (u, refiner_tape) = state.refiner.forward_taped(&columns_to_volumes(&raw, shape))?;
    let raw_c = state.coil_field.forward(coords)?;
    let raw_coils = columns_to_volumes(&raw_c, shape);
    let coils = normalize_coils(&raw_coils);
    Ok(LrrForward {
        u,
        coils,
        raw_coils,
        refiner_tape,
    })
}

/// Loss gradients with respect to the raw outputs of the LRR fields, plus the
/// refiner's parameter gradient.
pub(crate) struct LrrOutputGrads<T> {
    pub refiner: Vec<T>,
    pub basis: Array2<T>,
    pub coil: Array2<T>,
}

pub(crate) fn lrr_output_gradients<T: Scalar>(
    state: &LrrState<T>,
    forward: &LrrForward<T>,
    g_u: &Array4<Complex<T>>,
    g_coils: &Array4<Complex<T>>,
) -> Result<LrrOutputGrads<T>> {
    let mut refiner = vec![T::zero(); state.refiner.n_params()];
    let g_raw = state.refiner.backward(&forward.refiner_tape, g_u, &mut refiner)?;
    Ok(LrrOutputGrads {
        refiner,
        basis: volumes_to_columns(&g_raw),
        coil: volumes_to_columns(&normalize_coils_backward(&forward.raw_coils, g_coils)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural_fields::coordinate_grid;
    use crate::phantom::make_phantom;
    use crate::signal::simulate_weighted;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn coil_normalization_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut rand_c = || Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let raw = Array4::from_shape_simple_fn((3, 2, 2, 1), &mut rand_c);
        let w = Array4::from_shape_simple_fn((3, 2, 2, 1), &mut rand_c);
        let loss = |r: &Array4<Complex<f64>>| -> f64 {
            normalize_coils(r).maps.iter().zip(w.iter()).map(|(a, b)| a.re * b.re + a.im * b.im).sum()
        };
        let g = normalize_coils_backward(&raw, &w);
        for (idx, _) in raw.indexed_iter() {
            for im in [false, true] {
                let d = if im { Complex::new(0.0, 1e-6) } else { Complex::new(1e-6, 0.0) };
                let mut hi = raw.clone();
                hi[idx] += d;
                let mut lo = raw.clone();
                lo[idx] -= d;
                let fd = (loss(&hi) - loss(&lo)) / 2e-6;
                let an = if im { g[idx].im } else { g[idx].re };
                assert!((fd - an).abs() < 1e-6 * an.abs().max(1.0), "{idx:?} {im}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn lrr_shapes_and_zero_fields() {
        let shape = [8, 8, 4];
        let coords = coordinate_grid::<f64>(shape).unwrap();
        let mut state = LrrState::<f64>::new(shape, 3, 2, 1).unwrap();
        let (u, c) = lrr_predict(&state, &coords, shape).unwrap();
        assert_eq!(u.u.shape(), &[3, 8, 8, 4]);
        assert_eq!(c.maps.shape(), &[2, 8, 8, 4]);
        let (u2, _) = lrr_predict(&state, &coords, shape).unwrap();
        assert_eq!(u, u2);
        state.basis_field.params_mut().iter_mut().for_each(|p| *p = 0.0);
        state.coil_field.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let (u, c) = lrr_predict(&state, &coords, shape).unwrap();
        assert!(u.u.iter().all(|z| z.norm() == 0.0));
        assert!(c.maps.iter().all(|z| z.norm() == 0.0));
        assert!(lrr_predict(&state, &coords[1..], shape).is_err());
    }

    #[test]
    fn constant_fields_give_constant_maps() {
        let shape = [8, 8, 4];
        let p = SequenceProtocol::t2ir_gre_default(20);
        let coords = coordinate_grid::<f64>(shape).unwrap();
        let mut state = PmrState::<f64>::new(shape, &p, 1.0, 3).unwrap();
        for field in state.fields.values_mut() {
            // keep only the output bias
            let r = field.output_layer_range(0);
            let bias = r.end - 1;
            field.params_mut()[..bias].iter_mut().for_each(|x| *x = 0.0);
            field.params_mut()[bias] = 0.1;
        }
        let (maps, iw) = pmr_predict(&state, &coords, shape, &p).unwrap();
        assert_eq!(iw.n_frames(), p.n_frames());
        for (_, m) in maps.iter() {
            let first = m[[0, 0, 0]];
            assert!(m.iter().all(|&v| v == first));
        }
        assert!((maps.require(MapKind::T1).unwrap()[[0, 0, 0]] - 1000.0 * 0.1f64.exp()).abs() < 1e-9);
        let mut missing = state.clone();
        missing.fields.remove(&MapKind::T2);
        assert!(pmr_predict(&missing, &coords, shape, &p).is_err());
    }

    #[test]
    fn bloch_images_match_simulation_inside_mask() {
        for p in [SequenceProtocol::vfa_megre_default(), SequenceProtocol::t2ir_gre_default(20)] {
            let gt = make_phantom::<f64>([16, 16, 8], 4).unwrap();
            let sim = simulate_weighted(&gt, &p).unwrap();
            let ours = bloch_images(&gt.maps, &p).unwrap();
            for t in 0..p.n_frames() {
                for ((i, j, k), &inside) in gt.brain_mask.indexed_iter() {
                    if inside {
                        assert!((ours[[t, i, j, k]] - sim.data[[t, i, j, k]]).norm() < 1e-6);
                    }
                }
            }
        }
    }
}

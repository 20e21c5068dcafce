//! Digital brain-like phantoms and simulated receive-coil sensitivities.

use ndarray::{Array3, Array4, Axis};
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::maps::{MapKind, ParametricMaps};
use crate::scalar::Scalar;

/// Region label stored in [`GroundTruth::region_labels`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Region {
    Background = 0,
    WhiteMatter = 1,
    GrayMatter = 2,
    Csf = 3,
    Lesion = 4,
}

/// Tissue constants for one region. Relaxation times in ms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tissue {
    pub t1: f64,
    pub t2: f64,
    pub t2s: f64,
    pub a: f64,
}

pub const WHITE_MATTER: Tissue = Tissue { t1: 850.0, t2: 70.0, t2s: 50.0, a: 0.8 };
pub const GRAY_MATTER: Tissue = Tissue { t1: 1300.0, t2: 90.0, t2s: 60.0, a: 0.9 };
pub const CSF: Tissue = Tissue { t1: 3800.0, t2: 1500.0, t2s: 800.0, a: 1.0 };
pub const LESION: Tissue = Tissue { t1: 1100.0, t2: 120.0, t2s: 35.0, a: 0.85 };
/// Inversion efficiency used for every in-brain voxel.
pub const INVERSION_EFFICIENCY: f64 = 0.95;

impl Region {
    pub fn tissue(self) -> Option<Tissue> {
        match self {
            Region::Background => None,
            Region::WhiteMatter => Some(WHITE_MATTER),
            Region::GrayMatter => Some(GRAY_MATTER),
            Region::Csf => Some(CSF),
            Region::Lesion => Some(LESION),
        }
    }
}

/// Smooth phase model amplitudes. The off-resonance bound keeps the phase
/// accrued at the last echo of the default protocols below pi.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhantomOptions {
    pub freq_max_hz: f64,
    pub phi0_max_rad: f64,
}

impl Default for PhantomOptions {
    fn default() -> Self {
        Self {
            freq_max_hz: 4.0,
            phi0_max_rad: 0.5,
        }
    }
}

/// Ground-truth tissue maps used for simulation.
#[derive(Clone, Debug)]
pub struct GroundTruth<T: Scalar> {
    /// Contains every [`MapKind`].
    pub maps: ParametricMaps<T>,
    pub brain_mask: Array3<bool>,
    pub region_labels: Array3<u8>,
}

impl<T: Scalar> GroundTruth<T> {
    pub fn shape(&self) -> [usize; 3] {
        self.maps.shape()
    }

    pub fn map(&self, kind: MapKind) -> &Array3<T> {
        self.maps.get(kind).expect("ground truth holds every map kind")
    }
}

/// Complex receive sensitivities, stored coil-major as `(C, H, W, D)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoilMaps<T: Scalar> {
    pub maps: Array4<Complex<T>>,
}

impl<T: Scalar> CoilMaps<T> {
    pub fn n_coils(&self) -> usize {
        self.maps.len_of(Axis(0))
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.maps.shape();
        [s[1], s[2], s[3]]
    }

    /// Identity sensitivity (one coil, all ones).
    pub fn unit(shape: [usize; 3]) -> Self {
        Self {
            maps: Array4::from_elem((1, shape[0], shape[1], shape[2]), Complex::new(T::one(), T::zero())),
        }
    }

    pub fn coil(&self, c: usize) -> &[Complex<T>] {
        let n: usize = self.shape().iter().product();
        &self.maps.as_slice().expect("standard layout")[c * n..(c + 1) * n]
    }
}

fn check_shape(shape: [usize; 3]) -> Result<()> {
    if let Some(axis) = shape.iter().position(|&n| n < 8) {
        return Err(Error::Dimension(format!(
            "phantom axis {axis} has {} voxels; every axis needs at least 8",
            shape[axis]
        )));
    }
    Ok(())
}

/// Cell-centred coordinates in (-1, 1).
fn centred(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64 * 2.0 - 1.0
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|i| ((p[i] - self.center[i]) / self.radii[i]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

/// Smooth scalar field over the normalized volume, drawn from `rng`.
struct SmoothField {
    coeffs: [f64; 6],
    bump: [f64; 2],
}

impl SmoothField {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let mut coeffs = [0.0; 6];
        for c in &mut coeffs {
            *c = rng.random_range(-1.0..1.0);
        }
        Self {
            coeffs,
            bump: [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)],
        }
    }

    fn eval(&self, [u, v, w]: [f64; 3]) -> f64 {
        let c = &self.coeffs;
        let bump = (-((u - self.bump[0]).powi(2) + (v - self.bump[1]).powi(2)) / 0.15).exp();
        c[0] * u + c[1] * v + c[2] * 0.5 * w + c[3] * (u * u - v * v) + c[4] * u * v + c[5] * bump
    }
}

pub fn make_phantom<T: Scalar>(shape: [usize; 3], seed: u64) -> Result<GroundTruth<T>> {
    make_phantom_with(shape, seed, &PhantomOptions::default())
}

/// Builds a piecewise-constant ellipsoidal head phantom. Deterministic in `seed`.
pub fn make_phantom_with<T: Scalar>(
    shape: [usize; 3],
    seed: u64,
    opts: &PhantomOptions,
) -> Result<GroundTruth<T>> {
    check_shape(shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = |scale: f64| 1.0 + rng.random_range(-scale..scale);

    let brain = Ellipsoid {
        center: [0.0, 0.0, 0.0],
        radii: [0.78 * jitter(0.03), 0.9 * jitter(0.03), 1.25],
    };
    let white = Ellipsoid {
        center: [0.0, 0.02, 0.0],
        radii: [0.6 * jitter(0.04), 0.72 * jitter(0.04), 1.25],
    };
    let ventricles = [
        Ellipsoid {
            center: [-0.16, 0.02, 0.0],
            radii: [0.1 * jitter(0.1), 0.3 * jitter(0.1), 0.9],
        },
        Ellipsoid {
            center: [0.16, 0.02, 0.0],
            radii: [0.1 * jitter(0.1), 0.3 * jitter(0.1), 0.9],
        },
    ];
    let lesions: Vec<Ellipsoid> = (0..2)
        .map(|i| {
            let side = if i == 0 { -1.0 } else { 1.0 };
            let r = rng.random_range(0.08..0.12);
            Ellipsoid {
                center: [
                    side * rng.random_range(0.32..0.42),
                    rng.random_range(-0.4..0.4),
                    rng.random_range(-0.3..0.3),
                ],
                radii: [r, r, 3.0 * r],
            }
        })
        .collect();
    let freq_field = SmoothField::draw(&mut rng);
    let phase_field = SmoothField::draw(&mut rng);

    let [h, w, d] = shape;
    let mut labels = Array3::<u8>::zeros(shape);
    for ((i, j, k), label) in labels.indexed_iter_mut() {
        let p = [centred(i, h), centred(j, w), centred(k, d)];
        let region = if !brain.contains(p) {
            Region::Background
        } else if ventricles.iter().any(|e| e.contains(p)) {
            Region::Csf
        } else if lesions.iter().any(|e| e.contains(p)) {
            Region::Lesion
        } else if white.contains(p) {
            Region::WhiteMatter
        } else {
            Region::GrayMatter
        };
        *label = region as u8;
    }
    let mask = labels.mapv(|l| l != Region::Background as u8);

    let peak = |field: &SmoothField| {
        labels
            .indexed_iter()
            .filter(|(_, &l)| l != 0)
            .map(|((i, j, k), _)| field.eval([centred(i, h), centred(j, w), centred(k, d)]).abs())
            .fold(0.0f64, f64::max)
            .max(1e-12)
    };
    let freq_scale = opts.freq_max_hz / peak(&freq_field);
    let phase_scale = opts.phi0_max_rad / peak(&phase_field);

    let mut maps: Vec<(MapKind, Array3<T>)> =
        MapKind::ALL.iter().map(|&k| (k, Array3::<T>::zeros(shape))).collect();
    for ((i, j, k), &label) in labels.indexed_iter() {
        let region = match label {
            1 => Region::WhiteMatter,
            2 => Region::GrayMatter,
            3 => Region::Csf,
            4 => Region::Lesion,
            _ => continue,
        };
        let tissue = region.tissue().expect("in-brain region");
        let p = [centred(i, h), centred(j, w), centred(k, d)];
        for (kind, map) in maps.iter_mut() {
            let value = match kind {
                MapKind::A => tissue.a,
                MapKind::B => INVERSION_EFFICIENCY,
                MapKind::T1 => tissue.t1,
                MapKind::T2 => tissue.t2,
                MapKind::T2s => tissue.t2s,
                MapKind::Phi0 => phase_scale * phase_field.eval(p),
                MapKind::Freq => freq_scale * freq_field.eval(p),
            };
            map[[i, j, k]] = T::lit(value);
        }
    }

    let mut out = ParametricMaps::new(shape);
    for (kind, map) in maps {
        out.insert(kind, map)?;
    }
    Ok(GroundTruth {
        maps: out,
        brain_mask: mask,
        region_labels: labels,
    })
}

/// Scales a voxel's coil values to unit root-sum-of-squares and rotates them so
/// that their sum is real and non-negative. All-zero input stays zero.
pub fn normalize_coil_voxel<T: Scalar>(values: &mut [Complex<T>]) {
    let rss = values.iter().map(|z| z.norm_sqr()).sum::<T>().sqrt();
    if rss <= T::zero() {
        return;
    }
    let sum: Complex<T> = values.iter().fold(Complex::new(T::zero(), T::zero()), |a, b| a + b);
    let sum_abs = sum.norm();
    let rot = if sum_abs > T::zero() {
        sum.conj() / sum_abs
    } else {
        Complex::new(T::one(), T::zero())
    };
    let f = rot / rss;
    for z in values.iter_mut() {
        *z = *z * f;
    }
}

/// Smooth Gaussian-bump sensitivities on a ring around the volume, low-pass
/// filtered, then normalized per voxel with [`normalize_coil_voxel`].
pub fn make_coil_maps<T: Scalar>(shape: [usize; 3], n_coils: usize, seed: u64) -> Result<CoilMaps<T>> {
    if n_coils < 1 {
        return Err(Error::InvalidParameter("n_coils must be at least 1".into()));
    }
    if shape.iter().any(|&n| n == 0) {
        return Err(Error::Dimension(format!("empty coil grid {shape:?}")));
    }
    if n_coils == 1 {
        return Ok(CoilMaps::unit(shape));
    }
    let [h, w, d] = shape;
    let n = h * w * d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC011_5EED);
    let offset = rng.random_range(0.0..std::f64::consts::TAU / n_coils as f64);
    let width = 0.85;
    let mut raw = vec![Complex::<f64>::new(0.0, 0.0); n_coils * n];
    for c in 0..n_coils {
        let theta = std::f64::consts::TAU * c as f64 / n_coils as f64 + offset;
        let (cx, cy) = (1.4 * theta.cos(), 1.4 * theta.sin());
        let psi = rng.random_range(-0.3..0.3);
        let ramp = rng.random_range(0.2..0.4);
        let coil = &mut raw[c * n..(c + 1) * n];
        for i in 0..h {
            for j in 0..w {
                for k in 0..d {
                    let (u, v, z) = (centred(i, h), centred(j, w), centred(k, d));
                    let dist2 = (u - cx).powi(2) + (v - cy).powi(2) + 0.1 * z * z;
                    let mag = (-dist2 / (2.0 * width * width)).exp();
                    let phase = psi + ramp * (u * theta.cos() + v * theta.sin()) + 0.05 * z;
                    coil[(i * w + j) * d + k] = Complex::from_polar(mag, phase);
                }
            }
        }
        smooth_volume(coil, shape, 1.0);
    }
    let mut voxel = vec![Complex::new(0.0, 0.0); n_coils];
    for v in 0..n {
        for c in 0..n_coils {
            voxel[c] = raw[c * n + v];
        }
        normalize_coil_voxel(&mut voxel);
        for c in 0..n_coils {
            raw[c * n + v] = voxel[c];
        }
    }
    let maps = Array4::from_shape_vec(
        (n_coils, h, w, d),
        raw.into_iter().map(|z| Complex::new(T::lit(z.re), T::lit(z.im))).collect(),
    )
    .expect("coil buffer matches shape");
    Ok(CoilMaps { maps })
}

/// Separable Gaussian blur with replicated edges.
fn smooth_volume(data: &mut [Complex<f64>], shape: [usize; 3], sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|k| k / norm).collect();
    let [h, w, d] = shape;
    let strides = [w * d, d, 1];
    let mut buf = data.to_vec();
    for axis in 0..3 {
        let len = shape[axis] as isize;
        let stride = strides[axis];
        for i in 0..h {
            for j in 0..w {
                for k in 0..d {
                    let idx = (i * w + j) * d + k;
                    let pos = [i, j, k][axis] as isize;
                    let base = idx - pos as usize * stride;
                    let mut acc = Complex::new(0.0, 0.0);
                    for (t, &kv) in kernel.iter().enumerate() {
                        let q = (pos + t as isize - radius).clamp(0, len - 1) as usize;
                        acc += data[base + q * stride] * kv;
                    }
                    buf[idx] = acc;
                }
            }
        }
        data.copy_from_slice(&buf);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantom_is_deterministic_and_shaped() {
        let a = make_phantom::<f64>([64, 64, 8], 7).unwrap();
        let b = make_phantom::<f64>([64, 64, 8], 7).unwrap();
        assert_eq!(a.shape(), [64, 64, 8]);
        for kind in MapKind::ALL {
            assert_eq!(a.map(kind).shape(), &[64, 64, 8]);
            let bits_a: Vec<u64> = a.map(kind).iter().map(|x| x.to_bits()).collect();
            let bits_b: Vec<u64> = b.map(kind).iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(a.region_labels, b.region_labels);
    }

    #[test]
    fn tissue_table_and_background() {
        let gt = make_phantom::<f64>([64, 64, 8], 7).unwrap();
        let mut seen = [false; 5];
        for ((i, j, k), &label) in gt.region_labels.indexed_iter() {
            seen[label as usize] = true;
            let at = |kind| gt.map(kind)[[i, j, k]];
            if label == Region::WhiteMatter as u8 {
                assert_eq!(
                    (at(MapKind::T1), at(MapKind::T2), at(MapKind::T2s), at(MapKind::A), at(MapKind::B)),
                    (850.0, 70.0, 50.0, 0.8, 0.95)
                );
            }
            if !gt.brain_mask[[i, j, k]] {
                for kind in MapKind::ALL {
                    assert_eq!(at(kind), 0.0);
                }
            } else {
                assert!(at(MapKind::T1) > at(MapKind::T2));
                assert!(at(MapKind::T2) >= at(MapKind::T2s));
                assert!(at(MapKind::T2s) > 0.0);
                assert!(at(MapKind::Freq).abs() <= 40.0);
            }
            let b = at(MapKind::B);
            assert!((0.0..=1.0).contains(&b));
        }
        assert!(seen.iter().all(|&s| s), "every region present: {seen:?}");
    }

    #[test]
    fn small_shapes_rejected() {
        assert!(matches!(make_phantom::<f64>([64, 7, 8], 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn single_coil_is_identity() {
        let c = make_coil_maps::<f64>([16, 16, 8], 1, 3).unwrap();
        assert!(c.maps.iter().all(|z| *z == Complex::new(1.0, 0.0)));
        assert!(make_coil_maps::<f64>([16, 16, 8], 0, 3).is_err());
    }

    #[test]
    fn coil_maps_normalized_and_smooth() {
        let shape = [64, 64, 8];
        let gt = make_phantom::<f64>(shape, 7).unwrap();
        let coils = make_coil_maps::<f64>(shape, 8, 7).unwrap();
        for ((i, j, k), &inside) in gt.brain_mask.indexed_iter() {
            if inside {
                let rss: f64 = (0..8).map(|c| coils.maps[[c, i, j, k]].norm_sqr()).sum::<f64>().sqrt();
                assert!((rss - 1.0).abs() < 1e-6);
            }
        }
        let mut max_diff = 0.0f64;
        for c in 0..8 {
            for ((i, j, k), z) in coils.maps.index_axis(Axis(0), c).indexed_iter() {
                for (di, dj, dk) in [(1, 0, 0), (0, 1, 0), (0, 0, 1)] {
                    if i + di < 64 && j + dj < 64 && k + dk < 8 {
                        let other = coils.maps[[c, i + di, j + dj, k + dk]];
                        max_diff = max_diff.max((z - other).norm());
                    }
                }
            }
        }
        assert!(max_diff < 0.15, "max adjacent difference {max_diff}");
    }
}

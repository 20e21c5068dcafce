//! Forward measurement model `S = M F C I`, its adjoint, sampling masks,
//! noise injection and the unified acceleration factor.

use std::sync::Arc;

use ndarray::{Array2, Array4, Array5};
use num_complex::Complex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::Fft3;
use crate::phantom::CoilMaps;
use crate::scalar::Scalar;
use crate::signal::{SequenceProtocol, WeightedImages};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MaskPattern {
    Full,
    UniformRandom,
    VariableDensity,
    ComplementaryShift,
}

/// Which k-space points a mask selects independently.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskGeometry {
    /// Phase-encode lines in (kx, ky), fully sampled along kz.
    #[default]
    InPlane,
    /// Individual (kx, ky, kz) points.
    Full3d,
}

/// Binary sampling pattern over `(T, H, W, D)` plus its sampled indices.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMask {
    pub mask: Array4<bool>,
    pub pattern: MaskPattern,
    pub seed: u64,
    pub calib_region: [usize; 3],
    sampled: Vec<Vec<u32>>,
}

impl SamplingMask {
    /// Builds a mask from an explicit boolean volume `(T, H, W, D)`.
    pub fn from_mask(mask: Array4<bool>, pattern: MaskPattern, seed: u64, calib_region: [usize; 3]) -> Result<Self> {
        let s = mask.shape();
        let n = s[1] * s[2] * s[3];
        let flat = mask.as_standard_layout();
        let flat = flat.as_slice().expect("standard layout");
        let sampled: Vec<Vec<u32>> = (0..s[0])
            .map(|t| {
                flat[t * n..(t + 1) * n]
                    .iter()
                    .enumerate()
                    .filter(|(_, &m)| m)
                    .map(|(i, _)| i as u32)
                    .collect()
            })
            .collect();
        if let Some(t) = sampled.iter().position(|f| f.is_empty()) {
            return Err(Error::InvalidParameter(format!("frame {t} samples no k-space point")));
        }
        Ok(Self {
            mask: mask.as_standard_layout().into_owned(),
            pattern,
            seed,
            calib_region,
            sampled,
        })
    }

    pub fn full(shape: [usize; 3], n_frames: usize) -> Self {
        Self::from_mask(
            Array4::from_elem((n_frames, shape[0], shape[1], shape[2]), true),
            MaskPattern::Full,
            0,
            [0, 0, 0],
        )
        .expect("full mask samples every frame")
    }

    pub fn n_frames(&self) -> usize {
        self.sampled.len()
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.mask.shape();
        [s[1], s[2], s[3]]
    }

    /// Flat `(H, W, D)` indices sampled in frame `t`, ascending.
    pub fn sampled(&self, t: usize) -> &[u32] {
        &self.sampled[t]
    }

    pub fn n_sampled(&self) -> usize {
        self.sampled.iter().map(Vec::len).sum()
    }

    pub fn n_total(&self) -> usize {
        self.mask.len()
    }
}

/// Ratio of all k-space points over all frames to the sampled ones.
pub fn acceleration_factor(mask: &SamplingMask) -> Result<f64> {
    let sampled = mask.n_sampled();
    if sampled == 0 || mask.n_total() == 0 {
        return Err(Error::InvalidParameter("mask samples no points".into()));
    }
    Ok(mask.n_total() as f64 / sampled as f64)
}

pub fn make_mask(
    shape: [usize; 4],
    pattern: MaskPattern,
    target_r: f64,
    calib_region: [usize; 3],
    seed: u64,
) -> Result<SamplingMask> {
    make_mask_with(shape, pattern, target_r, calib_region, seed, MaskGeometry::InPlane)
}

/// Generates a mask of shape `(H, W, D, T)` with the same number of sampled
/// points in every frame, chosen so that the overall factor is `target_r`.
pub fn make_mask_with(
    shape: [usize; 4],
    pattern: MaskPattern,
    target_r: f64,
    calib_region: [usize; 3],
    seed: u64,
    geometry: MaskGeometry,
) -> Result<SamplingMask> {
    let [h, w, d, n_frames] = shape;
    if shape.iter().any(|&n| n == 0) {
        return Err(Error::Dimension(format!("empty mask shape {shape:?}")));
    }
    if !(target_r >= 1.0) {
        return Err(Error::InvalidParameter(format!("acceleration must be >= 1, got {target_r}")));
    }
    // candidate units: in-plane lines (kz collapsed) or single points
    let depth = if geometry == MaskGeometry::InPlane { 1 } else { d };
    let units = h * w * depth;
    let per_frame = ((units as f64 / target_r).round() as usize).max(1);
    if target_r > units as f64 {
        return Err(Error::InvalidParameter(format!(
            "acceleration {target_r} exceeds the {units} points available per frame"
        )));
    }
    let unit_index = |i: usize, j: usize, k: usize| (i * w + j) * depth + k;
    let center = |n: usize| n / 2;
    let mut calib = Vec::new();
    if calib_region.iter().all(|&c| c > 0) {
        let span = |c: usize, n: usize| {
            let c = c.min(n);
            let lo = center(n).saturating_sub(c / 2);
            lo..(lo + c).min(n)
        };
        let cz = if depth == 1 { 0..1 } else { span(calib_region[2], d) };
        for i in span(calib_region[0], h) {
            for j in span(calib_region[1], w) {
                for k in cz.clone() {
                    calib.push(unit_index(i, j, k));
                }
            }
        }
    }
    let mut is_calib = vec![false; units];
    for &u in &calib {
        is_calib[u] = true;
    }
    let free: Vec<usize> = (0..units).filter(|&u| !is_calib[u]).collect();
    let extra = per_frame.saturating_sub(calib.len()).min(free.len());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<Vec<usize>> = Vec::with_capacity(n_frames);
    match pattern {
        MaskPattern::Full => {
            chosen = vec![(0..units).collect(); n_frames];
        }
        MaskPattern::UniformRandom => {
            for _ in 0..n_frames {
                let mut pool = free.clone();
                pool.shuffle(&mut rng);
                pool.truncate(extra);
                chosen.push(pool);
            }
        }
        MaskPattern::VariableDensity => {
            let sigma = 0.2 * h.max(w) as f64;
            let weight = |u: usize| {
                let (i, j) = ((u / depth) / w, (u / depth) % w);
                let k = u % depth;
                let ki = i as f64 - center(h) as f64;
                let kj = j as f64 - center(w) as f64;
                let kk = if depth == 1 { 0.0 } else { (k as f64 - center(d) as f64) * h.max(w) as f64 / d as f64 };
                (-(ki * ki + kj * kj + kk * kk) / (2.0 * sigma * sigma)).exp().max(1e-300)
            };
            for _ in 0..n_frames {
                // weighted sampling without replacement via exponential keys
                let mut keyed: Vec<(f64, usize)> = free
                    .iter()
                    .map(|&u| {
                        let r: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                        (r.ln() / weight(u), u)
                    })
                    .collect();
                keyed.sort_by(|a, b| b.0.total_cmp(&a.0));
                chosen.push(keyed.into_iter().take(extra).map(|(_, u)| u).collect());
            }
        }
        MaskPattern::ComplementaryShift => {
            let mut order = free.clone();
            order.shuffle(&mut rng);
            for t in 0..n_frames {
                let offset = t * extra;
                chosen.push((0..extra).map(|j| order[(offset + j) % order.len().max(1)]).collect());
            }
        }
    }

    let mut mask = Array4::from_elem((n_frames, h, w, d), false);
    for (t, units_t) in chosen.iter().enumerate() {
        for &u in units_t.iter().chain(calib.iter()) {
            let (ij, k) = (u / depth, u % depth);
            let (i, j) = (ij / w, ij % w);
            if depth == 1 {
                for kz in 0..d {
                    mask[[t, i, j, kz]] = true;
                }
            } else {
                mask[[t, i, j, k]] = true;
            }
        }
    }
    SamplingMask::from_mask(mask, pattern, seed, calib_region)
}

/// Undersampled multi-coil k-space. Only sampled values are stored, ordered
/// coil-major, then frame, then ascending sample index.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceData<T: Scalar> {
    pub mask: Arc<SamplingMask>,
    pub protocol: SequenceProtocol,
    pub n_coils: usize,
    pub noise_sigma: f64,
    values: Vec<Complex<T>>,
    offsets: Vec<usize>,
}

impl<T: Scalar> KSpaceData<T> {
    pub fn zeros(mask: Arc<SamplingMask>, protocol: SequenceProtocol, n_coils: usize) -> Self {
        let mut offsets = Vec::with_capacity(mask.n_frames() + 1);
        offsets.push(0);
        for t in 0..mask.n_frames() {
            offsets.push(offsets[t] + mask.sampled(t).len());
        }
        let per_coil = offsets[mask.n_frames()];
        Self {
            mask,
            protocol,
            n_coils,
            noise_sigma: 0.0,
            values: vec![Complex::new(T::zero(), T::zero()); per_coil * n_coils],
            offsets,
        }
    }

    fn per_coil(&self) -> usize {
        *self.offsets.last().expect("offsets start with 0")
    }

    pub fn coil_frame(&self, c: usize, t: usize) -> &[Complex<T>] {
        let base = c * self.per_coil();
        &self.values[base + self.offsets[t]..base + self.offsets[t + 1]]
    }

    pub fn coil_frame_mut(&mut self, c: usize, t: usize) -> &mut [Complex<T>] {
        let base = c * self.per_coil();
        let (lo, hi) = (self.offsets[t], self.offsets[t + 1]);
        &mut self.values[base + lo..base + hi]
    }

    pub fn values(&self) -> &[Complex<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.values
    }

    pub fn norm_sqr(&self) -> T {
        self.values.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn max_abs(&self) -> T {
        self.values.iter().map(|z| z.norm()).fold(T::zero(), T::max)
    }

    pub fn scaled(&self, factor: T) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|z| *z = z.scale(factor));
        out
    }

    /// Dense `(C, T, H, W, D)` array, zero at unsampled locations.
    pub fn to_dense(&self) -> Array5<Complex<T>> {
        let [h, w, d] = self.mask.shape();
        let n = h * w * d;
        let frames = self.mask.n_frames();
        let mut dense = vec![Complex::new(T::zero(), T::zero()); self.n_coils * frames * n];
        for c in 0..self.n_coils {
            for t in 0..frames {
                let base = (c * frames + t) * n;
                for (&idx, &v) in self.mask.sampled(t).iter().zip(self.coil_frame(c, t)) {
                    dense[base + idx as usize] = v;
                }
            }
        }
        Array5::from_shape_vec((self.n_coils, frames, h, w, d), dense).expect("dense layout")
    }

    /// Gathers sampled values from a dense `(C, T, H, W, D)` array.
    pub fn from_dense(
        dense: &Array5<Complex<T>>,
        mask: Arc<SamplingMask>,
        protocol: SequenceProtocol,
        noise_sigma: f64,
    ) -> Result<Self> {
        let s = dense.shape();
        let [h, w, d] = mask.shape();
        for (axis, got, expected) in [("frame", s[1], mask.n_frames()), ("x", s[2], h), ("y", s[3], w), ("z", s[4], d)] {
            if got != expected {
                return Err(Error::ShapeMismatch { axis, expected, got });
            }
        }
        let mut ks = Self::zeros(mask, protocol, s[0]);
        ks.noise_sigma = noise_sigma;
        let dense = dense.as_standard_layout();
        let flat = dense.as_slice().expect("standard layout");
        let n = h * w * d;
        for c in 0..s[0] {
            for t in 0..s[1] {
                let base = (c * s[1] + t) * n;
                let idx: Vec<u32> = ks.mask.sampled(t).to_vec();
                for (v, i) in ks.coil_frame_mut(c, t).iter_mut().zip(idx) {
                    *v = flat[base + i as usize];
                }
            }
        }
        Ok(ks)
    }
}

fn check_axis(axis: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        Err(Error::ShapeMismatch { axis, expected, got })
    } else {
        Ok(())
    }
}

fn check_grid(expected: [usize; 3], got: [usize; 3]) -> Result<()> {
    check_axis("x", expected[0], got[0])?;
    check_axis("y", expected[1], got[1])?;
    check_axis("z", expected[2], got[2])
}

/// Fourier encoding with a fixed mask. Coil maps are passed per call because
/// reconstructions may update them.
pub struct EncodingOperator<'m, T: Scalar> {
    fft: Fft3<T>,
    mask: &'m Arc<SamplingMask>,
}

impl<'m, T: Scalar> EncodingOperator<'m, T> {
    pub fn new(mask: &'m Arc<SamplingMask>) -> Self {
        Self {
            fft: Fft3::new(mask.shape()),
            mask,
        }
    }

    pub fn mask(&self) -> &SamplingMask {
        self.mask
    }

    fn voxels(&self) -> usize {
        self.fft.len()
    }

    /// `M F C I` for a full image series `(T, H, W, D)`.
    pub fn forward_images(&self, images: &Array4<Complex<T>>, coils: &CoilMaps<T>, protocol: &SequenceProtocol) -> Result<KSpaceData<T>> {
        let s = images.shape();
        check_axis("frame", self.mask.n_frames(), s[0])?;
        check_grid(self.mask.shape(), [s[1], s[2], s[3]])?;
        check_grid(self.mask.shape(), coils.shape())?;
        let n = self.voxels();
        let images = images.as_slice().expect("standard layout");
        let mut ks = KSpaceData::zeros(self.mask.clone(), protocol.clone(), coils.n_coils());
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        for c in 0..coils.n_coils() {
            let sens = coils.coil(c);
            for t in 0..s[0] {
                let img = &images[t * n..(t + 1) * n];
                for ((b, &x), &cs) in buf.iter_mut().zip(img).zip(sens) {
                    *b = x * cs;
                }
                self.fft.forward(&mut buf);
                let idx = self.mask.sampled(t);
                for (v, &i) in ks.coil_frame_mut(c, t).iter_mut().zip(idx) {
                    *v = buf[i as usize];
                }
            }
        }
        Ok(ks)
    }

    /// Visits `F^H M^T y_{c,t}` for every coil and frame.
    fn backproject_frames(&self, ks: &KSpaceData<T>, mut visit: impl FnMut(usize, usize, &[Complex<T>])) {
        let n = self.voxels();
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        for c in 0..ks.n_coils {
            for t in 0..self.mask.n_frames() {
                buf.iter_mut().for_each(|b| *b = Complex::new(T::zero(), T::zero()));
                for (&i, &v) in self.mask.sampled(t).iter().zip(ks.coil_frame(c, t)) {
                    buf[i as usize] = v;
                }
                self.fft.inverse(&mut buf);
                visit(c, t, &buf);
            }
        }
    }

    /// `C^H F^H M^T y`, coil-combined, as `(T, H, W, D)`.
    pub fn adjoint_images(&self, ks: &KSpaceData<T>, coils: &CoilMaps<T>) -> Result<Array4<Complex<T>>> {
        self.check_data(ks, coils)?;
        let [h, w, d] = self.mask.shape();
        let n = self.voxels();
        let frames = self.mask.n_frames();
        let mut out = vec![Complex::new(T::zero(), T::zero()); frames * n];
        self.backproject_frames(ks, |c, t, img| {
            let sens = coils.coil(c);
            for ((o, &x), &cs) in out[t * n..(t + 1) * n].iter_mut().zip(img).zip(sens) {
                *o += x * cs.conj();
            }
        });
        Ok(Array4::from_shape_vec((frames, h, w, d), out).expect("frame layout"))
    }

    /// Gradients of `||y - M F C I||^2` with respect to the images and the
    /// coil maps, given the residual `r = y - M F C I`. Uses the convention
    /// `dL/dRe z + i dL/dIm z`.
    pub fn residual_gradients(
        &self,
        residual: &KSpaceData<T>,
        images: &Array4<Complex<T>>,
        coils: &CoilMaps<T>,
        want_coils: bool,
    ) -> Result<(Array4<Complex<T>>, Option<Array4<Complex<T>>>)> {
        self.check_data(residual, coils)?;
        let n = self.voxels();
        let [h, w, d] = self.mask.shape();
        let frames = self.mask.n_frames();
        let imgs = images.as_slice().expect("standard layout");
        let two = T::lit(-2.0);
        let mut g_img = vec![Complex::new(T::zero(), T::zero()); frames * n];
        let mut g_coil = vec![Complex::new(T::zero(), T::zero()); if want_coils { coils.n_coils() * n } else { 0 }];
        self.backproject_frames(residual, |c, t, back| {
            let sens = coils.coil(c);
            for ((o, &x), &cs) in g_img[t * n..(t + 1) * n].iter_mut().zip(back).zip(sens) {
                *o += (x * cs.conj()).scale(two);
            }
            if want_coils {
                let img = &imgs[t * n..(t + 1) * n];
                for ((o, &x), &im) in g_coil[c * n..(c + 1) * n].iter_mut().zip(back).zip(img) {
                    *o += (x * im.conj()).scale(two);
                }
            }
        });
        let g_img = Array4::from_shape_vec((frames, h, w, d), g_img).expect("layout");
        let g_coil = want_coils.then(|| Array4::from_shape_vec((coils.n_coils(), h, w, d), g_coil).expect("layout"));
        Ok((g_img, g_coil))
    }

    fn check_data(&self, ks: &KSpaceData<T>, coils: &CoilMaps<T>) -> Result<()> {
        check_axis("coil", ks.n_coils, coils.n_coils())?;
        check_grid(self.mask.shape(), coils.shape())?;
        check_grid(self.mask.shape(), ks.mask.shape())?;
        check_axis("frame", self.mask.n_frames(), ks.mask.n_frames())
    }

    /// `M F C (Phi^T U)` for spatial bases `(K, H, W, D)` and a real temporal
    /// basis `(K, T)`, using `K` transforms per coil instead of `T`.
    pub fn forward_subspace(
        &self,
        bases: &Array4<Complex<T>>,
        phi: &Array2<T>,
        coils: &CoilMaps<T>,
        protocol: &SequenceProtocol,
    ) -> Result<KSpaceData<T>> {
        let s = bases.shape();
        let rank = s[0];
        check_axis("rank", phi.nrows(), rank)?;
        check_axis("frame", self.mask.n_frames(), phi.ncols())?;
        check_grid(self.mask.shape(), [s[1], s[2], s[3]])?;
        check_grid(self.mask.shape(), coils.shape())?;
        let n = self.voxels();
        let u = bases.as_slice().expect("standard layout");
        let mut ks = KSpaceData::zeros(self.mask.clone(), protocol.clone(), coils.n_coils());
        let mut spectra = vec![Complex::new(T::zero(), T::zero()); rank * n];
        for c in 0..coils.n_coils() {
            let sens = coils.coil(c);
            for k in 0..rank {
                let dst = &mut spectra[k * n..(k + 1) * n];
                for ((b, &x), &cs) in dst.iter_mut().zip(&u[k * n..(k + 1) * n]).zip(sens) {
                    *b = x * cs;
                }
                self.fft.forward(dst);
            }
            for t in 0..self.mask.n_frames() {
                let idx = self.mask.sampled(t);
                let out = ks.coil_frame_mut(c, t);
                for k in 0..rank {
                    let p = phi[[k, t]];
                    let spec = &spectra[k * n..(k + 1) * n];
                    for (o, &i) in out.iter_mut().zip(idx) {
                        *o += spec[i as usize].scale(p);
                    }
                }
            }
        }
        Ok(ks)
    }

    /// Visits, per coil, the `K` volumes `F^H (sum_t phi[k, t] M_t^T y_{c,t})`.
    fn backproject_subspace(&self, ks: &KSpaceData<T>, phi: &Array2<T>, mut visit: impl FnMut(usize, &[Complex<T>])) {
        let n = self.voxels();
        let rank = phi.nrows();
        let mut spectra = vec![Complex::new(T::zero(), T::zero()); rank * n];
        for c in 0..ks.n_coils {
            spectra.iter_mut().for_each(|z| *z = Complex::new(T::zero(), T::zero()));
            for t in 0..self.mask.n_frames() {
                let idx = self.mask.sampled(t);
                let vals = ks.coil_frame(c, t);
                for k in 0..rank {
                    let p = phi[[k, t]];
                    let spec = &mut spectra[k * n..(k + 1) * n];
                    for (&i, &v) in idx.iter().zip(vals) {
                        spec[i as usize] += v.scale(p);
                    }
                }
            }
            for k in 0..rank {
                self.fft.inverse(&mut spectra[k * n..(k + 1) * n]);
            }
            visit(c, &spectra);
        }
    }

    /// Adjoint of [`Self::forward_subspace`]: spatial bases `(K, H, W, D)`.
    pub fn adjoint_subspace(&self, ks: &KSpaceData<T>, phi: &Array2<T>, coils: &CoilMaps<T>) -> Result<Array4<Complex<T>>> {
        self.check_data(ks, coils)?;
        check_axis("frame", self.mask.n_frames(), phi.ncols())?;
        let [h, w, d] = self.mask.shape();
        let n = self.voxels();
        let rank = phi.nrows();
        let mut out = vec![Complex::new(T::zero(), T::zero()); rank * n];
        self.backproject_subspace(ks, phi, |c, vols| {
            let sens = coils.coil(c);
            for k in 0..rank {
                for ((o, &x), &cs) in out[k * n..(k + 1) * n].iter_mut().zip(&vols[k * n..(k + 1) * n]).zip(sens) {
                    *o += x * cs.conj();
                }
            }
        });
        Ok(Array4::from_shape_vec((rank, h, w, d), out).expect("layout"))
    }

    /// Gradients of `||y - M F C (Phi^T U)||^2` with respect to `U` and the coil
    /// maps, given the residual.
    pub fn subspace_residual_gradients(
        &self,
        residual: &KSpaceData<T>,
        bases: &Array4<Complex<T>>,
        phi: &Array2<T>,
        coils: &CoilMaps<T>,
        want_coils: bool,
    ) -> Result<(Array4<Complex<T>>, Option<Array4<Complex<T>>>)> {
        self.check_data(residual, coils)?;
        let [h, w, d] = self.mask.shape();
        let n = self.voxels();
        let rank = phi.nrows();
        let u = bases.as_slice().expect("standard layout");
        let two = T::lit(-2.0);
        let mut g_u = vec![Complex::new(T::zero(), T::zero()); rank * n];
        let mut g_c = vec![Complex::new(T::zero(), T::zero()); if want_coils { coils.n_coils() * n } else { 0 }];
        self.backproject_subspace(residual, phi, |c, vols| {
            let sens = coils.coil(c);
            for k in 0..rank {
                let vol = &vols[k * n..(k + 1) * n];
                for ((o, &x), &cs) in g_u[k * n..(k + 1) * n].iter_mut().zip(vol).zip(sens) {
                    *o += (x * cs.conj()).scale(two);
                }
                if want_coils {
                    let uk = &u[k * n..(k + 1) * n];
                    for ((o, &x), &b) in g_c[c * n..(c + 1) * n].iter_mut().zip(vol).zip(uk) {
                        *o += (x * b.conj()).scale(two);
                    }
                }
            }
        });
        let g_u = Array4::from_shape_vec((rank, h, w, d), g_u).expect("layout");
        let g_c = want_coils.then(|| Array4::from_shape_vec((coils.n_coils(), h, w, d), g_c).expect("layout"));
        Ok((g_u, g_c))
    }
}

/// Simulated acquisition of `iw` through coils and mask.
pub fn forward<T: Scalar>(iw: &WeightedImages<T>, coils: &CoilMaps<T>, mask: &Arc<SamplingMask>) -> Result<KSpaceData<T>> {
    EncodingOperator::new(mask).forward_images(&iw.data, coils, &iw.protocol)
}

/// Coil-combined adjoint of [`forward`].
pub fn adjoint<T: Scalar>(ks: &KSpaceData<T>, coils: &CoilMaps<T>) -> Result<WeightedImages<T>> {
    let data = EncodingOperator::new(&ks.mask).adjoint_images(ks, coils)?;
    WeightedImages::new(data, ks.protocol.clone())
}

/// Adds i.i.d. complex Gaussian noise with standard deviation `sigma` per
/// real and imaginary component at sampled locations.
pub fn add_noise<T: Scalar>(ks: &KSpaceData<T>, sigma: f64, seed: u64) -> Result<KSpaceData<T>> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidParameter(format!("noise sigma must be >= 0, got {sigma}")));
    }
    let mut out = ks.clone();
    out.noise_sigma = (ks.noise_sigma.powi(2) + sigma * sigma).sqrt();
    if sigma == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in out.values.iter_mut() {
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        *v += Complex::new(T::lit(sigma * re), T::lit(sigma * im));
    }
    Ok(out)
}

/// Residual `a - b` of two k-space sets on the same mask.
pub fn kspace_difference<T: Scalar>(a: &KSpaceData<T>, b: &KSpaceData<T>) -> Result<KSpaceData<T>> {
    check_axis("coil", a.n_coils, b.n_coils)?;
    check_axis("sample", a.values.len(), b.values.len())?;
    let mut out = a.clone();
    for (o, &x) in out.values.iter_mut().zip(&b.values) {
        *o -= x;
    }
    Ok(out)
}

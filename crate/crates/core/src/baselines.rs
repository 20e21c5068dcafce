//! Classical reference reconstructions: zero-filled subspace images, an
//! ADMM solver with total-variation regularization on the spatial bases, and
//! voxelwise nonlinear least-squares fitting of the signal model.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array3, Array4, Array5};
use num_complex::Complex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{EncodingOperator, KSpaceData};
use crate::error::{Error, Result};
use crate::maps::{MapKind, ParametricMaps};
use crate::phantom::CoilMaps;
use crate::scalar::Scalar;
use crate::signal::{FrameConsts, SequenceKind, SequenceProtocol, TissueParams, WeightedImages};
use crate::subspace::{compose_weighted, SpatialBases, TemporalBasis};

/// Subspace-projected adjoint reconstruction.
pub fn recon_zero_filled<T: Scalar>(ks: &KSpaceData<T>, coils: &CoilMaps<T>, phi: &TemporalBasis<T>) -> Result<WeightedImages<T>> {
    let u = EncodingOperator::new(&ks.mask).adjoint_subspace(ks, &phi.phi, coils)?;
    compose_weighted(&SpatialBases { u }, phi, &ks.protocol)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdmmConfig {
    pub lambda_tv: f64,
    pub rho: f64,
    pub max_iters: usize,
    pub cg_iters: usize,
    /// Relative primal residual at which iterations stop.
    pub tol: f64,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            lambda_tv: 0.0,
            rho: 0.05,
            max_iters: 40,
            cg_iters: 10,
            tol: 1e-4,
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_tv >= 0.0) || !(self.rho > 0.0) || self.max_iters == 0 || !(self.tol > 0.0) {
            return Err(Error::Config(format!("invalid ADMM settings {self:?}")));
        }
        Ok(())
    }
}

/// Consecutive growing iterations that count as divergence.
const DIVERGENCE_RUN: usize = 10;

type C<T> = Complex<T>;

/// Forward differences along the three spatial axes with a zero difference at
/// the far boundary, `(3, K, H, W, D)`.
fn gradient<T: Scalar>(u: &Array4<C<T>>) -> Array5<C<T>> {
    let s = u.shape();
    let (k, h, w, d) = (s[0], s[1], s[2], s[3]);
    let mut g = Array5::from_elem((3, k, h, w, d), C::new(T::zero(), T::zero()));
    for b in 0..k {
        for i in 0..h {
            for j in 0..w {
                for l in 0..d {
                    let x = u[[b, i, j, l]];
                    if i + 1 < h {
                        g[[0, b, i, j, l]] = u[[b, i + 1, j, l]] - x;
                    }
                    if j + 1 < w {
                        g[[1, b, i, j, l]] = u[[b, i, j + 1, l]] - x;
                    }
                    if l + 1 < d {
                        g[[2, b, i, j, l]] = u[[b, i, j, l + 1]] - x;
                    }
                }
            }
        }
    }
    g
}

/// Adjoint of [`gradient`] (negative divergence).
fn gradient_adjoint<T: Scalar>(g: &Array5<C<T>>) -> Array4<C<T>> {
    let s = g.shape();
    let (k, h, w, d) = (s[1], s[2], s[3], s[4]);
    let mut u = Array4::from_elem((k, h, w, d), C::new(T::zero(), T::zero()));
    for b in 0..k {
        for i in 0..h {
            for j in 0..w {
                for l in 0..d {
                    if i + 1 < h {
                        let v = g[[0, b, i, j, l]];
                        u[[b, i + 1, j, l]] += v;
                        u[[b, i, j, l]] -= v;
                    }
                    if j + 1 < w {
                        let v = g[[1, b, i, j, l]];
                        u[[b, i, j + 1, l]] += v;
                        u[[b, i, j, l]] -= v;
                    }
                    if l + 1 < d {
                        let v = g[[2, b, i, j, l]];
                        u[[b, i, j, l + 1]] += v;
                        u[[b, i, j, l]] -= v;
                    }
                }
            }
        }
    }
    u
}

fn dot<T: Scalar, D: ndarray::Dimension>(a: &ndarray::Array<C<T>, D>, b: &ndarray::Array<C<T>, D>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x.re * y.re + x.im * y.im).as_f64()).sum()
}

fn norm<T: Scalar, D: ndarray::Dimension>(a: &ndarray::Array<C<T>, D>) -> f64 {
    dot(a, a).sqrt()
}

/// Conjugate gradients for the Hermitian positive semi-definite `apply`,
/// warm-started at `x`.
fn conjugate_gradient<T: Scalar>(
    apply: impl Fn(&Array4<C<T>>) -> Result<Array4<C<T>>>,
    rhs: &Array4<C<T>>,
    x: &mut Array4<C<T>>,
    iters: usize,
) -> Result<()> {
    let mut r = rhs - &apply(x)?;
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let stop = 1e-12 * dot(rhs, rhs);
    for _ in 0..iters {
        if rr <= stop {
            break;
        }
        let ap = apply(&p)?;
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = T::lit(rr / pap);
        x.zip_mut_with(&p, |xi, &pi| *xi += pi.scale(alpha));
        r.zip_mut_with(&ap, |ri, &ai| *ri -= ai.scale(alpha));
        let rr_new = dot(&r, &r);
        let beta = T::lit(rr_new / rr);
        p.zip_mut_with(&r, |pi, &ri| *pi = ri + pi.scale(beta));
        rr = rr_new;
    }
    Ok(())
}

/// Isotropic group shrinkage: every `(K, voxel)` gradient vector, real and
/// imaginary parts of all three directions together, shrinks towards zero by
/// `threshold` in norm.
fn shrink<T: Scalar>(v: &mut Array5<C<T>>, threshold: f64) {
    let s = v.shape().to_vec();
    let n = s[1] * s[2] * s[3] * s[4];
    let data = v.as_slice_mut().expect("standard layout");
    for idx in 0..n {
        let mag = (0..3).map(|a| data[a * n + idx].norm_sqr().as_f64()).sum::<f64>().sqrt();
        let f = if mag > threshold { 1.0 - threshold / mag } else { 0.0 };
        for a in 0..3 {
            data[a * n + idx] = data[a * n + idx].scale(T::lit(f));
        }
    }
}

/// Spatial bases minimizing `1/2 ||ks - M F C (Phi^T U)||^2 + lambda TV(U)` by
/// ADMM on the split `Z = grad U`, with the `U` step solved by conjugate
/// gradients. Returns the bases and the per-iteration relative primal residual.
pub fn recon_lrt_admm<T: Scalar>(
    ks: &KSpaceData<T>,
    coils: &CoilMaps<T>,
    phi: &TemporalBasis<T>,
    cfg: &AdmmConfig,
) -> Result<(SpatialBases<T>, Vec<f64>)> {
    cfg.validate()?;
    let op = EncodingOperator::new(&ks.mask);
    let aty = op.adjoint_subspace(ks, &phi.phi, coils)?;
    let rho = T::lit(cfg.rho);
    let normal = |x: &Array4<C<T>>| -> Result<Array4<C<T>>> {
        let y = op.forward_subspace(x, &phi.phi, coils, &ks.protocol)?;
        let mut out = op.adjoint_subspace(&y, &phi.phi, coils)?;
        let tv = gradient_adjoint(&gradient(x));
        out.zip_mut_with(&tv, |o, &t| *o += t.scale(rho));
        Ok(out)
    };
    let mut u = aty.clone();
    let mut z = gradient(&u);
    let mut w = Array5::from_elem(z.raw_dim(), C::new(T::zero(), T::zero()));
    let mut trace = Vec::new();
    let mut growing = 0;
    for it in 0..cfg.max_iters {
        let mut rhs = aty.clone();
        let zw = &z - &w;
        let back = gradient_adjoint(&zw);
        rhs.zip_mut_with(&back, |r, &b| *r += b.scale(rho));
        conjugate_gradient(normal, &rhs, &mut u, cfg.cg_iters)?;
        let gu = gradient(&u);
        let mut v = &gu + &w;
        shrink(&mut v, cfg.lambda_tv / cfg.rho);
        z = v;
        let primal = &gu - &z;
        w += &primal;
        let scale = norm(&gu).max(norm(&z)).max(f64::MIN_POSITIVE);
        let res = norm(&primal) / scale;
        if !res.is_finite() {
            return Err(Error::AdmmDiverged { iters: it + 1, trace });
        }
        if trace.last().is_some_and(|&prev| res > prev) {
            growing += 1;
        } else {
            growing = 0;
        }
        trace.push(res);
        if growing >= DIVERGENCE_RUN {
            return Err(Error::AdmmDiverged { iters: it + 1, trace });
        }
        if res < cfg.tol {
            break;
        }
    }
    Ok((SpatialBases { u }, trace))
}

/// Maps from voxelwise fits together with the number of voxels whose best
/// start did not converge.
#[derive(Clone, Debug)]
pub struct NllsResult<T: Scalar> {
    pub maps: ParametricMaps<T>,
    pub nonconverged: usize,
}

const T1_SEEDS: [f64; 3] = [500.0, 1200.0, 3000.0];
const MAX_LM_ITERS: usize = 200;

/// Fitted parameter set: `[A, ln T1, ln T2*, phi0, freq]` plus `[ln T2, B]`
/// for T2IR-GRE.
#[derive(Clone, Copy, Debug)]
struct Model {
    kind: SequenceKind,
}

impl Model {
    fn n(&self) -> usize {
        if self.kind == SequenceKind::T2irGre {
            7
        } else {
            5
        }
    }

    fn params(&self, x: &[f64]) -> TissueParams<f64> {
        let mut p = TissueParams {
            a: x[0],
            b: 1.0,
            t1: x[1].exp(),
            t2: 1.0,
            t2s: x[2].exp(),
            phi0: x[3],
            freq: x[4],
        };
        if self.kind == SequenceKind::T2irGre {
            p.t2 = x[5].exp();
            p.b = x[6];
        }
        p
    }

    fn pack(&self, p: &TissueParams<f64>) -> Vec<f64> {
        let mut x = vec![p.a, p.t1.ln(), p.t2s.ln(), p.phi0, p.freq];
        if self.kind == SequenceKind::T2irGre {
            x.extend([p.t2.ln(), p.b]);
        }
        x
    }

    fn clamp(&self, x: &mut [f64]) {
        x[1] = x[1].clamp(1f64.ln(), 20000f64.ln());
        x[2] = x[2].clamp(0.1f64.ln(), 5000f64.ln());
        if self.kind == SequenceKind::T2irGre {
            x[5] = x[5].clamp(0.1f64.ln(), 5000f64.ln());
            x[6] = x[6].clamp(0.0, 1.0);
        }
    }

    /// Residual `s(x) - y` (real then imaginary) and optionally its Jacobian.
    fn residual(&self, frames: &[FrameConsts<f64>], y: &[C<f64>], x: &[f64], jac: Option<&mut DMatrix<f64>>) -> DVector<f64> {
        let t = frames.len();
        let p = self.params(x);
        let mut r = DVector::zeros(2 * t);
        match jac {
            None => {
                for (i, f) in frames.iter().enumerate() {
                    let d = f.signal(&p) - y[i];
                    r[i] = d.re;
                    r[t + i] = d.im;
                }
            }
            Some(j) => {
                // chain factors from the packed parameters to the signal's
                let cols: Vec<(usize, f64)> = {
                    let mut c = vec![
                        (MapKind::A as usize, 1.0),
                        (MapKind::T1 as usize, p.t1),
                        (MapKind::T2s as usize, p.t2s),
                        (MapKind::Phi0 as usize, 1.0),
                        (MapKind::Freq as usize, 1.0),
                    ];
                    if self.kind == SequenceKind::T2irGre {
                        c.extend([(MapKind::T2 as usize, p.t2), (MapKind::B as usize, 1.0)]);
                    }
                    c
                };
                for (i, f) in frames.iter().enumerate() {
                    let (s, g) = f.signal_and_gradient(&p);
                    let d = s - y[i];
                    r[i] = d.re;
                    r[t + i] = d.im;
                    for (c, &(src, factor)) in cols.iter().enumerate() {
                        j[(i, c)] = g[src].re * factor;
                        j[(t + i, c)] = g[src].im * factor;
                    }
                }
            }
        }
        r
    }
}

/// Levenberg-Marquardt with Marquardt's diagonal scaling. Returns the final
/// parameters, cost, and whether the iterations converged.
fn levenberg_marquardt(model: Model, frames: &[FrameConsts<f64>], y: &[C<f64>], mut x: Vec<f64>) -> (Vec<f64>, f64, bool) {
    let n = model.n();
    let mut jac = DMatrix::zeros(2 * frames.len(), n);
    let mut r = model.residual(frames, y, &x, Some(&mut jac));
    let mut cost = r.norm_squared();
    let mut mu = 1e-3;
    let scale = y.iter().map(|z| z.norm_sqr()).sum::<f64>().max(f64::MIN_POSITIVE);
    for _ in 0..MAX_LM_ITERS {
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &r;
        if jtr.amax() <= 1e-14 * scale.sqrt() {
            return (x, cost, true);
        }
        let mut accepted = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for i in 0..n {
                a[(i, i)] += mu * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-&jtr))) else {
                mu *= 10.0;
                continue;
            };
            let mut trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            model.clamp(&mut trial);
            let r_trial = model.residual(frames, y, &trial, None);
            let c_trial = r_trial.norm_squared();
            if c_trial < cost {
                let small = (cost - c_trial) <= 1e-12 * cost.max(1e-30 * scale)
                    || step.iter().zip(&x).all(|(s, v)| s.abs() <= 1e-10 * v.abs().max(1e-6));
                x = trial;
                cost = c_trial;
                mu = (mu * 0.3).max(1e-12);
                r = model.residual(frames, y, &x, Some(&mut jac));
                accepted = true;
                if small {
                    return (x, cost, true);
                }
                break;
            }
            mu *= 10.0;
        }
        if !accepted {
            // no descent direction left
            return (x, cost, true);
        }
        if cost <= 1e-24 * scale {
            return (x, cost, true);
        }
    }
    (x, cost, false)
}

/// Starting values from the data: off-resonance from echo-to-echo phase
/// differences, `T2*` from the log-magnitude slope over echoes, phase offset
/// from the demodulated signal, and amplitude by linear least squares.
fn initial_guess(model: Model, protocol: &SequenceProtocol, frames: &[FrameConsts<f64>], y: &[C<f64>], t1: f64) -> TissueParams<f64> {
    let specs = protocol.frames();
    let ne = protocol.te_ms.len();
    let mut pair = C::new(0.0, 0.0);
    let (mut sxy, mut sxx) = (0.0, 0.0);
    let groups = specs.len() / ne;
    for g in 0..groups {
        let ys = &y[g * ne..(g + 1) * ne];
        for e in 1..ne {
            pair += ys[e - 1].conj() * ys[e];
        }
        let mean_te = protocol.te_ms.iter().sum::<f64>() / ne as f64;
        let logs: Vec<f64> = ys.iter().map(|z| z.norm().max(1e-30).ln()).collect();
        let mean_log = logs.iter().sum::<f64>() / ne as f64;
        for e in 0..ne {
            let dx = protocol.te_ms[e] - mean_te;
            sxy += dx * (logs[e] - mean_log);
            sxx += dx * dx;
        }
    }
    let freq = if ne > 1 {
        pair.arg() / (std::f64::consts::TAU * (protocol.te_ms[1] - protocol.te_ms[0]) * 1e-3)
    } else {
        0.0
    };
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let t2s = if slope < -1e-6 { (-1.0 / slope).clamp(1.0, 500.0) } else { 500.0 };
    let demod: C<f64> = specs
        .iter()
        .zip(y)
        .map(|(s, &v)| v * C::from_polar(1.0, -std::f64::consts::TAU * freq * s.te_ms * 1e-3))
        .sum();
    let mut p = TissueParams {
        a: 1.0,
        b: 0.95,
        t1,
        t2: 80.0,
        t2s,
        phi0: demod.arg(),
        freq,
    };
    if model.kind == SequenceKind::VfaMegre {
        p.b = 1.0;
    }
    let unit: Vec<C<f64>> = frames.iter().map(|f| f.signal(&p)).collect();
    let num: f64 = unit.iter().zip(y).map(|(g, v)| (g.conj() * v).re).sum();
    let den: f64 = unit.iter().map(|g| g.norm_sqr()).sum();
    p.a = if den > 0.0 { (num / den).max(0.0) } else { 0.0 };
    p
}

/// Fits the signal model of `protocol` to every voxel inside `mask` (all
/// voxels when absent). Without `init`, each voxel is fitted from three `T1`
/// seeds and keeps the lowest-residual result; with `init`, from the given
/// maps only. Voxels outside the mask and all-zero voxels get zero maps.
pub fn fit_maps_nlls<T: Scalar>(
    iw: &WeightedImages<T>,
    protocol: &SequenceProtocol,
    init: Option<&ParametricMaps<T>>,
    mask: Option<&Array3<bool>>,
) -> Result<NllsResult<T>> {
    protocol.validate()?;
    if iw.n_frames() != protocol.n_frames() || iw.protocol.kind != protocol.kind {
        return Err(Error::InvalidParameter("weighted images were not produced by this protocol".into()));
    }
    let shape = iw.shape();
    if let Some(m) = mask {
        if m.shape() != shape {
            return Err(Error::Dimension(format!("mask shape {:?} does not match images {shape:?}", m.shape())));
        }
    }
    let model = Model { kind: protocol.kind };
    let kinds = protocol.required_maps();
    let frames = FrameConsts::<f64>::for_protocol(protocol);
    let n: usize = shape.iter().product();
    let t = iw.n_frames();
    let data = iw.data.as_slice().expect("standard layout");
    let inside: Vec<bool> = match mask {
        Some(m) => m.iter().copied().collect(),
        None => vec![true; n],
    };
    let init_values: Option<Vec<&[T]>> = match init {
        Some(maps) => Some(kinds.iter().map(|&k| maps.require(k).map(|a| a.as_slice().expect("standard layout"))).collect::<Result<_>>()?),
        None => None,
    };
    let fits: Vec<Option<(TissueParams<f64>, bool)>> = (0..n)
        .into_par_iter()
        .map(|v| {
            if !inside[v] {
                return None;
            }
            let y: Vec<C<f64>> = (0..t).map(|i| {
                let z = data[i * n + v];
                C::new(z.re.as_f64(), z.im.as_f64())
            }).collect();
            if y.iter().all(|z| z.norm_sqr() == 0.0) {
                return None;
            }
            let starts: Vec<TissueParams<f64>> = match &init_values {
                Some(values) => {
                    let mut p = initial_guess(model, protocol, &frames, &y, 1000.0);
                    for (&k, vals) in kinds.iter().zip(values) {
                        p.set(k, vals[v].as_f64());
                    }
                    vec![p]
                }
                None => T1_SEEDS.iter().map(|&t1| initial_guess(model, protocol, &frames, &y, t1)).collect(),
            };
            let mut best: Option<(Vec<f64>, f64, bool)> = None;
            for s in starts {
                let mut x0 = model.pack(&s);
                model.clamp(&mut x0);
                let fit = levenberg_marquardt(model, &frames, &y, x0);
                if best.as_ref().is_none_or(|b| fit.1 < b.1) {
                    best = Some(fit);
                }
            }
            let (x, _, converged) = best.expect("at least one start");
            Some((model.params(&x), converged))
        })
        .collect();
    let mut maps = ParametricMaps::new(shape);
    let mut nonconverged = 0;
    for &kind in kinds {
        let values: Vec<T> = fits.iter().map(|f| f.as_ref().map_or(T::zero(), |(p, _)| T::lit(p.get(kind)))).collect();
        maps.insert(kind, Array3::from_shape_vec(shape, values).expect("grid size"))?;
    }
    for (_, converged) in fits.iter().flatten() {
        if !converged {
            nonconverged += 1;
        }
    }
    if nonconverged > 0 {
        log::warn!("{nonconverged} voxels did not converge; kept their best start");
    }
    Ok(NllsResult { maps, nonconverged })
}

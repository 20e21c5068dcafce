//! Bloch signal models for the two multi-contrast sequences and the
//! dictionaries used to derive temporal subspaces.

use ndarray::{Array2, Array4, Axis};
use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::MapKind;
use crate::phantom::{GroundTruth, INVERSION_EFFICIENCY};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SequenceKind {
    /// Variable-flip-angle multi-echo GRE (T1, T2*).
    VfaMegre,
    /// T2-prepared inversion-recovery GRE (T1, T2, T2*).
    T2irGre,
}

/// Acquisition timing. Times in ms, angles in degrees.
///
/// Frames are ordered flip-major then echo for `VfaMegre`, and tau-major, then
/// segment, then echo for `T2irGre` (which uses `flip_deg[0]` for every pulse).
/// Segment indices start at 0 within each inversion period.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceProtocol {
    pub kind: SequenceKind,
    pub tr_ms: f64,
    pub te_ms: Vec<f64>,
    pub flip_deg: Vec<f64>,
    #[serde(default)]
    pub tau_ms: Vec<f64>,
    #[serde(default)]
    pub n_segments: usize,
}

/// Everything the signal equation needs to know about one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameSpec {
    pub flip_rad: f64,
    pub te_ms: f64,
    pub tau_ms: f64,
    pub segment: usize,
    pub echo: usize,
    /// Index into `flip_deg` (VFA) or `tau_ms` (T2IR).
    pub preparation: usize,
}

impl SequenceProtocol {
    /// Variable flip angle multi-echo GRE: 5 flips x 12 echoes, TR 46 ms.
    pub fn vfa_megre_default() -> Self {
        Self {
            kind: SequenceKind::VfaMegre,
            tr_ms: 46.0,
            te_ms: (0..12).map(|e| 2.15 + 3.05 * e as f64).collect(),
            flip_deg: vec![5.0, 10.0, 20.0, 30.0, 40.0],
            tau_ms: Vec::new(),
            n_segments: 0,
        }
    }

    /// T2IR-GRE with four preparations and four echoes, `n_segments` per inversion.
    pub fn t2ir_gre_default(n_segments: usize) -> Self {
        Self {
            kind: SequenceKind::T2irGre,
            tr_ms: 30.0,
            te_ms: vec![4.5, 11.2, 17.9, 24.6],
            flip_deg: vec![10.0],
            tau_ms: vec![25.0, 50.0, 70.0, 90.0],
            n_segments,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.tr_ms > 0.0) {
            return bad(format!("TR must be positive, got {}", self.tr_ms));
        }
        if self.te_ms.is_empty() || self.te_ms.iter().any(|&t| !(t > 0.0)) {
            return bad("echo times must be a non-empty list of positive values".into());
        }
        if self.flip_deg.is_empty() || self.flip_deg.iter().any(|&a| !(a > 0.0 && a <= 90.0)) {
            return bad("flip angles must lie in (0, 90] degrees".into());
        }
        if self.kind == SequenceKind::T2irGre {
            if self.tau_ms.is_empty() || self.tau_ms.iter().any(|&t| !(t > 0.0)) {
                return bad("T2 preparation times must be a non-empty list of positive values".into());
            }
            if self.n_segments == 0 {
                return bad("T2IR-GRE needs at least one segment".into());
            }
        }
        Ok(())
    }

    pub fn n_frames(&self) -> usize {
        match self.kind {
            SequenceKind::VfaMegre => self.flip_deg.len() * self.te_ms.len(),
            SequenceKind::T2irGre => self.tau_ms.len() * self.te_ms.len() * self.n_segments,
        }
    }

    pub fn frame(&self, t: usize) -> FrameSpec {
        let ne = self.te_ms.len();
        let echo = t % ne;
        match self.kind {
            SequenceKind::VfaMegre => {
                let flip = t / ne;
                FrameSpec {
                    flip_rad: self.flip_deg[flip].to_radians(),
                    te_ms: self.te_ms[echo],
                    tau_ms: 0.0,
                    segment: 0,
                    echo,
                    preparation: flip,
                }
            }
            SequenceKind::T2irGre => {
                let segment = (t / ne) % self.n_segments;
                let tau = t / (ne * self.n_segments);
                FrameSpec {
                    flip_rad: self.flip_deg[0].to_radians(),
                    te_ms: self.te_ms[echo],
                    tau_ms: self.tau_ms[tau],
                    segment,
                    echo,
                    preparation: tau,
                }
            }
        }
    }

    pub fn frames(&self) -> Vec<FrameSpec> {
        (0..self.n_frames()).map(|t| self.frame(t)).collect()
    }

    /// Map kinds a reconstruction must estimate for this sequence.
    pub fn required_maps(&self) -> &'static [MapKind] {
        match self.kind {
            SequenceKind::VfaMegre => &[MapKind::A, MapKind::T1, MapKind::T2s, MapKind::Phi0, MapKind::Freq],
            SequenceKind::T2irGre => &[
                MapKind::A,
                MapKind::B,
                MapKind::T1,
                MapKind::T2,
                MapKind::T2s,
                MapKind::Phi0,
                MapKind::Freq,
            ],
        }
    }
}

/// Tissue parameters of one voxel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TissueParams<T> {
    pub a: T,
    pub b: T,
    pub t1: T,
    pub t2: T,
    pub t2s: T,
    pub phi0: T,
    pub freq: T,
}

impl<T: Scalar> TissueParams<T> {
    pub fn get(&self, kind: MapKind) -> T {
        match kind {
            MapKind::A => self.a,
            MapKind::B => self.b,
            MapKind::T1 => self.t1,
            MapKind::T2 => self.t2,
            MapKind::T2s => self.t2s,
            MapKind::Phi0 => self.phi0,
            MapKind::Freq => self.freq,
        }
    }

    pub fn set(&mut self, kind: MapKind, value: T) {
        match kind {
            MapKind::A => self.a = value,
            MapKind::B => self.b = value,
            MapKind::T1 => self.t1 = value,
            MapKind::T2 => self.t2 = value,
            MapKind::T2s => self.t2s = value,
            MapKind::Phi0 => self.phi0 = value,
            MapKind::Freq => self.freq = value,
        }
    }
}

/// Partial derivatives of the complex signal, indexed like `MapKind::ALL`.
pub type SignalGradient<T> = [Complex<T>; 7];

/// Per-frame constants precomputed in the working precision.
#[derive(Clone, Copy, Debug)]
pub struct FrameConsts<T> {
    kind: SequenceKind,
    tr: T,
    cos_a: T,
    sin_a: T,
    te: T,
    tau: T,
    segment: i32,
    /// 2*pi*TE in seconds, so the phase is phi0 + freq * omega_te.
    omega_te: T,
}

impl<T: Scalar> FrameConsts<T> {
    pub fn new(protocol: &SequenceProtocol, frame: &FrameSpec) -> Self {
        Self {
            kind: protocol.kind,
            tr: T::lit(protocol.tr_ms),
            cos_a: T::lit(frame.flip_rad.cos()),
            sin_a: T::lit(frame.flip_rad.sin()),
            te: T::lit(frame.te_ms),
            tau: T::lit(frame.tau_ms),
            segment: frame.segment as i32,
            omega_te: T::lit(std::f64::consts::TAU * frame.te_ms * 1e-3),
        }
    }

    pub fn for_protocol(protocol: &SequenceProtocol) -> Vec<Self> {
        protocol.frames().iter().map(|f| Self::new(protocol, f)).collect()
    }

    /// Signal of one voxel in this frame.
    #[inline]
    pub fn signal(&self, p: &TissueParams<T>) -> Complex<T> {
        let e1 = (-self.tr / p.t1).exp();
        let steady = (T::one() - e1) / (T::one() - e1 * self.cos_a) * self.sin_a;
        let decay = (-self.te / p.t2s).exp();
        let mut mag = p.a * steady * decay;
        if self.kind == SequenceKind::T2irGre {
            let q = e1 * self.cos_a;
            mag = mag * (T::one() + (p.b * (-self.tau / p.t2).exp() - T::one()) * q.powi(self.segment));
        }
        Complex::from_polar(mag, p.phi0 + p.freq * self.omega_te)
    }

    /// Signal and its partial derivatives with respect to every parameter.
    #[inline]
    pub fn signal_and_gradient(&self, p: &TissueParams<T>) -> (Complex<T>, SignalGradient<T>) {
        let one = T::one();
        let zero = Complex::new(T::zero(), T::zero());
        let e1 = (-self.tr / p.t1).exp();
        let de1_dt1 = e1 * self.tr / (p.t1 * p.t1);
        let denom = one - e1 * self.cos_a;
        let steady = (one - e1) / denom * self.sin_a;
        let dsteady_de1 = self.sin_a * (self.cos_a - one) / (denom * denom);
        let decay = (-self.te / p.t2s).exp();
        let ddecay_dt2s = decay * self.te / (p.t2s * p.t2s);

        let (bracket, dbr_de1, dbr_db, dbr_dt2) = if self.kind == SequenceKind::T2irGre {
            let q = e1 * self.cos_a;
            let n = self.segment;
            let qn = q.powi(n);
            let dqn_de1 = if n == 0 {
                T::zero()
            } else {
                T::lit(n as f64) * q.powi(n - 1) * self.cos_a
            };
            let prep = (-self.tau / p.t2).exp();
            let c = p.b * prep - one;
            (
                one + c * qn,
                c * dqn_de1,
                prep * qn,
                p.b * prep * self.tau / (p.t2 * p.t2) * qn,
            )
        } else {
            (one, T::zero(), T::zero(), T::zero())
        };

        let phase = Complex::from_polar(one, p.phi0 + p.freq * self.omega_te);
        let base = steady * decay * bracket;
        let s = phase * (p.a * base);
        let mut g = [zero; 7];
        g[0] = phase * base;
        g[1] = phase * (p.a * steady * decay * dbr_db);
        g[2] = phase * (p.a * decay * (dsteady_de1 * bracket + steady * dbr_de1) * de1_dt1);
        g[3] = phase * (p.a * steady * decay * dbr_dt2);
        g[4] = phase * (p.a * steady * bracket * ddecay_dt2s);
        g[5] = s * Complex::new(T::zero(), one);
        g[6] = s * Complex::new(T::zero(), self.omega_te);
        (s, g)
    }
}

/// Multi-contrast image series, stored frame-major as `(T, H, W, D)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedImages<T: Scalar> {
    pub data: Array4<Complex<T>>,
    pub protocol: SequenceProtocol,
}

impl<T: Scalar> WeightedImages<T> {
    pub fn new(data: Array4<Complex<T>>, protocol: SequenceProtocol) -> Result<Self> {
        let frames = data.len_of(Axis(0));
        if frames != protocol.n_frames() {
            return Err(Error::ShapeMismatch {
                axis: "frame",
                expected: protocol.n_frames(),
                got: frames,
            });
        }
        Ok(Self { data, protocol })
    }

    pub fn n_frames(&self) -> usize {
        self.data.len_of(Axis(0))
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    pub fn frame(&self, t: usize) -> &[Complex<T>] {
        let n: usize = self.shape().iter().product();
        &self.data.as_slice().expect("standard layout")[t * n..(t + 1) * n]
    }

    pub fn scaled(&self, factor: T) -> Self {
        Self {
            data: self.data.mapv(|z| z.scale(factor)),
            protocol: self.protocol.clone(),
        }
    }
}

fn voxel_params<T: Scalar>(gt: &GroundTruth<T>, idx: [usize; 3]) -> TissueParams<T> {
    let at = |k| gt.map(k)[idx];
    TissueParams {
        a: at(MapKind::A),
        b: at(MapKind::B),
        t1: at(MapKind::T1),
        t2: at(MapKind::T2),
        t2s: at(MapKind::T2s),
        phi0: at(MapKind::Phi0),
        freq: at(MapKind::Freq),
    }
}

fn simulate<T: Scalar>(gt: &GroundTruth<T>, protocol: &SequenceProtocol) -> Result<WeightedImages<T>> {
    protocol.validate()?;
    let shape = gt.shape();
    let n: usize = shape.iter().product();
    let frames = FrameConsts::<T>::for_protocol(protocol);
    let mut data = Array4::from_elem(
        (frames.len(), shape[0], shape[1], shape[2]),
        Complex::new(T::zero(), T::zero()),
    );
    let out = data.as_slice_mut().expect("fresh array");
    for ((i, j, k), &inside) in gt.brain_mask.indexed_iter() {
        if !inside {
            continue;
        }
        let p = voxel_params(gt, [i, j, k]);
        let bad = |reason: &str| Error::NonPhysical {
            voxel: [i, j, k],
            reason: reason.to_string(),
        };
        if !(p.t1 > T::zero()) {
            return Err(bad("T1 must be positive"));
        }
        if !(p.t2s > T::zero()) {
            return Err(bad("T2* must be positive"));
        }
        if protocol.kind == SequenceKind::T2irGre && !(p.t2 > T::zero()) {
            return Err(bad("T2 must be positive"));
        }
        let v = (i * shape[1] + j) * shape[2] + k;
        for (t, f) in frames.iter().enumerate() {
            out[t * n + v] = f.signal(&p);
        }
    }
    WeightedImages::new(data, protocol.clone())
}

/// Weighted images of the variable-flip-angle multi-echo GRE model.
pub fn signal_vfa_megre<T: Scalar>(gt: &GroundTruth<T>, protocol: &SequenceProtocol) -> Result<WeightedImages<T>> {
    if protocol.kind != SequenceKind::VfaMegre {
        return Err(Error::InvalidParameter("protocol is not VFA_MEGRE".into()));
    }
    simulate(gt, protocol)
}

/// Weighted images of the T2-prepared inversion-recovery GRE model.
pub fn signal_t2ir_gre<T: Scalar>(gt: &GroundTruth<T>, protocol: &SequenceProtocol) -> Result<WeightedImages<T>> {
    if protocol.kind != SequenceKind::T2irGre {
        return Err(Error::InvalidParameter("protocol is not T2IR_GRE".into()));
    }
    simulate(gt, protocol)
}

/// Dispatches on `protocol.kind`.
pub fn simulate_weighted<T: Scalar>(gt: &GroundTruth<T>, protocol: &SequenceProtocol) -> Result<WeightedImages<T>> {
    simulate(gt, protocol)
}

/// One dictionary atom. `t2` and `b` only matter for T2IR-GRE.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DictionaryEntry {
    pub t1: f64,
    pub t2s: f64,
    pub t2: f64,
    pub b: f64,
}

impl DictionaryEntry {
    pub fn vfa(t1: f64, t2s: f64) -> Self {
        Self {
            t1,
            t2s,
            t2: t2s,
            b: INVERSION_EFFICIENCY,
        }
    }
}

/// Grid used when no explicit one is configured. The VFA grid spans T1 400..4000
/// (step 200) and T2* 10..150 (step 10) ms.
pub fn default_dictionary_grid(protocol: &SequenceProtocol) -> Vec<DictionaryEntry> {
    match protocol.kind {
        SequenceKind::VfaMegre => {
            let mut grid = Vec::new();
            for t1 in (0..19).map(|i| 400.0 + 200.0 * i as f64) {
                for t2s in (0..15).map(|i| 10.0 + 10.0 * i as f64) {
                    grid.push(DictionaryEntry::vfa(t1, t2s));
                }
            }
            grid
        }
        SequenceKind::T2irGre => {
            let mut grid = Vec::new();
            for t1 in [500.0, 800.0, 1100.0, 1500.0, 2000.0, 3000.0, 4000.0] {
                for t2 in [40.0, 60.0, 80.0, 100.0, 150.0, 300.0] {
                    for t2s in [20.0, 35.0, 50.0, 70.0, 100.0] {
                        if t2s <= t2 {
                            grid.push(DictionaryEntry {
                                t1,
                                t2s,
                                t2,
                                b: INVERSION_EFFICIENCY,
                            });
                        }
                    }
                }
            }
            grid
        }
    }
}

/// Unit-norm signal evolutions (A = 1, zero phase), one row per grid entry.
pub fn build_dictionary<T: Scalar>(protocol: &SequenceProtocol, grid: &[DictionaryEntry]) -> Result<Array2<T>> {
    protocol.validate()?;
    if grid.is_empty() {
        return Err(Error::InvalidParameter("dictionary grid is empty".into()));
    }
    let frames = FrameConsts::<f64>::for_protocol(protocol);
    let mut dict = Array2::<T>::zeros((grid.len(), frames.len()));
    for (index, e) in grid.iter().enumerate() {
        let reason = if !(e.t1 > 0.0) {
            Some("T1 must be positive")
        } else if !(e.t2s > 0.0) {
            Some("T2* must be positive")
        } else if !(e.t2 > 0.0) {
            Some("T2 must be positive")
        } else if !(0.0..=1.0).contains(&e.b) {
            Some("B must lie in [0, 1]")
        } else {
            None
        };
        if let Some(reason) = reason {
            return Err(Error::InvalidDictionaryEntry {
                index,
                reason: reason.into(),
            });
        }
        let p = TissueParams {
            a: 1.0,
            b: e.b,
            t1: e.t1,
            t2: e.t2,
            t2s: e.t2s,
            phi0: 0.0,
            freq: 0.0,
        };
        let row: Vec<f64> = frames.iter().map(|f| f.signal(&p).re).collect();
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::InvalidDictionaryEntry {
                index,
                reason: "signal evolution is identically zero".into(),
            });
        }
        for (t, x) in row.into_iter().enumerate() {
            dict[[index, t]] = T::lit(x / norm);
        }
    }
    Ok(dict)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::make_phantom;

    fn params(a: f64, t1: f64, t2s: f64) -> TissueParams<f64> {
        TissueParams {
            a,
            b: 1.0,
            t1,
            t2: 100.0,
            t2s,
            phi0: 0.0,
            freq: 0.0,
        }
    }

    fn frame(protocol: &SequenceProtocol, flip_deg: f64, te: f64, tau: f64, segment: usize) -> FrameConsts<f64> {
        FrameConsts::new(
            protocol,
            &FrameSpec {
                flip_rad: flip_deg.to_radians(),
                te_ms: te,
                tau_ms: tau,
                segment,
                echo: 0,
                preparation: 0,
            },
        )
    }

    /// Scalar evaluation written independently of `FrameConsts`.
    fn oracle(a: f64, b: f64, t1: f64, t2: f64, t2s: f64, tr: f64, alpha_deg: f64, te: f64, tau: Option<f64>, n: i32) -> f64 {
        let alpha = alpha_deg * std::f64::consts::PI / 180.0;
        let e1 = f64::exp(-tr / t1);
        let mut s = a * (1.0 - e1) / (1.0 - e1 * alpha.cos()) * alpha.sin() * f64::exp(-te / t2s);
        if let Some(tau) = tau {
            s *= 1.0 + (b * f64::exp(-tau / t2) - 1.0) * (e1 * alpha.cos()).powi(n);
        }
        s
    }

    #[test]
    fn ninety_degree_long_tr_limit() {
        let t1 = 900.0;
        let mut p = SequenceProtocol::vfa_megre_default();
        p.tr_ms = 1e6 * t1;
        let s = frame(&p, 90.0, 40.0, 0.0, 0).signal(&params(2.0, t1, 40.0));
        assert!((s.re - 2.0 * (-1.0f64).exp()).abs() < 1e-12);
        assert!((s.re - 0.73576).abs() < 1e-5);
    }

    #[test]
    fn zero_echo_time_is_steady_state() {
        let p = SequenceProtocol::vfa_megre_default();
        for alpha in [5.0, 33.0, 90.0] {
            let s = frame(&p, alpha, 0.0, 0.0, 0).signal(&params(1.0, 1000.0, 50.0));
            let e1 = (-46.0f64 / 1000.0).exp();
            let a = alpha.to_radians();
            assert!((s.re - (1.0 - e1) * a.sin() / (1.0 - e1 * a.cos())).abs() < 1e-14);
        }
    }

    #[test]
    fn vfa_matches_scalar_oracle() {
        let p = SequenceProtocol::vfa_megre_default();
        let s = frame(&p, 10.0, 10.0, 0.0, 0).signal(&params(1.0, 1000.0, 50.0));
        let expected = oracle(1.0, 1.0, 1000.0, 100.0, 50.0, 46.0, 10.0, 10.0, None, 0);
        assert!((s.re - expected).abs() < 1e-10);
        assert_eq!(s.im, 0.0);
        // frozen from the oracle
        assert!((expected - 0.107_483_220_756_148_87).abs() < 1e-10, "{expected}");
    }

    #[test]
    fn t2ir_matches_scalar_oracle_on_white_matter() {
        let p = SequenceProtocol::t2ir_gre_default(80);
        let wm = TissueParams {
            a: 0.8,
            b: 0.95,
            t1: 850.0,
            t2: 70.0,
            t2s: 50.0,
            phi0: 0.0,
            freq: 0.0,
        };
        let s = frame(&p, 10.0, 11.2, 50.0, 40).signal(&wm);
        let expected = oracle(0.8, 0.95, 850.0, 70.0, 50.0, 30.0, 10.0, 11.2, Some(50.0), 40);
        assert!((s.re - expected).abs() < 1e-10);
        assert!((expected - 0.072_522_865_995_544_08).abs() < 1e-10, "{expected}");
    }

    #[test]
    fn t2ir_reduces_to_vfa_without_preparation_loss() {
        let t2ir = SequenceProtocol::t2ir_gre_default(20);
        let vfa = SequenceProtocol { kind: SequenceKind::VfaMegre, ..t2ir.clone() };
        let mut p = params(0.7, 1200.0, 45.0);
        p.b = 1.0;
        for n in [0, 3, 19] {
            let a = frame(&t2ir, 10.0, 11.2, 0.0, n).signal(&p);
            let b = frame(&vfa, 10.0, 11.2, 0.0, n).signal(&p);
            assert!((a - b).norm() < 1e-15);
        }
        // geometric decay of the bracket for large n
        p.b = 0.3;
        let far = frame(&t2ir, 10.0, 11.2, 70.0, 10_000).signal(&p);
        let ss = frame(&vfa, 10.0, 11.2, 70.0, 0).signal(&p);
        assert!((far - ss).norm() < 1e-8);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for protocol in [SequenceProtocol::vfa_megre_default(), SequenceProtocol::t2ir_gre_default(20)] {
            let p = TissueParams {
                a: 0.9,
                b: 0.8,
                t1: 1100.0,
                t2: 90.0,
                t2s: 45.0,
                phi0: 0.3,
                freq: 7.0,
            };
            for spec in protocol.frames().iter().step_by(7) {
                let f = FrameConsts::<f64>::new(&protocol, spec);
                let (s, g) = f.signal_and_gradient(&p);
                assert!((s - f.signal(&p)).norm() < 1e-15);
                for (i, kind) in MapKind::ALL.into_iter().enumerate() {
                    let h = 1e-6 * p.get(kind).abs().max(1.0);
                    let mut hi = p;
                    hi.set(kind, p.get(kind) + h);
                    let mut lo = p;
                    lo.set(kind, p.get(kind) - h);
                    let fd = (f.signal(&hi) - f.signal(&lo)) / (2.0 * h);
                    assert!((fd - g[i]).norm() <= 1e-6 * (g[i].norm() + 1e-9), "{kind}: {fd} vs {}", g[i]);
                }
            }
        }
    }

    #[test]
    fn frame_ordering_and_counts() {
        let vfa = SequenceProtocol::vfa_megre_default();
        assert_eq!(vfa.n_frames(), 60);
        let f = vfa.frame(13);
        assert_eq!((f.preparation, f.echo), (1, 1));
        let t2ir = SequenceProtocol::t2ir_gre_default(20);
        assert_eq!(t2ir.n_frames(), 4 * 4 * 20);
        let f = t2ir.frame(4 * 20 + 4 * 3 + 2);
        assert_eq!((f.preparation, f.segment, f.echo), (1, 3, 2));
    }

    #[test]
    fn phantom_images_vanish_outside_mask_and_scale_with_a() {
        let gt = make_phantom::<f64>([16, 16, 8], 1).unwrap();
        let p = SequenceProtocol::vfa_megre_default();
        let iw = signal_vfa_megre(&gt, &p).unwrap();
        assert_eq!(iw.n_frames(), 60);
        for ((t, i, j, k), z) in iw.data.indexed_iter() {
            if !gt.brain_mask[[i, j, k]] {
                assert_eq!(*z, Complex::new(0.0, 0.0), "frame {t}");
            }
        }
        let mut doubled = gt.clone();
        doubled.maps.get_mut(MapKind::A).unwrap().mapv_inplace(|a| 3.0 * a);
        let iw3 = signal_vfa_megre(&doubled, &p).unwrap();
        for (a, b) in iw.data.iter().zip(iw3.data.iter()) {
            assert!((a * 3.0 - b).norm() <= 1e-15 * b.norm().max(1.0));
        }
        assert!(signal_t2ir_gre(&gt, &p).is_err());
    }

    #[test]
    fn rejects_nonpositive_relaxation_in_mask() {
        let mut gt = make_phantom::<f64>([8, 8, 8], 1).unwrap();
        gt.maps.get_mut(MapKind::T1).unwrap()[[4, 4, 4]] = 0.0;
        assert!(matches!(
            signal_vfa_megre(&gt, &SequenceProtocol::vfa_megre_default()),
            Err(Error::NonPhysical { .. })
        ));
    }

    #[test]
    fn dictionary_rows_and_errors() {
        let p = SequenceProtocol::vfa_megre_default();
        let grid = default_dictionary_grid(&p);
        let d: Array2<f64> = build_dictionary(&p, &grid).unwrap();
        assert_eq!(d.dim(), (285, 60));
        for row in d.rows() {
            assert!((row.dot(&row) - 1.0).abs() < 1e-12);
        }
        let one: Array2<f64> = build_dictionary(&p, &grid[..1]).unwrap();
        assert_eq!(one.nrows(), 1);
        let twin: Array2<f64> = build_dictionary(&p, &[grid[4], grid[4]]).unwrap();
        assert_eq!(twin.row(0), twin.row(1));
        let mut bad = grid[..3].to_vec();
        bad[2].t1 = -5.0;
        match build_dictionary::<f64>(&p, &bad) {
            Err(Error::InvalidDictionaryEntry { index, .. }) => assert_eq!(index, 2),
            other => panic!("expected invalid entry, got {other:?}"),
        }
        assert!(build_dictionary::<f64>(&p, &[]).is_err());
    }
}

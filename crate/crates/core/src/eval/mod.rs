//! Experiment configuration, error metrics and the simulate / reconstruct /
//! evaluate / plot pipeline.

mod figures;
mod pipeline;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use ndarray::Array3;
use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::acquisition::{MaskGeometry, MaskPattern};
use crate::baselines::AdmmConfig;
use crate::error::{Error, Result};
use crate::lorein::TrainConfig;
use crate::maps::MapKind;
use crate::phantom::CoilMaps;
use crate::scalar::Scalar;
use crate::signal::SequenceProtocol;

pub use figures::emit_figures;
pub use pipeline::{
    evaluate_results, load_cell_maps, load_estimated_coils, load_ground_truth, load_true_coils, r_label, reconstruct, run_experiment, simulate,
    CellFailure, ExperimentReport,
};

/// Root-mean-square error relative to the ground-truth norm inside `mask`,
/// after clamping both volumes to `clamp` when given.
pub fn nrmse<T: Scalar>(pred: &Array3<T>, gt: &Array3<T>, clamp: Option<(f64, f64)>, mask: &Array3<bool>) -> Result<f64> {
    if pred.shape() != gt.shape() || mask.shape() != gt.shape() {
        return Err(Error::Dimension(format!(
            "nrmse shapes differ: pred {:?}, gt {:?}, mask {:?}",
            pred.shape(),
            gt.shape(),
            mask.shape()
        )));
    }
    let c = |v: f64| clamp.map_or(v, |(lo, hi)| v.clamp(lo, hi));
    let (mut num, mut den) = (0.0, 0.0);
    for ((p, g), &m) in pred.iter().zip(gt).zip(mask) {
        if m {
            let (p, g) = (c(p.as_f64()), c(g.as_f64()));
            num += (p - g) * (p - g);
            den += g * g;
        }
    }
    if !(den > 0.0) {
        return Err(Error::InvalidParameter("ground truth has zero norm inside the mask".into()));
    }
    Ok((num / den).sqrt())
}

/// Relative error of estimated coil sensitivities inside `mask` after removing
/// the best single global phase.
pub fn coil_nrmse<T: Scalar>(pred: &CoilMaps<T>, gt: &CoilMaps<T>, mask: &Array3<bool>) -> Result<f64> {
    if pred.maps.shape() != gt.maps.shape() || mask.shape() != &gt.maps.shape()[1..] {
        return Err(Error::Dimension("coil map shapes differ".into()));
    }
    let inside: Vec<bool> = mask.iter().copied().collect();
    let n = inside.len();
    let pairs = || {
        pred.maps
            .iter()
            .zip(gt.maps.iter())
            .enumerate()
            .filter(|(i, _)| inside[i % n])
            .map(|(_, (p, g))| (Complex::new(p.re.as_f64(), p.im.as_f64()), Complex::new(g.re.as_f64(), g.im.as_f64())))
    };
    let cross: Complex<f64> = pairs().map(|(p, g)| p.conj() * g).sum();
    let rot = if cross.norm() > 0.0 { cross / cross.norm() } else { Complex::new(1.0, 0.0) };
    let (mut num, mut den) = (0.0, 0.0);
    for (p, g) in pairs() {
        num += (p * rot - g).norm_sqr();
        den += g.norm_sqr();
    }
    if !(den > 0.0) {
        return Err(Error::InvalidParameter("ground-truth coils vanish inside the mask".into()));
    }
    Ok((num / den).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lorein,
    ZeroFilled,
    LrtAdmm,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Lorein => "lorein",
            Method::ZeroFilled => "zero_filled",
            Method::LrtAdmm => "lrt_admm",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Method::Lorein, Method::ZeroFilled, Method::LrtAdmm]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub n_coils: usize,
    pub seed: u64,
    /// Keep only this many central slices after generation.
    pub crop_slices: Option<usize>,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            shape: [64, 64, 8],
            n_coils: 8,
            seed: 0,
            crop_slices: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskSpec {
    pub pattern: MaskPattern,
    pub r: Vec<f64>,
    /// Defaults to the experiment seed.
    pub seed: Option<u64>,
    pub calib_region: [usize; 3],
    pub geometry: MaskGeometry,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            pattern: MaskPattern::VariableDensity,
            r: vec![1.0, 12.0, 27.0, 48.0],
            seed: None,
            calib_region: [0, 0, 0],
            geometry: MaskGeometry::InPlane,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdmmSettings {
    pub config: AdmmConfig,
    /// Candidate TV weights relative to the peak magnitude of the adjoint
    /// reconstruction. The one giving the lowest mean map error is kept.
    pub lambda_grid: Vec<f64>,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        Self {
            config: AdmmConfig::default(),
            lambda_grid: vec![1e-4, 1e-3, 1e-2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub phantom: PhantomSpec,
    pub protocol: SequenceProtocol,
    pub mask: MaskSpec,
    /// Noise standard deviation as a fraction of the peak k-space magnitude.
    pub noise_sigma: f64,
    /// Temporal subspace rank.
    pub rank: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub lorein: TrainConfig,
    pub lrt_admm: AdmmSettings,
    pub output_dir: PathBuf,
    pub clamps: BTreeMap<MapKind, (f64, f64)>,
}

pub fn default_clamps() -> BTreeMap<MapKind, (f64, f64)> {
    BTreeMap::from([(MapKind::T1, (0.0, 3500.0)), (MapKind::T2, (0.0, 200.0)), (MapKind::T2s, (0.0, 100.0))])
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomSpec::default(),
            protocol: SequenceProtocol::vfa_megre_default(),
            mask: MaskSpec::default(),
            noise_sigma: 0.005,
            rank: 15,
            seed: 0,
            methods: vec![Method::Lorein, Method::ZeroFilled, Method::LrtAdmm],
            lorein: TrainConfig::dataset1(),
            lrt_admm: AdmmSettings::default(),
            output_dir: PathBuf::from("results"),
            clamps: default_clamps(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if self.mask.r.is_empty() {
            return Err(Error::Config("at least one acceleration factor is required".into()));
        }
        if self.mask.r.iter().any(|r| !(r.is_finite() && *r >= 1.0)) {
            return Err(Error::Config(format!("acceleration factors must be >= 1, got {:?}", self.mask.r)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise sigma must be >= 0".into()));
        }
        if self.phantom.n_coils == 0 || self.rank == 0 {
            return Err(Error::Config("coil count and rank must be positive".into()));
        }
        if let Some(keep) = self.phantom.crop_slices {
            if keep == 0 || keep > self.phantom.shape[2] {
                return Err(Error::Config(format!("cannot keep {keep} of {} slices", self.phantom.shape[2])));
            }
        }
        for (kind, &(lo, hi)) in &self.clamps {
            if !(lo < hi) {
                return Err(Error::Config(format!("empty clamp range for {kind}")));
            }
        }
        if self.methods.contains(&Method::LrtAdmm) && self.lrt_admm.lambda_grid.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config("ADMM lambda grid must be non-negative".into()));
        }
        self.protocol.validate()?;
        self.lorein.validate()?;
        self.lrt_admm.config.validate()
    }

    pub fn clamp(&self, kind: MapKind) -> Option<(f64, f64)> {
        self.clamps.get(&kind).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: Method,
    pub r: f64,
    pub map: MapKind,
    pub nrmse: f64,
    pub seconds: f64,
}

/// One row per (method, acceleration, map).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn get(&self, method: Method, r: f64, map: MapKind) -> Option<f64> {
        self.rows.iter().find(|row| row.method == method && row.r == r && row.map == map).map(|row| row.nrmse)
    }

    /// Error table without wall-clock times, so identical runs serialize
    /// identically.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,R,map,nrmse\n");
        for row in &self.rows {
            writeln!(out, "{},{},{},{:.17e}", row.method, row.r, row.map, row.nrmse).expect("string write");
        }
        out
    }

    pub fn timings_csv(&self) -> String {
        let mut out = String::from("method,R,seconds\n");
        let mut seen = Vec::new();
        for row in &self.rows {
            if !seen.contains(&(row.method, row.r.to_bits())) {
                seen.push((row.method, row.r.to_bits()));
                writeln!(out, "{},{},{:.3}", row.method, row.r, row.seconds).expect("string write");
            }
        }
        out
    }

    /// Parses the output of [`MetricsTable::to_csv`]; times read as zero.
    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |line: &str| Error::Format {
            path: "metrics.csv".into(),
            reason: format!("malformed row `{line}`"),
        };
        let mut rows = Vec::new();
        for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad(line));
            }
            rows.push(MetricsRow {
                method: f[0].parse()?,
                r: f[1].parse().map_err(|_| bad(line))?,
                map: f[2].parse()?,
                nrmse: f[3].parse().map_err(|_| bad(line))?,
                seconds: 0.0,
            });
        }
        Ok(Self { rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(shape: (usize, usize, usize)) -> Array3<bool> {
        Array3::from_elem(shape, true)
    }

    #[test]
    fn nrmse_basics() {
        let gt = Array3::from_elem((3, 3, 2), 700.0f64);
        let m = mask((3, 3, 2));
        assert_eq!(nrmse(&gt, &gt, None, &m).unwrap(), 0.0);
        let pred = gt.mapv(|v| 1.1 * v);
        assert!((nrmse(&pred, &gt, None, &m).unwrap() - 0.1).abs() < 1e-12);
        let zero = Array3::zeros((3, 3, 2));
        assert!(nrmse(&gt, &zero, None, &m).is_err());
        assert!(nrmse(&gt, &Array3::zeros((3, 3, 1)), None, &m).is_err());
    }

    #[test]
    fn clamped_values_do_not_count() {
        let mut gt = Array3::from_elem((2, 2, 2), 1000.0f64);
        let mut pred = gt.clone();
        gt[[0, 0, 0]] = 3800.0;
        pred[[0, 0, 0]] = 4200.0;
        let m = mask((2, 2, 2));
        assert_eq!(nrmse(&pred, &gt, Some((0.0, 3500.0)), &m).unwrap(), 0.0);
        assert!(nrmse(&pred, &gt, None, &m).unwrap() > 0.0);
    }

    #[test]
    fn nrmse_ignores_voxels_outside_mask() {
        let gt = Array3::from_elem((2, 2, 2), 5.0f64);
        let mut pred = gt.clone();
        pred[[1, 1, 1]] = 100.0;
        let mut m = mask((2, 2, 2));
        m[[1, 1, 1]] = false;
        assert_eq!(nrmse(&pred, &gt, None, &m).unwrap(), 0.0);
    }

    #[test]
    fn coil_error_ignores_global_phase() {
        let gt = crate::phantom::make_coil_maps::<f64>([8, 8, 4], 4, 3).unwrap();
        let rotated = CoilMaps {
            maps: gt.maps.mapv(|z| z * Complex::from_polar(1.0, 1.3)),
        };
        let m = mask((8, 8, 4));
        assert!(coil_nrmse(&rotated, &gt, &m).unwrap() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        let partial = ExperimentConfig::from_json(r#"{"methods": ["zero_filled"], "mask": {"r": [1]}}"#).unwrap();
        assert_eq!(partial.methods, vec![Method::ZeroFilled]);
        assert_eq!(partial.mask.pattern, MaskPattern::VariableDensity);
        assert!(ExperimentConfig::from_json(r#"{"methods": []}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"mask": {"r": []}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"methods": ["sense"]}"#).is_err());
    }

    #[test]
    fn metrics_csv_round_trip() {
        let table = MetricsTable {
            rows: vec![
                MetricsRow { method: Method::Lorein, r: 12.0, map: MapKind::T1, nrmse: 0.123456789, seconds: 3.0 },
                MetricsRow { method: Method::ZeroFilled, r: 27.0, map: MapKind::T2s, nrmse: 1.0 / 3.0, seconds: 1.0 },
            ],
        };
        let csv = table.to_csv();
        assert!(!csv.contains("seconds"));
        let back = MetricsTable::from_csv(&csv).unwrap();
        for (a, b) in back.rows.iter().zip(&table.rows) {
            assert_eq!((a.method, a.r, a.map, a.nrmse), (b.method, b.r, b.map, b.nrmse));
        }
    }
}

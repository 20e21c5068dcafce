use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use ndarray::{s, Array3, Array4, Ix3, Ix4};
use serde::{Deserialize, Serialize};

use super::{nrmse, ExperimentConfig, Method, MetricsRow, MetricsTable};
use crate::acquisition::{add_noise, forward, make_mask_with, EncodingOperator, KSpaceData, SamplingMask};
use crate::baselines::{fit_maps_nlls, recon_lrt_admm, recon_zero_filled};
use crate::error::{Error, Result};
use crate::io::{read_tensor, write_complex, write_complex_array, write_real_array};
use crate::lorein::train;
use crate::maps::{MapKind, ParametricMaps};
use crate::phantom::{make_coil_maps, make_phantom, CoilMaps, GroundTruth};
use crate::signal::{build_dictionary, default_dictionary_grid, simulate_weighted, SequenceProtocol};
use crate::subspace::{compose_weighted, temporal_basis, TemporalBasis};

type Real = f32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub method: Method,
    pub r: f64,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentReport {
    pub table: MetricsTable,
    pub failures: Vec<CellFailure>,
}

impl ExperimentReport {
    pub fn succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct CellInfo {
    seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    nonconverged: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda_tv: Option<f64>,
}

/// Directory-friendly label of an acceleration factor, e.g. `R12`.
pub fn r_label(r: f64) -> String {
    format!("R{r}")
}

pub(super) fn data_dir(out: &Path) -> PathBuf {
    out.join("data")
}

pub(super) fn cell_dir(out: &Path, method: Method, r: f64) -> PathBuf {
    out.join(method.name()).join(r_label(r))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_real<D: ndarray::Dimension>(stem: &Path) -> Result<ndarray::Array<f32, D>> {
    read_tensor(stem)?
        .into_real(stem)?
        .into_dimensionality::<D>()
        .map_err(|e| Error::Format {
            path: stem.display().to_string(),
            reason: e.to_string(),
        })
}

fn keep_slices<A: Clone>(a: &Array3<A>, start: usize, keep: usize) -> Array3<A> {
    a.slice(s![.., .., start..start + keep]).to_owned()
}

fn ground_truth(cfg: &ExperimentConfig) -> Result<GroundTruth<Real>> {
    let gt = make_phantom::<Real>(cfg.phantom.shape, cfg.phantom.seed)?;
    let Some(keep) = cfg.phantom.crop_slices else {
        return Ok(gt);
    };
    let start = (cfg.phantom.shape[2] - keep) / 2;
    let mut maps = ParametricMaps::new([cfg.phantom.shape[0], cfg.phantom.shape[1], keep]);
    for (kind, map) in gt.maps.iter() {
        maps.insert(kind, keep_slices(map, start, keep))?;
    }
    Ok(GroundTruth {
        maps,
        brain_mask: keep_slices(&gt.brain_mask, start, keep),
        region_labels: keep_slices(&gt.region_labels, start, keep),
    })
}

fn mask_seed(cfg: &ExperimentConfig, ri: usize) -> u64 {
    cfg.mask.seed.unwrap_or(cfg.seed).wrapping_add(ri as u64)
}

/// Generates the phantom, coils, masks and noisy k-space for every
/// acceleration factor and writes them under `<out>/data`.
pub fn simulate(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    let data = data_dir(out);
    fs::create_dir_all(&data)?;
    write_json(&out.join("config.json"), cfg)?;
    let gt = ground_truth(cfg)?;
    let shape = gt.shape();
    let iw = simulate_weighted(&gt, &cfg.protocol)?;
    let coils = make_coil_maps::<Real>(shape, cfg.phantom.n_coils, cfg.phantom.seed)?;
    for &kind in cfg.protocol.required_maps() {
        write_real_array(&data.join(format!("gt_{kind}")), gt.maps.require(kind)?, &["x", "y", "z"])?;
    }
    write_real_array(&data.join("brain_mask"), &gt.brain_mask.mapv(|m| if m { 1.0f32 } else { 0.0 }), &["x", "y", "z"])?;
    write_complex_array(&data.join("coils"), &coils.maps, &["coil", "x", "y", "z"])?;
    let frames = cfg.protocol.n_frames();
    for (ri, &r) in cfg.mask.r.iter().enumerate() {
        let mask = make_mask_with(
            [shape[0], shape[1], shape[2], frames],
            cfg.mask.pattern,
            r,
            cfg.mask.calib_region,
            mask_seed(cfg, ri),
            cfg.mask.geometry,
        )?;
        let mask = Arc::new(mask);
        let clean = forward(&iw, &coils, &mask)?;
        let sigma = cfg.noise_sigma * clean.max_abs() as f64;
        let ks = add_noise(&clean, sigma, cfg.seed.wrapping_add(1_000 + ri as u64))?;
        let dir = data.join(r_label(r));
        fs::create_dir_all(&dir)?;
        write_real_array(&dir.join("mask"), &mask.mask.mapv(|m| if m { 1.0f32 } else { 0.0 }), &["frame", "kx", "ky", "kz"])?;
        let per_coil = ks.values().len() / ks.n_coils;
        write_complex(&dir.join("kspace"), &[ks.n_coils, per_coil], &["coil", "sample"], ks.values())?;
        log::info!("simulated {} (noise sigma {sigma:.3e})", r_label(r));
    }
    Ok(())
}

struct Inputs {
    ks: KSpaceData<Real>,
    coils: CoilMaps<Real>,
}

fn load_coils(out: &Path) -> Result<CoilMaps<Real>> {
    Ok(CoilMaps {
        maps: read_tensor(&data_dir(out).join("coils"))?
            .into_complex(&data_dir(out).join("coils"))?
            .into_dimensionality::<Ix4>()
            .map_err(|e| Error::Format {
                path: "coils".into(),
                reason: e.to_string(),
            })?,
    })
}

fn load_inputs(cfg: &ExperimentConfig, ri: usize) -> Result<Inputs> {
    let out = &cfg.output_dir;
    let dir = data_dir(out).join(r_label(cfg.mask.r[ri]));
    let mask: Array4<f32> = read_real(&dir.join("mask"))?;
    let mask = SamplingMask::from_mask(mask.mapv(|v| v != 0.0), cfg.mask.pattern, mask_seed(cfg, ri), cfg.mask.calib_region)?;
    let coils = load_coils(out)?;
    let stem = dir.join("kspace");
    let values = read_tensor(&stem)?.into_complex(&stem)?;
    let mut ks = KSpaceData::zeros(Arc::new(mask), cfg.protocol.clone(), coils.n_coils());
    if values.len() != ks.values().len() {
        return Err(Error::Format {
            path: stem.display().to_string(),
            reason: format!("expected {} samples, found {}", ks.values().len(), values.len()),
        });
    }
    ks.values_mut().iter_mut().zip(values.iter()).for_each(|(d, s)| *d = *s);
    Ok(Inputs { ks, coils })
}

struct Truth {
    maps: ParametricMaps<Real>,
    mask: Array3<bool>,
}

fn load_truth(out: &Path, protocol: &SequenceProtocol) -> Result<Truth> {
    let data = data_dir(out);
    let mask: Array3<f32> = read_real(&data.join("brain_mask"))?;
    let mut maps = ParametricMaps::new(mask.dim().into());
    for &kind in protocol.required_maps() {
        maps.insert(kind, read_real::<Ix3>(&data.join(format!("gt_{kind}")))?)?;
    }
    Ok(Truth {
        maps,
        mask: mask.mapv(|v| v != 0.0),
    })
}

fn write_maps(dir: &Path, maps: &ParametricMaps<Real>, kinds: &[MapKind]) -> Result<()> {
    for &kind in kinds {
        write_real_array(&dir.join(kind.name()), maps.require(kind)?, &["x", "y", "z"])?;
    }
    Ok(())
}

fn load_maps(dir: &Path, kinds: &[MapKind]) -> Result<ParametricMaps<Real>> {
    let mut maps: Option<ParametricMaps<Real>> = None;
    for &kind in kinds {
        let map: Array3<f32> = read_real(&dir.join(kind.name()))?;
        let m = maps.get_or_insert_with(|| ParametricMaps::new(map.dim().into()));
        m.insert(kind, map)?;
    }
    maps.ok_or_else(|| Error::MissingArtifact(format!("{}: no maps", dir.display())))
}

fn temporal(cfg: &ExperimentConfig) -> Result<TemporalBasis<Real>> {
    let dict = build_dictionary::<f64>(&cfg.protocol, &default_dictionary_grid(&cfg.protocol))?;
    Ok(temporal_basis(&dict, cfg.rank)?.cast())
}

/// Mean clamped error over the reconstructed maps, used to pick the ADMM
/// regularization weight.
fn mean_error(cfg: &ExperimentConfig, maps: &ParametricMaps<Real>, truth: &Truth) -> Result<f64> {
    let kinds = cfg.protocol.required_maps();
    let mut total = 0.0;
    for &kind in kinds {
        total += nrmse(maps.require(kind)?, truth.maps.require(kind)?, cfg.clamp(kind), &truth.mask)?;
    }
    Ok(total / kinds.len() as f64)
}

fn run_cell(cfg: &ExperimentConfig, method: Method, ri: usize, phi: &TemporalBasis<Real>, truth: &Truth, dir: &Path) -> Result<CellInfo> {
    let inputs = load_inputs(cfg, ri)?;
    let kinds = cfg.protocol.required_maps();
    let start = Instant::now();
    let mut info = CellInfo::default();
    match method {
        Method::ZeroFilled => {
            let iw = recon_zero_filled(&inputs.ks, &inputs.coils, phi)?;
            let fit = fit_maps_nlls(&iw, &cfg.protocol, None, Some(&truth.mask))?;
            info.nonconverged = Some(fit.nonconverged);
            write_maps(dir, &fit.maps, kinds)?;
        }
        Method::LrtAdmm => {
            let aty = EncodingOperator::new(&inputs.ks.mask).adjoint_subspace(&inputs.ks, &phi.phi, &inputs.coils)?;
            let peak = aty.iter().map(|z| z.norm() as f64).fold(0.0, f64::max);
            let mut best: Option<(f64, f64, ParametricMaps<Real>, usize)> = None;
            let mut search = String::from("lambda_rel,lambda_tv,iterations,mean_nrmse\n");
            for &rel in &cfg.lrt_admm.lambda_grid {
                let admm = crate::baselines::AdmmConfig {
                    lambda_tv: rel * peak,
                    ..cfg.lrt_admm.config
                };
                let (u, trace) = match recon_lrt_admm(&inputs.ks, &inputs.coils, phi, &admm) {
                    Ok(res) => res,
                    Err(e) => {
                        log::warn!("ADMM at lambda {rel:e} failed: {e}");
                        search.push_str(&format!("{rel:e},{:e},,failed\n", admm.lambda_tv));
                        continue;
                    }
                };
                let iw = compose_weighted(&u, phi, &cfg.protocol)?;
                let fit = fit_maps_nlls(&iw, &cfg.protocol, None, Some(&truth.mask))?;
                let score = mean_error(cfg, &fit.maps, truth)?;
                search.push_str(&format!("{rel:e},{:e},{},{score:.17e}\n", admm.lambda_tv, trace.len()));
                if best.as_ref().is_none_or(|b| score < b.0) {
                    best = Some((score, admm.lambda_tv, fit.maps, fit.nonconverged));
                }
            }
            fs::write(dir.join("lambda_search.csv"), search)?;
            let (_, lambda, maps, nonconverged) = best.ok_or_else(|| Error::Config("every ADMM lambda failed".into()))?;
            info.lambda_tv = Some(lambda);
            info.nonconverged = Some(nonconverged);
            write_maps(dir, &maps, kinds)?;
        }
        Method::Lorein => {
            let mut tc = cfg.lorein.clone();
            tc.seed = cfg.seed;
            if tc.checkpoint_every.is_some() && tc.checkpoint_dir.is_none() {
                tc.checkpoint_dir = Some(dir.join("checkpoints"));
            }
            let res = train(&inputs.ks, phi, &cfg.protocol, &tc)?;
            write_maps(dir, &res.maps, kinds)?;
            write_complex_array(&dir.join("coils"), &res.coil_maps.maps, &["coil", "x", "y", "z"])?;
            write_complex_array(&dir.join("spatial_bases"), &res.spatial_bases.u, &["basis", "x", "y", "z"])?;
            let mut trace = String::from("epoch,stage,dc1,dc2,prior,wnnm,total,learning_rate\n");
            for r in &res.loss_trace {
                trace.push_str(&format!(
                    "{},{},{:e},{:e},{:e},{:e},{:e},{:e}\n",
                    r.epoch, r.stage, r.dc1, r.dc2, r.prior, r.wnnm, r.total, r.learning_rate
                ));
            }
            fs::write(dir.join("loss.csv"), trace)?;
        }
    }
    info.seconds = start.elapsed().as_secs_f64();
    Ok(info)
}

/// Reconstructs every configured (method, R) cell, optionally restricted to
/// one method and one factor. A failing cell leaves an `error.txt` in its
/// directory and does not stop the others.
pub fn reconstruct(cfg: &ExperimentConfig, only_method: Option<Method>, only_r: Option<f64>) -> Result<Vec<CellFailure>> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    let truth = load_truth(out, &cfg.protocol)?;
    let phi = temporal(cfg)?;
    let mut failures = Vec::new();
    for &method in cfg.methods.iter().filter(|m| only_method.is_none_or(|o| o == **m)) {
        for (ri, &r) in cfg.mask.r.iter().enumerate().filter(|(_, r)| only_r.is_none_or(|o| o == **r)) {
            let dir = cell_dir(out, method, r);
            if dir.exists() {
                fs::remove_dir_all(&dir)?;
            }
            fs::create_dir_all(&dir)?;
            log::info!("reconstructing {method} at {}", r_label(r));
            match run_cell(cfg, method, ri, &phi, &truth, &dir) {
                Ok(info) => write_json(&dir.join("cell.json"), &info)?,
                Err(e) => {
                    log::error!("{method} at {} failed: {e}", r_label(r));
                    fs::write(dir.join("error.txt"), format!("{e}\n"))?;
                    failures.push(CellFailure {
                        method,
                        r,
                        message: e.to_string(),
                    });
                }
            }
        }
    }
    Ok(failures)
}

/// Scores every reconstructed cell against the ground truth and writes
/// `metrics.csv` and `timings.csv` into the output directory.
pub fn evaluate_results(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    let truth = load_truth(out, &cfg.protocol)?;
    let kinds = cfg.protocol.required_maps();
    let mut report = ExperimentReport::default();
    for &method in &cfg.methods {
        for &r in &cfg.mask.r {
            let dir = cell_dir(out, method, r);
            let scored = (|| -> Result<Vec<MetricsRow>> {
                if let Ok(msg) = fs::read_to_string(dir.join("error.txt")) {
                    return Err(Error::Config(msg.trim().to_string()));
                }
                let info: CellInfo = serde_json::from_str(
                    &fs::read_to_string(dir.join("cell.json")).map_err(|_| Error::MissingArtifact(dir.join("cell.json").display().to_string()))?,
                )?;
                let maps = load_maps(&dir, kinds)?;
                kinds
                    .iter()
                    .map(|&kind| {
                        Ok(MetricsRow {
                            method,
                            r,
                            map: kind,
                            nrmse: nrmse(maps.require(kind)?, truth.maps.require(kind)?, cfg.clamp(kind), &truth.mask)?,
                            seconds: info.seconds,
                        })
                    })
                    .collect()
            })();
            match scored {
                Ok(rows) => report.table.rows.extend(rows),
                Err(e) => report.failures.push(CellFailure {
                    method,
                    r,
                    message: e.to_string(),
                }),
            }
        }
    }
    fs::write(out.join("metrics.csv"), report.table.to_csv())?;
    fs::write(out.join("timings.csv"), report.table.timings_csv())?;
    Ok(report)
}

/// Simulation, every reconstruction, and scoring, in that order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    simulate(cfg)?;
    let recon_failures = reconstruct(cfg, None, None)?;
    let mut report = evaluate_results(cfg)?;
    // evaluation reports failed cells too; keep the reconstruction message
    for f in recon_failures {
        if let Some(existing) = report.failures.iter_mut().find(|e| e.method == f.method && e.r == f.r) {
            existing.message = f.message;
        }
    }
    Ok(report)
}

/// Coil sensitivities estimated by LoREIN for factor `r`.
pub fn load_estimated_coils(out: &Path, r: f64) -> Result<CoilMaps<Real>> {
    let stem = cell_dir(out, Method::Lorein, r).join("coils");
    Ok(CoilMaps {
        maps: read_tensor(&stem)?.into_complex(&stem)?.into_dimensionality::<Ix4>().map_err(|e| Error::Format {
            path: stem.display().to_string(),
            reason: e.to_string(),
        })?,
    })
}

/// Ground-truth coil sensitivities written by [`simulate`].
pub fn load_true_coils(out: &Path) -> Result<CoilMaps<Real>> {
    load_coils(out)
}

/// Ground-truth maps for `protocol` and the brain mask written by [`simulate`].
pub fn load_ground_truth(out: &Path, protocol: &SequenceProtocol) -> Result<(ParametricMaps<Real>, Array3<bool>)> {
    let t = load_truth(out, protocol)?;
    Ok((t.maps, t.mask))
}

/// Reconstructed maps of one cell.
pub fn load_cell_maps(out: &Path, method: Method, r: f64, kinds: &[MapKind]) -> Result<ParametricMaps<Real>> {
    load_maps(&cell_dir(out, method, r), kinds)
}

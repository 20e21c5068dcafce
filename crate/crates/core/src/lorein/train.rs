//! Joint training of both blocks.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ndarray::{Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use num_complex::Complex;
use serde::{Deserialize, Serialize};

use super::losses::{wnnm_value_and_gradient, LossWeights};
use super::model::{lrr_forward, lrr_output_gradients, pmr_forward, pmr_output_gradients, LrrOutputGrads, LrrState, PmrState};
use crate::acquisition::{kspace_difference, EncodingOperator, KSpaceData};
use crate::error::{Error, Result};
use crate::maps::{MapKind, ParametricMaps};
use crate::neural_fields::{coordinate_grid, Adam, Coord, NeuralField};
use crate::phantom::CoilMaps;
use crate::scalar::Scalar;
use crate::signal::{FrameConsts, SequenceProtocol, TissueParams, WeightedImages};
use crate::subspace::{compose_raw, project_raw, SpatialBases, TemporalBasis};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Epochs of the LRR block alone on the first data-consistency term.
    pub pretrain_epochs: usize,
    /// Joint epochs after pretraining.
    pub epochs: usize,
    pub learning_rate: f64,
    /// The learning rate halves after this many joint epochs.
    pub halve_every: usize,
    pub weights: LossWeights,
    pub seed: u64,
    /// Write parameter checkpoints every this many epochs into `checkpoint_dir`.
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::dataset1()
    }
}

impl TrainConfig {
    /// 200 joint epochs, halving every 80.
    pub fn dataset1() -> Self {
        Self {
            pretrain_epochs: 20,
            epochs: 200,
            learning_rate: 1e-3,
            halve_every: 80,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: None,
            checkpoint_dir: None,
        }
    }

    /// 80 joint epochs, halving every 20.
    pub fn dataset2() -> Self {
        Self {
            epochs: 80,
            halve_every: 20,
            ..Self::dataset1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.learning_rate > 0.0) || self.halve_every == 0 {
            return Err(Error::Config("learning rate and halving period must be positive".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint period must be positive".into()));
        }
        Ok(())
    }

    fn learning_rate_at(&self, joint_epoch: usize) -> f64 {
        self.learning_rate * 0.5f64.powi((joint_epoch / self.halve_every) as i32)
    }
}

/// Loss terms of one epoch, evaluated before that epoch's update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    /// 1 for pretraining, 2 for joint training.
    pub stage: u8,
    pub dc1: f64,
    pub dc2: f64,
    pub prior: f64,
    pub wnnm: f64,
    pub total: f64,
    pub learning_rate: f64,
}

#[derive(Clone, Debug)]
pub struct ReconResult<T: Scalar> {
    pub maps: ParametricMaps<T>,
    pub weighted_lrr: WeightedImages<T>,
    pub weighted_pmr: WeightedImages<T>,
    pub coil_maps: CoilMaps<T>,
    pub spatial_bases: SpatialBases<T>,
    pub loss_trace: Vec<LossRecord>,
    pub epochs_run: usize,
}

/// Both blocks together.
#[derive(Clone, Debug)]
pub struct LoreinModel<T: Scalar> {
    pub lrr: LrrState<T>,
    pub pmr: PmrState<T>,
}

impl<T: Scalar> LoreinModel<T> {
    pub fn new(shape: [usize; 3], rank: usize, n_coils: usize, protocol: &SequenceProtocol, a_unit: f64, seed: u64) -> Result<Self> {
        Ok(Self {
            lrr: LrrState::new(shape, rank, n_coils, seed)?,
            pmr: PmrState::new(shape, protocol, a_unit, seed)?,
        })
    }
}

/// Coordinates per optimizer step.
pub const COORD_BATCH: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Stage {
    Pretrain,
    Joint,
}

/// A normalized reconstruction problem on a fixed grid.
pub(crate) struct Problem<T: Scalar> {
    pub ks: KSpaceData<T>,
    pub phi: Array2<T>,
    pub protocol: SequenceProtocol,
    pub shape: [usize; 3],
    pub coords: Vec<Coord<T>>,
}

impl<T: Scalar> Problem<T> {
    pub fn new(ks: KSpaceData<T>, phi: &TemporalBasis<T>, protocol: &SequenceProtocol) -> Result<Self> {
        protocol.validate()?;
        if phi.n_frames() != ks.mask.n_frames() || protocol.n_frames() != ks.mask.n_frames() {
            return Err(Error::ShapeMismatch {
                axis: "frame",
                expected: ks.mask.n_frames(),
                got: phi.n_frames(),
            });
        }
        let shape = ks.mask.shape();
        Ok(Self {
            coords: coordinate_grid(shape)?,
            ks,
            phi: phi.phi.clone(),
            protocol: protocol.clone(),
            shape,
        })
    }
}

/// Loss gradients with respect to the outputs of every field, and the
/// refiner's parameter gradient. Map fields are absent during pretraining.
pub(crate) struct OutputGrads<T> {
    pub lrr: LrrOutputGrads<T>,
    pub maps: BTreeMap<MapKind, Array2<T>>,
}

pub(crate) struct Evaluation<T: Scalar> {
    pub record: LossRecord,
    pub grads: Option<OutputGrads<T>>,
}

fn scale_array<T: Scalar>(a: &mut Array4<Complex<T>>, w: f64) {
    let w = T::lit(w);
    a.mapv_inplace(|z| z.scale(w));
}

/// Loss terms and, optionally, parameter gradients of the weighted objective
/// `w1 DC1 + w2 DC2 + wp prior + sum_i lambda_i WNNM_i`. Pretraining uses the
/// first term only.
pub(crate) fn evaluate<T: Scalar>(
    model: &LoreinModel<T>,
    problem: &Problem<T>,
    weights: &LossWeights,
    stage: Stage,
    want_grad: bool,
) -> Result<Evaluation<T>> {
    let op = EncodingOperator::new(&problem.ks.mask);
    let lrr = lrr_forward(&model.lrr, &problem.coords, problem.shape)?;
    let pred1 = op.forward_subspace(&lrr.u, &problem.phi, &lrr.coils, &problem.protocol)?;
    let r1 = kspace_difference(&problem.ks, &pred1)?;
    let dc1 = r1.norm_sqr().as_f64();
    let mut record = LossRecord {
        epoch: 0,
        stage: if stage == Stage::Pretrain { 1 } else { 2 },
        dc1,
        dc2: 0.0,
        prior: 0.0,
        wnnm: 0.0,
        total: weights.dc1_weight * dc1,
        learning_rate: 0.0,
    };
    let (mut g_u, mut g_c) = if want_grad {
        let (gu, gc) = op.subspace_residual_gradients(&r1, &lrr.u, &problem.phi, &lrr.coils, true)?;
        let (mut gu, mut gc) = (gu, gc.expect("coil gradient"));
        scale_array(&mut gu, weights.dc1_weight);
        scale_array(&mut gc, weights.dc1_weight);
        (Some(gu), Some(gc))
    } else {
        (None, None)
    };
    if stage == Stage::Pretrain {
        let grads = match (g_u, g_c) {
            (Some(gu), Some(gc)) => Some(OutputGrads {
                lrr: lrr_output_gradients(&model.lrr, &lrr, &gu, &gc)?,
                maps: BTreeMap::new(),
            }),
            _ => None,
        };
        return Ok(Evaluation { record, grads });
    }

    let pmr = pmr_forward(&model.pmr, &problem.coords, problem.shape, &problem.protocol)?;
    let r2 = kspace_difference(&problem.ks, &op.forward_images(&pmr.images, &lrr.coils, &problem.protocol)?)?;
    record.dc2 = r2.norm_sqr().as_f64();
    let lrr_images = compose_raw(&lrr.u, &problem.phi)?;
    let diff = &lrr_images - &pmr.images;
    record.prior = diff.iter().map(|z| z.norm_sqr().as_f64()).sum();
    let (wnnm, g_maps) = wnnm_value_and_gradient(&pmr.maps, weights, want_grad)?;
    record.wnnm = wnnm;
    record.total += weights.dc2_weight * record.dc2 + weights.prior_weight * record.prior + wnnm;

    let grads = if let (Some(gu), Some(gc)) = (g_u.as_mut(), g_c.as_mut()) {
        let (mut g_img, g_c2) = op.residual_gradients(&r2, &pmr.images, &lrr.coils, true)?;
        let mut g_c2 = g_c2.expect("coil gradient");
        scale_array(&mut g_img, weights.dc2_weight);
        scale_array(&mut g_c2, weights.dc2_weight);
        *gc += &g_c2;
        // d prior / d (Phi^T U) = 2 diff, d prior / d I_pmr = -2 diff
        let mut g_diff = diff;
        scale_array(&mut g_diff, 2.0 * weights.prior_weight);
        *gu += &project_raw(&g_diff, &problem.phi)?;
        g_img -= &g_diff;
        Some(OutputGrads {
            lrr: lrr_output_gradients(&model.lrr, &lrr, gu, gc)?,
            maps: pmr_output_gradients(&model.pmr, &pmr, &problem.protocol, Some(&g_img), &g_maps)?,
        })
    } else {
        None
    };
    Ok(Evaluation { record, grads })
}

/// Parameter gradient of the objective, grouped like the model.
#[derive(Clone, Debug)]
pub struct ModelGradient<T> {
    pub basis_field: Vec<T>,
    pub refiner: Vec<T>,
    pub coil_field: Vec<T>,
    /// Empty when only the first data-consistency term is evaluated.
    pub map_fields: BTreeMap<MapKind, Vec<T>>,
}

/// Objective terms of `model` against `ks` as given (no training rescale).
/// With `joint == false` only the first data-consistency term is active.
pub fn objective<T: Scalar>(
    model: &LoreinModel<T>,
    ks: &KSpaceData<T>,
    phi: &TemporalBasis<T>,
    protocol: &SequenceProtocol,
    weights: &LossWeights,
    joint: bool,
) -> Result<LossRecord> {
    let problem = Problem::new(ks.clone(), phi, protocol)?;
    let stage = if joint { Stage::Joint } else { Stage::Pretrain };
    Ok(evaluate(model, &problem, weights, stage, false)?.record)
}

/// [`objective`] together with its gradient for every parameter group.
pub fn objective_gradient<T: Scalar>(
    model: &LoreinModel<T>,
    ks: &KSpaceData<T>,
    phi: &TemporalBasis<T>,
    protocol: &SequenceProtocol,
    weights: &LossWeights,
    joint: bool,
) -> Result<(LossRecord, ModelGradient<T>)> {
    let problem = Problem::new(ks.clone(), phi, protocol)?;
    let stage = if joint { Stage::Joint } else { Stage::Pretrain };
    let eval = evaluate(model, &problem, weights, stage, true)?;
    let g = eval.grads.expect("gradients requested");
    let field_grad = |field: &NeuralField<T>, dout: &Array2<T>| -> Result<Vec<T>> {
        let mut out = vec![T::zero(); field.n_params()];
        field.backward(&problem.coords, dout.view(), &mut out)?;
        Ok(out)
    };
    let mut map_fields = BTreeMap::new();
    for (kind, dout) in &g.maps {
        map_fields.insert(*kind, field_grad(&model.pmr.fields[kind], dout)?);
    }
    Ok((
        eval.record,
        ModelGradient {
            basis_field: field_grad(&model.lrr.basis_field, &g.lrr.basis)?,
            refiner: g.lrr.refiner,
            coil_field: field_grad(&model.lrr.coil_field, &g.lrr.coil)?,
            map_fields,
        },
    ))
}

struct Optimizers<T> {
    basis: Adam<T>,
    refiner: Adam<T>,
    coil: Adam<T>,
    maps: BTreeMap<MapKind, Adam<T>>,
}

impl<T: Scalar> Optimizers<T> {
    fn new(model: &LoreinModel<T>) -> Self {
        Self {
            basis: Adam::new(model.lrr.basis_field.n_params()),
            refiner: Adam::new(model.lrr.refiner.n_params()),
            coil: Adam::new(model.lrr.coil_field.n_params()),
            maps: model.pmr.fields.iter().map(|(&k, f)| (k, Adam::new(f.n_params()))).collect(),
        }
    }

    /// One pass over the grid in shuffled coordinate batches. Every batch
    /// backpropagates its rows of the epoch's output gradients through fresh
    /// field evaluations and takes an Adam step; the refiner, which sees the
    /// whole volume, steps once with the first batch.
    fn epoch(&mut self, model: &mut LoreinModel<T>, coords: &[Coord<T>], grads: &OutputGrads<T>, lr: f64, rng: &mut ChaCha8Rng) -> Result<()> {
        self.refiner.update(model.lrr.refiner.params_mut(), &grads.lrr.refiner, lr);
        let mut order: Vec<usize> = (0..coords.len()).collect();
        order.shuffle(rng);
        for batch in order.chunks(COORD_BATCH) {
            let xs: Vec<Coord<T>> = batch.iter().map(|&i| coords[i]).collect();
            let rows = |g: &Array2<T>| g.select(Axis(0), batch);
            step_field(&mut model.lrr.basis_field, &mut self.basis, &xs, &rows(&grads.lrr.basis), lr)?;
            step_field(&mut model.lrr.coil_field, &mut self.coil, &xs, &rows(&grads.lrr.coil), lr)?;
            for (kind, g) in &grads.maps {
                let field = model.pmr.fields.get_mut(kind).expect("field exists");
                step_field(field, self.maps.get_mut(kind).expect("optimizer exists"), &xs, &rows(g), lr)?;
            }
        }
        Ok(())
    }
}

fn step_field<T: Scalar>(field: &mut NeuralField<T>, opt: &mut Adam<T>, coords: &[Coord<T>], dout: &Array2<T>, lr: f64) -> Result<()> {
    let mut grad = vec![T::zero(); field.n_params()];
    field.backward(coords, dout.view(), &mut grad)?;
    opt.update(field.params_mut(), &grad, lr);
    Ok(())
}

/// Scale that brings the expected spatial-basis magnitude to order one. For an
/// undersampled unitary encoding `||y||^2 ~ ||I||^2 / R`.
fn data_scale<T: Scalar>(ks: &KSpaceData<T>) -> f64 {
    let n_total = ks.mask.n_total() as f64;
    let r = n_total / ks.mask.n_sampled() as f64;
    let voxels: usize = ks.mask.shape().iter().product();
    let norm = ks.norm_sqr().as_f64().sqrt() * r.sqrt();
    if norm > 0.0 {
        0.5 * (voxels as f64).sqrt() / norm
    } else {
        1.0
    }
}

/// Initial amplitude unit: a brain voxel covering about half the volume with
/// typical relaxation times matches the expected basis magnitude.
fn amplitude_unit(protocol: &SequenceProtocol) -> f64 {
    let p = TissueParams {
        a: 1.0,
        b: 0.95,
        t1: 1000.0,
        t2: 100.0,
        t2s: 50.0,
        phi0: 0.0,
        freq: 0.0,
    };
    let energy: f64 = FrameConsts::<f64>::for_protocol(protocol).iter().map(|f| f.signal(&p).norm_sqr()).sum();
    0.5 * std::f64::consts::SQRT_2 / energy.sqrt()
}

fn write_checkpoint<T: Scalar>(model: &LoreinModel<T>, dir: &std::path::Path, epoch: usize) -> Result<()> {
    let dir = dir.join(format!("epoch_{epoch:04}"));
    std::fs::create_dir_all(&dir)?;
    let save = |name: &str, params: &[T]| {
        let data: Vec<f32> = params.iter().map(|p| p.as_f64() as f32).collect();
        crate::io::write_real(&dir.join(name), &[data.len()], &["parameter"], &data)
    };
    save("basis_field", model.lrr.basis_field.params())?;
    save("refiner", model.lrr.refiner.params())?;
    save("coil_field", model.lrr.coil_field.params())?;
    for (kind, field) in &model.pmr.fields {
        save(&format!("{kind}_field"), field.params())?;
    }
    Ok(())
}

/// Fits both blocks to `ks`: pretraining of the LRR block on the first
/// data-consistency term, then joint training on the full objective. Each
/// epoch evaluates the objective on the whole grid and then steps through it
/// in shuffled batches of [`COORD_BATCH`] coordinates.
pub fn train<T: Scalar>(ks: &KSpaceData<T>, phi: &TemporalBasis<T>, protocol: &SequenceProtocol, cfg: &TrainConfig) -> Result<ReconResult<T>> {
    cfg.validate()?;
    let scale = data_scale(ks);
    let problem = Problem::new(ks.scaled(T::lit(scale)), phi, protocol)?;
    let mut model = LoreinModel::new(problem.shape, phi.rank(), ks.n_coils, protocol, amplitude_unit(protocol), cfg.seed)?;
    train_model(&mut model, &problem, cfg, scale)
}

pub(crate) fn train_model<T: Scalar>(model: &mut LoreinModel<T>, problem: &Problem<T>, cfg: &TrainConfig, scale: f64) -> Result<ReconResult<T>> {
    let mut opt = Optimizers::new(model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_BA7C);
    let mut trace = Vec::with_capacity(cfg.pretrain_epochs + cfg.epochs);
    let total_epochs = cfg.pretrain_epochs + cfg.epochs;
    for epoch in 0..total_epochs {
        let (stage, lr) = if epoch < cfg.pretrain_epochs {
            (Stage::Pretrain, cfg.learning_rate)
        } else {
            (Stage::Joint, cfg.learning_rate_at(epoch - cfg.pretrain_epochs))
        };
        let eval = evaluate(model, problem, &cfg.weights, stage, true)?;
        let mut record = eval.record;
        record.epoch = epoch;
        record.learning_rate = lr;
        if !record.total.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: record.total,
            });
        }
        if epoch % 10 == 0 {
            log::info!(
                "epoch {epoch}: total {:.4e} dc1 {:.4e} dc2 {:.4e} prior {:.4e} wnnm {:.4e}",
                record.total,
                record.dc1,
                record.dc2,
                record.prior,
                record.wnnm
            );
        }
        trace.push(record);
        opt.epoch(model, &problem.coords, eval.grads.as_ref().expect("gradients requested"), lr, &mut rng)?;
        if let (Some(every), Some(dir)) = (cfg.checkpoint_every, cfg.checkpoint_dir.as_ref()) {
            if (epoch + 1) % every == 0 {
                write_checkpoint(model, dir, epoch + 1)?;
            }
        }
    }
    finish(model, problem, trace, scale)
}

fn finish<T: Scalar>(model: &LoreinModel<T>, problem: &Problem<T>, loss_trace: Vec<LossRecord>, scale: f64) -> Result<ReconResult<T>> {
    let lrr = lrr_forward(&model.lrr, &problem.coords, problem.shape)?;
    let pmr = pmr_forward(&model.pmr, &problem.coords, problem.shape, &problem.protocol)?;
    let inv = T::lit(1.0 / scale);
    let mut maps = pmr.maps;
    if let Some(a) = maps.get_mut(MapKind::A) {
        a.mapv_inplace(|v| v * inv);
    }
    let u = lrr.u.mapv(|z| z.scale(inv));
    let weighted_lrr = WeightedImages::new(compose_raw(&u, &problem.phi)?, problem.protocol.clone())?;
    let weighted_pmr = WeightedImages::new(pmr.images.mapv(|z| z.scale(inv)), problem.protocol.clone())?;
    Ok(ReconResult {
        maps,
        weighted_lrr,
        weighted_pmr,
        coil_maps: lrr.coils,
        spatial_bases: SpatialBases { u },
        epochs_run: loss_trace.len(),
        loss_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::{forward, make_mask, MaskPattern};
    use crate::lorein::losses::{loss_dc, loss_prior, loss_wnnm};
    use crate::phantom::{make_coil_maps, make_phantom};
    use crate::signal::simulate_weighted;
    use crate::subspace::temporal_basis;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    /// A small two-coil problem on an 8x8x8 grid with a short protocol.
    fn small_problem(seed: u64) -> (LoreinModel<f64>, Problem<f64>) {
        let shape = [8, 8, 8];
        let protocol = SequenceProtocol {
            te_ms: vec![2.15, 5.2, 8.25],
            flip_deg: vec![5.0, 20.0],
            ..SequenceProtocol::vfa_megre_default()
        };
        let gt = make_phantom::<f64>(shape, seed).unwrap();
        let iw = simulate_weighted(&gt, &protocol).unwrap();
        let coils = make_coil_maps(shape, 2, seed).unwrap();
        let mask = Arc::new(make_mask([8, 8, 8, 6], MaskPattern::UniformRandom, 2.0, [0, 0, 0], seed).unwrap());
        let ks = forward(&iw, &coils, &mask).unwrap();
        let dict = crate::signal::build_dictionary::<f64>(&protocol, &crate::signal::default_dictionary_grid(&protocol)).unwrap();
        let phi = temporal_basis(&dict, 3).unwrap();
        let scale = data_scale(&ks);
        let problem = Problem::new(ks.scaled(scale), &phi, &protocol).unwrap();
        let mut model = LoreinModel::new(shape, 3, 2, &protocol, amplitude_unit(&protocol), seed).unwrap();
        // a non-trivial refiner
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = model.lrr.refiner.output_layer_range();
        for p in &mut model.lrr.refiner.params_mut()[out] {
            *p = rng.random_range(-0.05..0.05);
        }
        (model, problem)
    }

    fn only(dc1: f64, dc2: f64, prior: f64, wnnm: bool) -> LossWeights {
        let mut w = LossWeights {
            dc1_weight: dc1,
            dc2_weight: dc2,
            prior_weight: prior,
            ..LossWeights::default()
        };
        if !wnnm {
            w.lambda_wnnm.clear();
        }
        w
    }

    #[test]
    fn objective_decomposes_into_terms() {
        let (model, problem) = small_problem(1);
        let weights = LossWeights::default();
        let eval = evaluate(&model, &problem, &weights, Stage::Joint, false).unwrap();
        let (u, coils) = crate::lorein::lrr_predict(&model.lrr, &problem.coords, problem.shape).unwrap();
        let (maps, iw_pmr) = crate::lorein::pmr_predict(&model.pmr, &problem.coords, problem.shape, &problem.protocol).unwrap();
        let iw_lrr = WeightedImages::new(compose_raw(&u.u, &problem.phi).unwrap(), problem.protocol.clone()).unwrap();
        let dc1 = loss_dc(&iw_lrr, &coils, &problem.ks).unwrap();
        let dc2 = loss_dc(&iw_pmr, &coils, &problem.ks).unwrap();
        let prior = loss_prior(&iw_lrr, &iw_pmr).unwrap();
        let wnnm = loss_wnnm(&maps, &weights).unwrap();
        let r = eval.record;
        assert!((r.dc1 - dc1).abs() < 1e-10 * dc1.max(1.0));
        assert!((r.dc2 - dc2).abs() < 1e-10 * dc2.max(1.0));
        assert!((r.prior - prior).abs() < 1e-10 * prior.max(1.0));
        assert!((r.wnnm - wnnm).abs() < 1e-10 * wnnm.max(1.0));
        assert!((r.total - (dc1 + dc2 + prior + wnnm)).abs() < 1e-10 * r.total.max(1.0));
    }

    fn params_of(model: &mut LoreinModel<f64>, block: usize) -> &mut [f64] {
        match block {
            0 => model.lrr.basis_field.params_mut(),
            1 => model.lrr.refiner.params_mut(),
            2 => model.lrr.coil_field.params_mut(),
            3 => model.pmr.fields.get_mut(&MapKind::T1).unwrap().params_mut(),
            4 => model.pmr.fields.get_mut(&MapKind::A).unwrap().params_mut(),
            5 => model.pmr.fields.get_mut(&MapKind::Freq).unwrap().params_mut(),
            _ => model.pmr.fields.get_mut(&MapKind::T2s).unwrap().params_mut(),
        }
    }

    fn field_grad(field: &NeuralField<f64>, coords: &[Coord<f64>], dout: &Array2<f64>) -> Vec<f64> {
        let mut g = vec![0.0; field.n_params()];
        field.backward(coords, dout.view(), &mut g).unwrap();
        g
    }

    fn grad_of(model: &LoreinModel<f64>, coords: &[Coord<f64>], g: &OutputGrads<f64>, block: usize) -> Vec<f64> {
        let map = |kind: MapKind| field_grad(&model.pmr.fields[&kind], coords, &g.maps[&kind]);
        match block {
            0 => field_grad(&model.lrr.basis_field, coords, &g.lrr.basis),
            1 => g.lrr.refiner.clone(),
            2 => field_grad(&model.lrr.coil_field, coords, &g.lrr.coil),
            3 => map(MapKind::T1),
            4 => map(MapKind::A),
            5 => map(MapKind::Freq),
            _ => map(MapKind::T2s),
        }
    }

    /// Central differences on the three largest-gradient entries of a block.
    fn check_term(weights: &LossWeights, stage: Stage, blocks: &[usize], tol: f64) {
        let (mut model, problem) = small_problem(2);
        let eval = evaluate(&model, &problem, weights, stage, true).unwrap();
        let grads = eval.grads.unwrap();
        for &block in blocks {
            let g = grad_of(&model, &problem.coords, &grads, block);
            let mut order: Vec<usize> = (0..g.len()).collect();
            order.sort_by(|&a, &b| g[b].abs().partial_cmp(&g[a].abs()).unwrap());
            assert!(g[order[0]].abs() > 0.0, "block {block} has no gradient");
            for &i in order.iter().take(3) {
                let orig = params_of(&mut model, block)[i];
                let h = 1e-6 * orig.abs().max(1e-2);
                params_of(&mut model, block)[i] = orig + h;
                let hi = evaluate(&model, &problem, weights, stage, false).unwrap().record.total;
                params_of(&mut model, block)[i] = orig - h;
                let lo = evaluate(&model, &problem, weights, stage, false).unwrap().record.total;
                params_of(&mut model, block)[i] = orig;
                let fd = (hi - lo) / (2.0 * h);
                assert!((fd - g[i]).abs() <= tol * g[i].abs(), "block {block} param {i}: fd {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn dc1_gradient() {
        check_term(&only(1.0, 0.0, 0.0, false), Stage::Pretrain, &[0, 1, 2], 1e-4);
    }

    #[test]
    fn dc2_gradient() {
        check_term(&only(0.0, 1.0, 0.0, false), Stage::Joint, &[2, 3, 4, 5, 6], 1e-4);
    }

    #[test]
    fn prior_gradient() {
        check_term(&only(0.0, 0.0, 1.0, false), Stage::Joint, &[0, 1, 3, 4, 6], 1e-4);
    }

    #[test]
    fn wnnm_gradient() {
        check_term(&only(0.0, 0.0, 0.0, true), Stage::Joint, &[3, 4, 5, 6], 1e-3);
    }

    #[test]
    fn blocks_decouple_without_coupling_terms() {
        let (model, problem) = small_problem(3);
        let eval = evaluate(&model, &problem, &only(1.0, 0.0, 0.0, false), Stage::Joint, true).unwrap();
        let grads = eval.grads.unwrap();
        assert!(grads.lrr.basis.iter().any(|&g| g != 0.0));
        for g in grads.maps.values() {
            assert!(g.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn learning_rate_schedule() {
        let c = TrainConfig::dataset1();
        assert_eq!(c.learning_rate_at(0), 1e-3);
        assert_eq!(c.learning_rate_at(79), 1e-3);
        assert_eq!(c.learning_rate_at(80), 5e-4);
        assert_eq!(c.learning_rate_at(199), 2.5e-4);
        let d = TrainConfig::dataset2();
        assert_eq!((d.epochs, d.learning_rate_at(45)), (80, 2.5e-4));
        let w = LossWeights::default();
        assert_eq!((w.lambda(MapKind::A), w.lambda(MapKind::T1), w.lambda(MapKind::T2s)), (0.05, 0.2, 2.0));
    }

    #[test]
    fn short_run_records_every_epoch() {
        let (mut model, problem) = small_problem(4);
        let cfg = TrainConfig {
            pretrain_epochs: 2,
            epochs: 3,
            ..TrainConfig::dataset1()
        };
        let r = train_model(&mut model, &problem, &cfg, 1.0).unwrap();
        assert_eq!(r.epochs_run, 5);
        assert_eq!(r.loss_trace.len(), 5);
        assert_eq!(r.loss_trace[1].stage, 1);
        assert_eq!(r.loss_trace[2].stage, 2);
        for kind in [MapKind::A, MapKind::T1, MapKind::T2s] {
            assert!(r.maps.require(kind).unwrap().iter().all(|&v| v > 0.0));
        }
    }
}

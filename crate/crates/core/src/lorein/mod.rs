//! Joint low-rank and parametric-map reconstruction with neural fields.
//!
//! The LRR block represents the spatial bases `U` and the coil sensitivities
//! with coordinate networks (the bases passing through a CNN refiner); the PMR
//! block represents each parametric map with its own network and maps them to
//! weighted images through the signal model. Both are fitted to the k-space
//! data and tied together by a consistency term.

mod cnn;
mod losses;
mod model;
mod train;

pub use cnn::{cnn_refine, Refiner, RefinerTape};
pub use losses::{loss_dc, loss_prior, loss_wnnm, wnnm_value_and_gradient, wnnm_weight_schedule, LossWeights, WNNM_EPS_REL};
pub use model::{lrr_predict, map_unit, pmr_predict, LrrState, PmrState};
pub use train::{objective, objective_gradient, train, LoreinModel, LossRecord, ModelGradient, ReconResult, TrainConfig, COORD_BATCH};

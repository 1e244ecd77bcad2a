//! Data generation, gradient training and saturation analysis.

mod datagen;
mod gradient;
mod saturation;
mod sweep;
mod train;


pub use datagen::{all_tokens, gen_general_position_dataset, gen_shared_context_dataset};
pub use gradient::{accuracy, gradient, loss_and_output_grad, mean_loss, mse};
pub use saturation::{saturation_report, SaturationReport, MAX_COEFFICIENT_BINS};
pub use sweep::{median, run_cell, sweep, sweep_rows, CellOutcome, DataKind, GridCell, SweepBase, SweepRow};
pub use train::{train_from, train_memorize, AdamParams, Schedule, TrainConfig, TrainReport};

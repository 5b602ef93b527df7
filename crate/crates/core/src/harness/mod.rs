//! Training, evaluation, cost accounting, checkpoints and reports.

pub mod checkpoint;
pub mod flops;
pub mod metrics;
pub mod report;
pub mod se;
pub mod smoke;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState};
pub use flops::{count_flops, profile_flops, FlopsReport};
pub use metrics::{mse, mse_loss, nmse_db, to_db, Nmse, NmseAccumulator, NMSE_DB_FLOOR};
pub use report::{emit_report, Report};
pub use se::{se_curve, SeConfig, SeRecord};
pub use train::{evaluate, evaluate_nmse, train, EvalReport, StopReason, TrainConfig, TrainHistory, Trainer};

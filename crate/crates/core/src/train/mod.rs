//! Optimizers, the three-batch training step, the mean teacher and the epoch loop.

pub mod config;
pub mod optim;
pub mod run;
pub mod step;
pub mod teacher;

pub use config::{OptimizerKind, TrainConfig, Variant};
pub use optim::OptimState;
pub use run::{evaluate, predict, target_eval_domain, EpochMetrics, TrainLoop, TrainRecord};
pub use step::{compute_gradients, forward_losses, step_loss, train_step, StepMetrics};
pub use teacher::{ema_update, TeacherState};

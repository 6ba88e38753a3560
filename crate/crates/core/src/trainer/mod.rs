//! Training orchestration: configuration, the per-step objective, the
//! optimizer and checkpoints, the run/eval/ablation harness and the CLI.

pub mod batch;
pub mod cli;
pub mod config;
pub mod gradcheck;
pub mod objective;
pub mod run;
pub mod state;

pub use config::{AblationCell, Toggles, TrainConfig};
pub use objective::{objective, Frozen, LossMode};
pub use run::{ablate, evaluate, gen_data, train, NetPredictor};
pub use state::{train_step, TrainState};

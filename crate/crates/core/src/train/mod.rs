//! Loss, optimizer, data, and the training loop.

pub mod adamw;
pub mod augment;
pub mod data;
pub mod loss;
pub mod synth;
pub mod trainer;

pub use adamw::{adamw_step, OptimizerState, TrainConfig};
pub use augment::{augment_hflip, hflip};
pub use data::{read_dataset, write_dataset, Dataset, Sample, Split};
pub use synth::{gen_synthetic, generate_case, Ellipse, SyntheticTaskConfig};
pub use trainer::{evaluate, predict_masks, predict_probs, train, EpochRecord, TrainState};

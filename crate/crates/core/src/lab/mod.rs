//! Desk-scale trainer: a linear softmax classifier over synthetic features,
//! pretrained on a bulk set and then adapted with a low-rank adapter, full
//! fine-tuning, or a per-feature scaling vector while every probe example's
//! loss is tracked.

mod config;
mod data;
mod model;
mod optim;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::ToyConfig;
pub use data::{centroids, generate_dataset, stratified_split, SyntheticExample, ToyDataset};
pub use model::{softmax, AdapterModel, Target};
pub use optim::{clip_global_norm, lr_at, AdamW};
pub use train::{
    checkpoint_schedule, class_weights, finetune, pretrain_base, FinetuneOptions, FinetuneOutcome, StepRecord, TrainExample,
};

/// Independent random stream `id` derived from `seed`.
pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

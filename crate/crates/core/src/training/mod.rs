//! Losses, synthetic data, the joint training loop and inference.

mod config;
mod data;
mod enhance;
mod loss;
mod step;

use std::time::{Duration, Instant};

pub use config::TrainConfig;
pub use data::{random_crop, synth_pair, synth_pair_with_scale, synthetic_scene, PairedSample};
pub use enhance::{enhance, EnhanceOptions, Enhanced};
pub use loss::{
    draw_method_pair, loss_bootstrap, loss_bootstrap_grad, loss_self, loss_self_grad, loss_simple, loss_sup,
    rms_distance, self_term,
};
pub use step::{sample_objective, Draws, LossRecord, Trainer};

use crate::error::{Error, Result};
use crate::imaging::Image;

/// Runs `cfg.iterations` steps on batches synthesised from `cleans`, calling
/// `on_step(step, losses, elapsed)` after each one.
pub fn train(
    cfg: TrainConfig,
    cleans: &[Image],
    mut on_step: impl FnMut(u64, &LossRecord, Duration) -> Result<()>,
) -> Result<Trainer> {
    for (i, img) in cleans.iter().enumerate() {
        let (h, w) = match cfg.patch_size {
            0 => (img.height(), img.width()),
            p => (img.height().min(p), img.width().min(p)),
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid("train", format!("training image {i} crops to odd size {h}x{w}")));
        }
    }
    let mut trainer = Trainer::new(cfg)?;
    for _ in 0..trainer.cfg.iterations {
        let start = Instant::now();
        let batch = trainer.sample_batch(cleans)?;
        let rec = trainer.train_step(&batch)?;
        on_step(trainer.steps(), &rec, start.elapsed())?;
    }
    Ok(trainer)
}

//! Losses, optimizer, checkpoints and the alternating training loop.

mod adam;
mod checkpoint;
mod loss;
mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use loss::{
    adversarial_loss, discriminator_loss, gdl_value, gdl_weights, generalized_dice_loss,
    generator_loss, generator_loss_terms, soft_dice, GeneratorLoss, DEFAULT_GDL_EPS,
    REGION_CHANNELS,
};
pub use trainer::{
    class_frequencies, split_indices, stack, train, EpochReport, ForwardPass, GeneratorPass,
    Models, Sample, Step, TrainConfig, TrainLog, TrainLogRow, Trainer, BEST_CHECKPOINT,
    FINAL_CHECKPOINT, LOG_FILE, LOG_HEADER, VALIDATION_FRACTION,
};

#[cfg(test)]
mod tests;

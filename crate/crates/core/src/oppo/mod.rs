//! One-step offline preference learning: hindsight information matching
//! plus triplet preference modeling over a learned optimal context.

mod losses;
mod train;

pub use losses::{him_loss, norm_loss, pm_loss, select_pos_neg};
pub use train::{
    continue_training, oppo_train, preference_pairs, ModelBundle, Phase, StepRecord, TrainState,
};

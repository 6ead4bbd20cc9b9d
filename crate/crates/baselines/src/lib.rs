//! The two-step comparison pipeline: a preference-trained reward model,
//! relabeling, a return-conditioned policy on the relabeled data, and
//! behavior cloning.

mod policy;
mod reward;

pub use policy::{
    train_bc, train_dt_pseudo, train_return_conditioned, window_rtg, BaselineKind, BaselinePolicy, PolicyRecord,
};
pub use reward::{
    bt_probability, relabel_dataset, reward_accuracy, reward_model_loss, train_reward_model, RewardChannel,
    RewardModel, RewardRecord, PROB_CLAMP,
};

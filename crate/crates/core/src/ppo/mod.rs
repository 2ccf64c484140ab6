//! Clipped-surrogate policy-gradient learner.

pub mod loss;
pub mod policy;
pub mod train;

pub use loss::{clipped_surrogate_loss, normalize_advantages, Batch, LossCoefficients, LossOutput};
pub use policy::{PolicyParams, RandomPolicy, StochasticPolicy, ACT_DIM, LOG_STD_MAX, LOG_STD_MIN};
pub use train::{
    objective_from_training, train, EpochRecord, EvalRecord, TrainConfig, TrainOutcome, TrainingCurve, DEFAULT_FLOOR,
};

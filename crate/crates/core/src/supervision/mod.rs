//! Turning binary shadow masks into training signal: distance-transform
//! weighted targets, the mask loss, Adam and the training loop.

mod adam;
mod loss;
mod train;
mod weight;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use loss::shadow_loss;
pub use train::{
    evaluate_loss, fit, fit_from, EpochSummary, LossRecord, SigmaStage, TrainConfig, TrainHistory,
    TrainProgress, TrainingSet, TrainingView, SIGMA_FLOOR,
};
pub use weight::{
    boundary_distances, boundary_pixels, class_balance, distance_transform_weight,
    euclidean_distance_transform, gaussian_blur, label_components, BoundaryDistances,
    DistanceTransformConfig, WeightMode, WeightedMask,
};

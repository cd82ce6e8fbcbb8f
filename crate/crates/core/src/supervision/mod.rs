//! Classification and keypoint heatmap supervision.

pub mod keypoints;
mod losses;

pub use keypoints::{map_keypoint, Keypoint, KeypointSet, COCO_JOINTS, NUM_JOINTS};
pub use losses::{
    awk_loss, awk_targets, positive_ratios, softplus, total_loss, wce_loss, LossWeights, P_CLAMP,
};

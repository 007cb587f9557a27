//! Matching, losses, augmentation and the training schedule.

pub mod augment;
pub mod losses;
pub mod matching;
pub mod trainer;

pub use augment::{augment, Augmentation};
pub use losses::{detection_loss, joint_classification_loss, segmentation_loss, DetectionTarget};
pub use matching::{match_queries, MatchResult};
pub use trainer::{joint_train, pretrain_detector, pretrain_segmenter, EpochRecord, Phase};

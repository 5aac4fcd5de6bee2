//! Voice-spectrogram classification: mel features, training-only augmentation,
//! subject-independent splits, small CNNs trained from scratch and
//! augmented-pretrain / raw-fine-tune transfer.

pub mod audio;
pub mod augment;
pub mod dataset;
pub mod exec;
pub mod metrics;
pub mod nn;
pub mod persist;
pub mod rng;
pub mod transfer;
pub mod zoo;

//! Differentiable scanner + classifier ("ONN") and linear reconstructor
//! training with gradients through the stochastic measurement layer.

mod checkpoint;
mod gradcheck;
mod net;
mod optim;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, sidecar_path,
    CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use gradcheck::{gradient_check, gradient_check_random, GradientReport, ParamError, FD_ABS_FLOOR, FD_STEP};
pub use net::{
    argmax_rows, loss_and_grad, mean_abs_offdiag, offdiag_ratio, BranchMeans, Dense,
    DropoutMasks, Gradients, Loss, NoiseDraws, Preprocessor, ScannerConfig, SensingNet, Tape,
    Targets,
};
pub use optim::{Optimizer, OptimizerKind};
pub use train::{
    evaluate_accuracy, learned_masks, mask_entry_histogram, train_classifier, train_onn, train_onn_from,
    train_reconstructor, EpochRecord, MaskInit, MaskSnapshot, ReconstructionConfig,
    ReconstructionRun, TrainConfig, TrainedClassifier,
};

//! Fine-tuning strategies, freeze plans, Adam, and the training loop.

mod adam;
mod strategy;
mod train;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use strategy::{
    build_freeze_plan, classify_name, classify_params, FreezePlan, LrTable, ParamGroup, Strategy, LR_ALL_UNIFORM,
    LR_BN_FC, LR_CNN_FC, LR_DIFF_BN, LR_DIFF_CNN, LR_DIFF_FC, LR_FC_ONLY, LR_PARTIAL_BN, LR_SCRATCH,
};
pub use train::{
    argmax_rows, count_correct, evaluate, prepare_model, stack_images, train, EpochRecord, History, TrainOptions,
    DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS, HISTORY_HEADER, OPTIMIZER,
};

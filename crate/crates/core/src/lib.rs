//! Test-time adaptation to shifts in the joint prior over (class, group)
//! meta-labels.
//!
//! A classifier trained on one domain predicts `p_s(y, z | x)`. When only the
//! prior `p(y, z)` changes between domains, the target posterior follows by
//! reweighting, and the unknown target prior can be fit by EM on unlabeled
//! target inputs. The crate covers the whole pipeline on synthetic Gaussian
//! data: sampling, training (plain and logit-adjusted), calibration,
//! adaptation, metrics and a seeded sweep harness.

pub mod adapt;
pub mod calibrate;
pub mod error;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod prob;
pub mod rng;
pub mod synthdata;
pub mod train;

pub use adapt::{
    em_estimate_prior, em_objective, fix_class_marginal, importance_weights, reweight_posterior,
    EmConfig, EmResult,
};
pub use calibrate::{apply_bcts, fit_bcts, CalibrationFitConfig, CalibrationParams};
pub use error::{Error, Result};
pub use harness::{
    run_calibration_ablation, run_sweep, run_sweep_with_threads, AblationOutput, MethodKind,
    SweepConfig, SweepOutput,
};
pub use metrics::{group_accuracy, max_group_prob, roc_auc, GroupAccuracyReport, Method, SweepRecord};
pub use prob::{
    marginalize_classes, softmax_rows, JointPrior, LogitsMatrix, Matrix, MetaLabelSpace,
    PosteriorMatrix, PROB_FLOOR,
};
pub use synthdata::{
    default_anchors, lambda_prior, oracle_posterior, sample_dataset, AnchorPair,
    GaussianGenerativeSpec, LabeledDataset,
};
pub use train::{
    adjust_nonuniform_marginals, predict_logits, subsample_balanced, train_softmax,
    LinearSoftmaxModel, TrainConfig, TrainingMode,
};

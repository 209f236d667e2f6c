//! Contrastive features: per-class final-layer gradients of a contrast loss.

mod dump;
mod features;
mod loss;
mod taylor;

pub(crate) use dump::FGSM_CODE;
pub use dump::{FeatureDump, FeatureRecord, FEATURE_MAGIC};
pub use features::{
    compute_magnitude, extract_contrast, extract_feature, extract_feature_fgsm, fgsm_class_walk,
    l2_normalize, ContrastiveFeature, ExtractConfig, Extraction, Extractor, FgsmWalk,
};
pub use loss::{loss_eval, ContrastTarget, LossKind};
pub use taylor::{taylor_diagnostic, TaylorReport};

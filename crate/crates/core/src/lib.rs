//! Margin-based softmax heads for hypersphere embeddings, with hand-derived
//! gradients, a feature-norm quality proxy and a synthetic benchmark for
//! quality-adaptive training.

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod gst_field;
pub mod head;
pub mod margin;
pub mod quality;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use head::{fuse_features, BatchForward, HeadGrad, HeadState, Mode};
pub use margin::{
    ce_grad, ce_loss, curricular_update_t, gst, margin_logit, negative_logit, softmax_probs, CeGrad, CosineBatch,
    GstReport, MarginSpec, Variant,
};
pub use quality::{proxy_value, quality_indicator, update_stats, NormStats, ProxyChoice, ProxyInputs};

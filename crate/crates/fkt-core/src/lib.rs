//! Training framework comparing two ways of combining contrastive
//! self-supervision with supervised image classification: sequential transfer
//! (pretrain, then fine-tune) and joint single-stage optimization of both
//! objectives.
//!
//! Everything numeric runs in f64 with hand-written backward passes that are
//! verified against finite differences; training is bit-reproducible for a
//! fixed seed regardless of thread count (disable the default `parallel`
//! feature for a fully sequential build).

pub mod augment;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod par;
pub mod pipelines;
pub mod rng;

pub use augment::{eval_transform, make_view_pair, AugmentPolicy, ViewPair};
pub use data::{batch_iterator, load_dataset, make_synthetic_blobs, DatasetSpec, ImageBatch, Split};
pub use error::{FktError, Result};
pub use eval::{evaluate, grad_cam, render_cam_overlay, CamMap, MetricsReport};
pub use losses::{
    cosine_similarity_matrix, cross_entropy, fkt_loss, nt_xent, ContrastiveConfig, LossBreakdown,
};
pub use model::{build_model, export_parameters, load_encoder, Checkpoint, Model, ModelConfig};
pub use optim::{lars_step, sgd_step, Optimizer, OptimizerSettings};
pub use pipelines::{
    run_comparison, run_downstream, run_functional, run_regime, run_ssl_pretrain,
    run_supervised_only, ComparisonReport, EpochRecord, Regime, RunConfig,
};

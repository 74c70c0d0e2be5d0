//! attnscope-core: attention analysis for small vision transformers.
//!
//! The crate covers the full loop from pixels to decisions:
//!
//! * a compact ViT-style encoder that records every attention matrix it
//!   computes ([`encoder`]),
//! * attention rollout across layers with selectable head fusion
//!   ([`rollout`]),
//! * object localization from thresholded attention maps ([`localize`]),
//! * sliding-window part discovery with integral-image scoring and
//!   non-maximum suppression ([`regions`]),
//! * attention-guided erase and crop augmentations ([`augment`]),
//! * the three-stage joint-loss pipeline and a toy training loop
//!   ([`pipeline`]),
//! * binary tensor / weight / image / config formats ([`io`]).
//!
//! Everything is deterministic given a seed: the same inputs and seed
//! produce bitwise-identical maps, boxes, and files. Reference
//! implementations used by the test suite live in [`oracle`] and seeded
//! input generators in [`synth`]; [`selftest`] bundles quick end-to-end
//! checks behind a single call.

pub mod augment;
pub mod encoder;
pub mod error;
pub mod image;
pub mod io;
pub mod localize;
pub mod oracle;
pub mod pipeline;
pub mod regions;
pub mod rollout;
pub mod selftest;
pub mod synth;

pub use augment::{attention_crop, attention_crop_box, attention_erase};
pub use augment::{AugmentConfig, EraseOutcome, FillMode};
pub use encoder::{
    classify_head, cross_entropy, encoder_forward, forward_image, head_gradient,
    head_train_step, patch_embed,
};
pub use encoder::{
    AttentionStack, EncoderConfig, HeadGradient, HeadWeights, LayerWeights, TokenSequence,
    WeightSet,
};
pub use error::{Error, Result};
pub use image::{resize_plane, Image, ResizeFilter};
pub use localize::{
    binary_close, crop_object, label_components, localize_object, select_object_box,
    threshold_mean,
};
pub use localize::{BinaryMask, BoundingBox, ComponentSelect, Connectivity, LocalizeConfig};
pub use pipeline::{
    joint_loss, predict_combined, run_stages, synthetic_quadrant_dataset, train_toy,
};
pub use pipeline::{
    EpochMetrics, JointLoss, PartMapSource, PipelineConfig, RunMode, StageOutputs,
    ToyTrainReport,
};
pub use regions::{kernel_from_object, nms_topk, score_windows, score_windows_with_kernel};
pub use regions::{PoolMode, RatioMode, RegionCandidate, ScoringConfig, SummedAreaTable};
pub use rollout::{layer_fuse, rollout_map, rollout_products, upsample_map};
pub use rollout::{AttentionMap, HeadFusion, MapProvenance, MapSpace, RolloutConfig};
pub use selftest::{run_selftest, SelftestResult};

//! Multi-path region mining: four classification heads over a shared
//! backbone, their class activation maps, fusion and pseudo labels.

mod attention;
mod model;
mod pcam;

pub use attention::{
    channel_attention_forward, pointwise_attention_forward, spatial_attention_forward, AttentionState, ChannelAttention,
};
pub use model::{HeadOutput, MprmConfig, MprmModel};
pub use pcam::{
    compute_pcam, fuse_pcams, merge_overlapping_subclouds, parse_paths, pseudo_labels_from_pcam, Fusion, PathId, PseudoLabel,
    ScoreMap,
};

//! Kernel-point convolution networks on stacked subcloud batches.

mod blocks;
mod checkpoint;
mod conv;
mod geometry;
mod kernel;
mod network;

pub use blocks::{BlockGeometry, Bottleneck, KpConvLayer, Linear, SimpleBlock, LEAKY_SLOPE};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use conv::{input_features, kernel_correlation, kpconv_forward, upsample_nearest};
pub use geometry::{
    build_geometries, GeometryConfig, LevelGeometry, Pyramid, StackedLevel, StackedTransition, SubcloudGeometry,
    TransitionGeometry,
};
pub use kernel::{build_kernel_disposition, KernelDisposition};
pub use network::{BlockKind, ClassificationBackbone, LayerPlan, SegmentationNet, StageSpec};

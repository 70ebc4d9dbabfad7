//! Network assembly: 2D SegCaps, 3D UCaps, their forward pass and loss.

mod build;
mod forward;
mod params;
mod spec;

pub use build::{build_segcaps2d, build_tiny_capsnet, build_ucaps3d, SegCapsConfig, UCapsConfig};
pub use forward::{
    downsample_labels, foreground_mask, forward_extractor, forward_segment, length_labels, predict, segmentation_loss, split_batch, stack,
    update_running_stats, ClassWeighting, ForwardOutput, LossConfig, LossVars, Mode, BN_EPS, BN_MOMENTUM,
};
pub use params::ModelParams;
pub use spec::{Activation, LayerKind, LayerSpec, NetworkSpec, ParamEntry, ParamKind, SlotShape};

//! Capsule primitives: squash, votes, dynamic routing and locally-constrained
//! convolutional / deconvolutional capsule layers in 2-d and 3-d.

mod grid;
mod layer;
mod routing;
mod squash;

pub use grid::CapsuleGrid;
pub use layer::{CapsuleLayerParams, CapsuleMode, Tap, WindowPlan};
pub use routing::{dynamic_routing, route_group, route_group_backward, RouteDims, RoutingOutput, RoutingTrace};
pub use squash::{squash_into, squash_values, squash_vjp, SQUASH_EPS};

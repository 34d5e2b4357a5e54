//! Feed-forward networks, action heads, gradients and RMSProp.

pub mod dist;
pub mod head;
pub mod net;
pub mod params;
pub mod rmsprop;

pub use head::{Action, Head, HeadLayout, PolicyOutput};
pub use net::{GoalInjection, NetShape, Network, Trace};
pub use params::{GradientBuffer, Layout, ParamSpec, ParameterSet};
pub use rmsprop::{RmsProp, RmsPropConfig};

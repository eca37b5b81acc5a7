//! Numeric substrate shared by every learned component: small dense
//! networks with exact reverse-mode gradients, Adam/AdamW, sinusoidal
//! timestep features and central finite differences.

mod adam;
mod fd;
mod net;

pub use adam::{AdamConfig, AdamState};
pub use fd::finite_diff_grad;
pub use net::{
    build_input, time_embedding, Activation, DenseNet, Gradients, InputLayout, NetShape, Trace,
};

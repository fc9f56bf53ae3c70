//! Minimal convolutional network core: layer specs, parameters, forward and
//! backward passes, SGD.

mod network;
mod params;
mod spec;

pub use network::{apply_dropout, argmax, evaluate, forward, loss_and_grads, predict_classes};
pub(crate) use params::CountingReader;
pub use params::{init_params, ModelParams, ParamEntry};
pub use spec::{
    build_blink_net, build_blink_net_with, build_landmark_net, build_landmark_net_with, ActShape, DropoutRates,
    LayerSpec, NetworkSpec,
};

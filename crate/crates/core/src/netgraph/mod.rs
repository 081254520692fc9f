//! Layer primitives, multi-exit network graphs, weight storage, and the
//! forward engine.

pub mod forward;
pub mod layer;
pub mod network;
pub mod weights;

pub use forward::{argmax, forward_to_exit, softmax, ForwardEngine};
pub use layer::{LayerKind, LayerSpec, Shape};
pub use network::{
    build_preset, densenet_mini, load_graph, resnet_mini, save_graph, ExitHead, ExitPoint,
    MultiExitNetwork, Segment,
};
pub use weights::{quantize_weight_set, ActivationQuant, StoredTensor, WeightEntry, WeightSet};

//! Normalization layers, convolutional blocks, the backbone and its optimizer.

mod backbone;
mod norm;
mod optim;
mod params;

pub use backbone::{
    Baseline, BackboneConfig, ForwardOutput, Network, NormMode, SeparationScheme, SeparationUnit,
};
pub use norm::{
    norm_forward, searchable_norm_forward, BufferUpdate, ModalityRouting, NormKind, NormLayer,
    NormParams, NormRouting, SearchableNormLayer,
};
pub use optim::{Adam, AdamConfig};
pub use params::{Param, ParamGroup, ParamId, ParamStore};

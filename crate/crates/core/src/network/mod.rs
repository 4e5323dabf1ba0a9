//! The multi-view network: two 2-D U-Nets whose decoders both start from the
//! concatenated bottleneck features of the short-axis and long-axis encoders,
//! with 1×1 output heads on the finest decoder levels.

mod model;
pub mod ops;
mod tensor;

pub use model::{
    count_parameters, Block, Branch, BranchOutputs, Conv, ForwardCache, Layer, Mode, NetworkConfig,
    NetworkOutputs, Norm, OutputGrads, Param, ParamKey, ParamKind, ParameterSet, Pathway,
};
pub use tensor::{Real, Tensor};

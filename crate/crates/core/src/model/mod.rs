//! Transformer models: supernet, dense sub-networks, and their configs.

mod config;
mod dense;
mod supernet;

pub use config::{
    count_params, DenseConfig, LayerChoice, LayerDims, ResolvedLayer, ResolvedSubnet, SubnetworkConfig,
    SupernetConfig,
};
pub use dense::{Block, BoundModel, DenseModel, ForwardTrace, LayerNorm, INIT_STD, LN_EPS};
pub use supernet::Supernet;

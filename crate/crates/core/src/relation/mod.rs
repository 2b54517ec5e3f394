//! Actor relation building blocks.

mod attention;
mod encoding;
mod unit;

pub use attention::{
    mhsa_forward, AttentionTrace, AttentionVars, Linear, UnitDims, UnitKind,
};
pub(crate) use attention::register_linear;
pub use encoding::{spe_encode, tpe_encode, EncodingConfig, DEFAULT_FREQUENCY_BASE};
pub use unit::{
    register_unit, s_trans_forward, t_trans_forward, PositionEncoding, UnitVars, LAYER_NORM_EPS,
};

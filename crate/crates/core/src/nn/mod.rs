//! Layers of the emulator: SIREN sine layers, the learnable time code,
//! time-conditioned attention, FNO blocks and the shared decoder head.
//!
//! Parameters live in a [`ParamSet`]; layers hold [`ParamId`]s and run on the
//! [`Bound`] view of that set for one tape.

mod layers;
mod params;

pub use layers::{
    plain_bound, siren_bound, siren_init, uniform, Activation, AttentionBlock, Decoder, FnoBlock,
    InrLayer, Linear, TimeEmbedding, OMEGA_0,
};
pub use params::{check_param_grads, Bound, Param, ParamId, ParamKind, ParamSet};

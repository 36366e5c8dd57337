//! Windowed channel attention (FCSA) and grid spatial attention (GGSA).

mod fcsa;
mod ggsa;

pub use fcsa::{
    channel_attention_window, fcsa, fcsa_forward, fcsa_qkv, fcsa_workspace, init_fcsa, FcsaParams,
};
pub use ggsa::{
    ggsa, ggsa_forward, ggsa_workspace, init_ggsa, relative_position_bias, relative_position_index,
    GgsaParams,
};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::tensor::{Scalar, Tensor4};

/// How many temperatures FCSA learns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaMode {
    #[default]
    PerHead,
    Global,
}

impl AlphaMode {
    pub fn count(self, heads: usize) -> usize {
        match self {
            AlphaMode::PerHead => heads,
            AlphaMode::Global => 1,
        }
    }
}

/// Partitioned Q/K/V (`B×heads×d×tokens`) and the attention map of one
/// attention pass (`B×heads×d×d` for FCSA, `B×heads×t×t` for GGSA).
#[derive(Clone, Debug)]
pub struct AttentionWorkspace<T: Scalar = f64> {
    pub q: Tensor4<T>,
    pub k: Tensor4<T>,
    pub v: Tensor4<T>,
    pub attn: Tensor4<T>,
}

pub(crate) fn head_dim_or_zero(c: usize, heads: usize) -> usize {
    head_dim(c, heads).unwrap_or(0)
}

pub(crate) fn head_dim(c: usize, heads: usize) -> Result<usize> {
    if heads == 0 || c % heads != 0 {
        return Err(config_err!("{c} channels cannot be split into {heads} heads"));
    }
    Ok(c / heads)
}

#[cfg(test)]
mod tests;

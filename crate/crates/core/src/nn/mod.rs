//! Network building blocks: affine maps, recurrent cells, self-attention and
//! block compression.

mod attention;
mod compress;
mod gru;
mod linear;
mod lstm;

pub use attention::{stack_forward, AttentionLayer, AttentionOutput};
pub use compress::{
    compress_topk, compress_topk_padded, topk_positions, Compression, Compressor, FnnBlockEncoder,
};
pub use gru::GruCell;
pub use linear::{Activation, Linear, Mlp};
pub use lstm::LstmCell;

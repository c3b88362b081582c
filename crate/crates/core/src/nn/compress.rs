use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Activation, AttentionOutput, Mlp};
use crate::error::{Error, Result};
use crate::tensor::{ParameterStore, Tape, Tensor, Var};

/// How an attention output `Y` (L x d) is reduced to a fixed-size vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Compression {
    /// Rows with the `k` largest contributions, concatenated in temporal order.
    #[default]
    TopK,
    /// Sum of all rows.
    Pooling,
    /// The top-`k` rows averaged with their normalized contributions.
    TopKAverage,
    /// A shared trainable map applied to every row, concatenated.
    Linear,
    /// `k` uniformly chosen distinct rows in temporal order.
    Random,
}

impl Compression {
    pub fn name(self) -> &'static str {
        match self {
            Compression::TopK => "topk",
            Compression::Pooling => "pooling",
            Compression::TopKAverage => "topk_average",
            Compression::Linear => "linear",
            Compression::Random => "random",
        }
    }
}

impl fmt::Display for Compression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Compression {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "topk" => Compression::TopK,
            "pooling" => Compression::Pooling,
            "topk_average" => Compression::TopKAverage,
            "linear" => Compression::Linear,
            "random" => Compression::Random,
            other => return Err(Error::config(format!("unknown compression `{other}`"))),
        })
    }
}

/// Positions of the `k` largest contributions in ascending order. Ties go to
/// the lower index.
pub fn topk_positions(contributions: &[f64], k: usize) -> Result<Vec<usize>> {
    let l = contributions.len();
    if k == 0 || k > l {
        return Err(Error::Bounds(format!("top-k with k = {k} over {l} rows")));
    }
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| contributions[b].total_cmp(&contributions[a]).then(a.cmp(&b)));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Concatenates the selected rows of `y` into a `1 x (k d)` row.
pub fn compress_topk(tape: &mut Tape, y: Var, contributions: &[f64], k: usize) -> Result<(Var, Vec<usize>)> {
    let positions = topk_positions(contributions, k)?;
    let rows = tape.gather_rows(y, &positions)?;
    Ok((tape.flatten_row(rows)?, positions))
}

/// Like [`compress_topk`] but selects `min(k, L)` rows and zero-pads to `k d`.
pub fn compress_topk_padded(
    tape: &mut Tape,
    y: Var,
    contributions: &[f64],
    k: usize,
) -> Result<(Var, Vec<usize>)> {
    let d = tape.value(y).cols();
    let take = k.min(contributions.len());
    let (v, positions) = compress_topk(tape, y, contributions, take)?;
    if take == k {
        return Ok((v, positions));
    }
    let pad = tape.constant(Tensor::zeros(&[1, (k - take) * d]));
    Ok((tape.concat_cols(&[v, pad])?, positions))
}

/// A configured compression step, owning any trainable map it needs.
#[derive(Clone, Debug)]
pub struct Compressor {
    pub variant: Compression,
    pub k: usize,
    pub block_len: usize,
    pub d: usize,
    linear: Option<String>,
}

impl Compressor {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        prefix: &str,
        variant: Compression,
        k: usize,
        block_len: usize,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if k == 0 || k > block_len {
            return Err(Error::Bounds(format!("k = {k} must lie in 1..={block_len}")));
        }
        let linear = if variant == Compression::Linear {
            if !(k * d).is_multiple_of(block_len) {
                return Err(Error::config(format!(
                    "linear compression needs k*d = {} divisible by L = {block_len}",
                    k * d
                )));
            }
            let name = format!("{prefix}.linear");
            store.insert_uniform(&name, &[d, k * d / block_len], d, rng)?;
            Some(name)
        } else {
            None
        };
        Ok(Compressor { variant, k, block_len, d, linear })
    }

    pub fn output_dim(&self) -> usize {
        match self.variant {
            Compression::Pooling | Compression::TopKAverage => self.d,
            _ => self.k * self.d,
        }
    }

    /// Returns the compressed `1 x output_dim` row and the rows it drew on.
    pub fn compress(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        out: &AttentionOutput,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Vec<usize>)> {
        let y = out.y;
        let l = tape.value(y).rows();
        match self.variant {
            Compression::TopK => compress_topk(tape, y, &out.contributions, self.k),
            Compression::Pooling => Ok((tape.sum_rows(y)?, (0..l).collect())),
            Compression::TopKAverage => {
                let positions = topk_positions(&out.contributions, self.k)?;
                let total: f64 = positions.iter().map(|&p| out.contributions[p]).sum();
                let w: Vec<f64> = positions.iter().map(|&p| out.contributions[p] / total).collect();
                let rows = tape.gather_rows(y, &positions)?;
                let wv = tape.constant(Tensor::matrix(w.len(), 1, w)?);
                let weighted = tape.mul_col(rows, wv)?;
                Ok((tape.sum_rows(weighted)?, positions))
            }
            Compression::Linear => {
                let name = self.linear.as_deref().expect("linear map registered");
                let m = tape.param(store, name)?;
                let mapped = tape.matmul(y, m)?;
                Ok((tape.flatten_row(mapped)?, (0..l).collect()))
            }
            Compression::Random => {
                if self.k > l {
                    return Err(Error::Bounds(format!("k = {} over {l} rows", self.k)));
                }
                let mut positions = rand::seq::index::sample(rng, l, self.k).into_vec();
                positions.sort_unstable();
                let rows = tape.gather_rows(y, &positions)?;
                Ok((tape.flatten_row(rows)?, positions))
            }
        }
    }
}

/// Applies one two-hidden-layer tanh network to every row of a block and
/// concatenates the outputs in temporal order.
#[derive(Clone, Debug)]
pub struct FnnBlockEncoder {
    mlp: Mlp,
    pub s_fnn: usize,
}

impl FnnBlockEncoder {
    /// Output width per row chosen so that `L * s_fnn = k * d`.
    pub fn s_fnn_for(block_len: usize, k: usize, d: usize) -> Result<usize> {
        if block_len == 0 || !(k * d).is_multiple_of(block_len) {
            return Err(Error::config(format!(
                "k*d = {} is not divisible by L = {block_len}",
                k * d
            )));
        }
        Ok(k * d / block_len)
    }

    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        prefix: &str,
        d: usize,
        hidden: usize,
        s_fnn: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if s_fnn == 0 {
            return Err(Error::config("s_fnn must be at least 1"));
        }
        let mlp = Mlp::new(store, prefix, &[d, hidden, hidden, s_fnn], Activation::Tanh, rng)?;
        Ok(FnnBlockEncoder { mlp, s_fnn })
    }

    pub fn encode(&self, tape: &mut Tape, store: &ParameterStore, block: Var) -> Result<Var> {
        let per_row = self.mlp.forward(tape, store, block)?;
        tape.flatten_row(per_row)
    }
}

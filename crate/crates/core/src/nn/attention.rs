use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Activation, Mlp};
use crate::error::{Error, Result};
use crate::tensor::{ParameterStore, Tape, Tensor, Var};

/// One multi-head self-attention block followed by the residual, layer-norm
/// and feed-forward sublayers.
///
/// `U = LN(B + drop(MHA(B)))`, `Y = LN(U + drop(g(U)))` where `g` is a GELU
/// network with hidden width `2d`. No positional encoding is applied.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    prefix: String,
    pub d: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub dropout: f64,
    pub ln_eps: f64,
    ffn: Mlp,
}

/// Result of an attention pass over one block.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    /// Transformed block, `L x d`.
    pub y: Var,
    /// Per-head weighting matrices, each `L x L` with rows summing to one.
    pub weights: Vec<Tensor>,
    /// Column sums of the head-averaged weights; they add up to `L`.
    pub contributions: Vec<f64>,
}

impl AttentionLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        prefix: &str,
        d: usize,
        heads: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::config(format!("embedding dim {d} is not divisible by {heads} heads")));
        }
        for name in ["wq", "wk", "wv", "wo"] {
            store.insert_uniform(format!("{prefix}.{name}"), &[d, d], d, rng)?;
        }
        store.insert(format!("{prefix}.ln1.g"), Tensor::full(&[1, d], 1.0))?;
        store.insert(format!("{prefix}.ln1.b"), Tensor::zeros(&[1, d]))?;
        let ffn = Mlp::new(store, &format!("{prefix}.ffn"), &[d, 2 * d, d], Activation::Gelu, rng)?;
        store.insert(format!("{prefix}.ln2.g"), Tensor::full(&[1, d], 1.0))?;
        store.insert(format!("{prefix}.ln2.b"), Tensor::zeros(&[1, d]))?;
        Ok(AttentionLayer {
            prefix: prefix.to_string(),
            d,
            heads,
            head_dim: d / heads,
            dropout,
            ln_eps: 1e-5,
            ffn,
        })
    }

    pub fn param_name(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.prefix)
    }

    pub fn ffn(&self) -> &Mlp {
        &self.ffn
    }

    fn dropout(&self, tape: &mut Tape, x: Var, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var> {
        match rng {
            Some(rng) if self.dropout > 0.0 => {
                let keep = 1.0 - self.dropout;
                let shape = tape.shape(x).to_vec();
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                tape.dropout_with_mask(x, Tensor::new(shape, data)?)
            }
            _ => Ok(x),
        }
    }

    /// Forward pass over one block `b` (`L x d`). Dropout is active only when
    /// `dropout_rng` is given.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        b: Var,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<AttentionOutput> {
        let (l, d) = tape.value(b).dims2()?;
        if d != self.d || l == 0 {
            return Err(Error::shape(format!(
                "attention expects L x {} with L >= 1, got {:?}",
                self.d,
                tape.shape(b)
            )));
        }
        let p = |s: &str| self.param_name(s);
        let wq = tape.param(store, &p("wq"))?;
        let wk = tape.param(store, &p("wk"))?;
        let wv = tape.param(store, &p("wv"))?;
        let wo = tape.param(store, &p("wo"))?;
        let q = tape.matmul(b, wq)?;
        let k = tape.matmul(b, wk)?;
        let v = tape.matmul(b, wv)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();

        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        let mut contributions = vec![0.0; l];
        for h in 0..self.heads {
            let (lo, hi) = (h * self.head_dim, (h + 1) * self.head_dim);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let w = tape.softmax_rows(scores)?;
            let wt = tape.value(w).clone();
            for r in 0..l {
                for (c, acc) in contributions.iter_mut().enumerate() {
                    *acc += wt.get2(r, c) / self.heads as f64;
                }
            }
            weights.push(wt);
            heads.push(tape.matmul(w, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        let mha = tape.matmul(cat, wo)?;
        let mha = self.dropout(tape, mha, &mut dropout_rng)?;
        let res1 = tape.add(b, mha)?;
        let g1 = tape.param(store, &p("ln1.g"))?;
        let b1 = tape.param(store, &p("ln1.b"))?;
        let u = tape.layer_norm(res1, g1, b1, self.ln_eps)?;
        let f = self.ffn.forward(tape, store, u)?;
        let f = self.dropout(tape, f, &mut dropout_rng)?;
        let res2 = tape.add(u, f)?;
        let g2 = tape.param(store, &p("ln2.g"))?;
        let b2 = tape.param(store, &p("ln2.b"))?;
        let y = tape.layer_norm(res2, g2, b2, self.ln_eps)?;
        Ok(AttentionOutput { y, weights, contributions })
    }
}

/// Feeds each layer's output into the next. Weights and contributions come
/// from the last layer.
pub fn stack_forward(
    tape: &mut Tape,
    store: &ParameterStore,
    layers: &[AttentionLayer],
    b: Var,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<AttentionOutput> {
    let (first, rest) = layers
        .split_first()
        .ok_or_else(|| Error::config("attention stack needs at least one layer"))?;
    let mut out = first.forward(tape, store, b, dropout_rng.as_deref_mut())?;
    for layer in rest {
        out = layer.forward(tape, store, out.y, dropout_rng.as_deref_mut())?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn layer(d: usize, heads: usize, seed: u64) -> (ParameterStore, AttentionLayer) {
        let mut s = ParameterStore::new();
        let mut rng = stream_rng(seed, Stream::Init);
        let l = AttentionLayer::new(&mut s, "att", d, heads, 0.1, &mut rng).unwrap();
        (s, l)
    }

    fn random_block(l: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = stream_rng(seed, Stream::Model);
        Tensor::standard_normal(&[l, d], &mut rng)
    }

    #[test]
    fn single_row_identity_layer_passes_input_through() {
        let (mut s, mut layer) = layer(2, 1, 1);
        for name in ["wq", "wk", "wv", "wo"] {
            s.set(&layer.param_name(name), Tensor::identity(2)).unwrap();
        }
        for l in layer.ffn().layers() {
            let w = s.get_mut(l.weight_name()).unwrap();
            w.data_mut().fill(0.0);
            let b = s.get_mut(l.bias_name()).unwrap();
            b.data_mut().fill(0.0);
        }
        layer.ln_eps = 0.0;
        let mut tape = Tape::new();
        let b = tape.constant(Tensor::row(&[1.0, -1.0]));
        let out = layer.forward(&mut tape, &s, b, None).unwrap();
        assert_eq!(out.weights[0].data(), &[1.0]);
        assert_eq!(tape.value(out.y).data(), &[1.0, -1.0]);
    }

    #[test]
    fn identical_rows_give_uniform_weights() {
        let (s, layer) = layer(8, 2, 2);
        let row: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
        let mut tape = Tape::new();
        let b = tape.constant(Tensor::from_rows(&[row.clone(), row]).unwrap());
        let out = layer.forward(&mut tape, &s, b, None).unwrap();
        for w in &out.weights {
            for v in w.data() {
                assert!((v - 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rows_sum_to_one_and_contributions_to_l() {
        let (s, layer) = layer(16, 4, 3);
        let mut tape = Tape::new();
        let b = tape.constant(random_block(8, 16, 4));
        let out = layer.forward(&mut tape, &s, b, None).unwrap();
        for w in &out.weights {
            for r in 0..8 {
                let sum: f64 = w.row_slice(r).iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
        let total: f64 = out.contributions.iter().sum();
        assert!((total - 8.0).abs() < 1e-6);
        assert_eq!(tape.shape(out.y), &[8, 16]);
    }

    #[test]
    fn wrong_width_is_shape_error() {
        let (s, layer) = layer(8, 2, 5);
        let mut tape = Tape::new();
        let b = tape.constant(Tensor::zeros(&[3, 7]));
        assert!(matches!(layer.forward(&mut tape, &s, b, None), Err(Error::Shape(_))));
    }

    #[test]
    fn eval_mode_is_bit_identical() {
        let (s, layer) = layer(16, 4, 6);
        let block = random_block(5, 16, 7);
        let run = || {
            let mut tape = Tape::new();
            let b = tape.constant(block.clone());
            let out = layer.forward(&mut tape, &s, b, None).unwrap();
            tape.value(out.y).clone()
        };
        assert_eq!(run().data(), run().data());
    }

    #[test]
    fn dropout_changes_training_output() {
        let (s, layer) = layer(16, 4, 8);
        let block = random_block(5, 16, 9);
        let mut tape = Tape::new();
        let b = tape.constant(block);
        let eval = layer.forward(&mut tape, &s, b, None).unwrap();
        let mut rng = stream_rng(1, Stream::Model);
        let train = layer.forward(&mut tape, &s, b, Some(&mut rng)).unwrap();
        assert_ne!(tape.value(eval.y).data(), tape.value(train.y).data());
    }

    #[test]
    fn stack_depth_one_equals_single_layer_and_empty_is_error() {
        let (s, layer) = layer(16, 4, 10);
        let mut tape = Tape::new();
        let b = tape.constant(random_block(6, 16, 11));
        let single = layer.forward(&mut tape, &s, b, None).unwrap();
        let stacked = stack_forward(&mut tape, &s, std::slice::from_ref(&layer), b, None).unwrap();
        assert_eq!(tape.value(single.y).data(), tape.value(stacked.y).data());
        assert_eq!(single.contributions, stacked.contributions);
        assert!(matches!(stack_forward(&mut tape, &s, &[], b, None), Err(Error::Config(_))));
    }

    #[test]
    fn depth_two_contributions_come_from_last_layer() {
        let mut s = ParameterStore::new();
        let mut rng = stream_rng(12, Stream::Init);
        let layers: Vec<_> = (0..2)
            .map(|i| AttentionLayer::new(&mut s, &format!("att{i}"), 16, 4, 0.1, &mut rng).unwrap())
            .collect();
        let mut tape = Tape::new();
        let b = tape.constant(random_block(8, 16, 13));
        let one = stack_forward(&mut tape, &s, &layers[..1], b, None).unwrap();
        let two = stack_forward(&mut tape, &s, &layers, b, None).unwrap();
        assert_eq!(tape.shape(two.y), &[8, 16]);
        assert_ne!(one.contributions, two.contributions);
        let direct = layers[1].forward(&mut tape, &s, one.y, None).unwrap();
        assert_eq!(direct.contributions, two.contributions);
    }
}

//! Pre-norm Transformer encoder layers over padded batches.
//!
//! Activations are `[B·P, D]` matrices: utterance `b` of a batch occupies
//! rows `b·P..(b+1)·P`, and only its first `lengths[b]` rows are real frames.
//! Every operation except attention is position-wise, and attention never
//! looks at padded keys, so padded rows never influence real ones.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Graph, Init, ParamId, ParamStore, Result, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Valid frame counts of the utterances in a padded batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PadMask {
    lengths: Vec<usize>,
    padded_len: usize,
}

impl PadMask {
    pub fn new(lengths: Vec<usize>, padded_len: usize) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::Empty("pad mask"));
        }
        if let Some(&bad) = lengths.iter().find(|&&l| l == 0 || l > padded_len) {
            return Err(Error::InvalidShape(format!(
                "valid length {bad} outside 1..={padded_len}"
            )));
        }
        Ok(PadMask {
            lengths,
            padded_len,
        })
    }

    /// Mask for a single unpadded utterance.
    pub fn full(frames: usize) -> Result<Self> {
        Self::new(vec![frames], frames)
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn padded_len(&self) -> usize {
        self.padded_len
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    /// First activation row of utterance `b`.
    pub fn row_start(&self, b: usize) -> usize {
        b * self.padded_len
    }
}

/// Position-wise nonlinearity inside the feed-forward block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

/// Sinusoidal position table, `pe[s, 2i] = sin(s / 10000^(2i/D))` and
/// `pe[s, 2i+1] = cos(s / 10000^(2i/D))`.
pub fn positional_encoding(frames: usize, dim: usize) -> Result<Tensor> {
    if dim % 2 != 0 {
        return Err(Error::InvalidConfig(format!(
            "positional encoding needs an even dimension, got {dim}"
        )));
    }
    let mut pe = Tensor::zeros(&[frames, dim])?;
    let data = pe.data_mut();
    for s in 0..frames {
        for i in 0..dim / 2 {
            let freq = libm::pow(10000.0, (2 * i) as f64 / dim as f64);
            let angle = s as f64 / freq;
            data[s * dim + 2 * i] = libm::sin(angle);
            data[s * dim + 2 * i + 1] = libm::cos(angle);
        }
    }
    Ok(pe)
}

/// Position table repeated for every utterance of a padded batch.
pub fn batched_positional_encoding(mask: &PadMask, dim: usize) -> Result<Tensor> {
    let pe = positional_encoding(mask.padded_len(), dim)?;
    let mut data = Vec::with_capacity(pe.len() * mask.batch_size());
    for _ in 0..mask.batch_size() {
        data.extend_from_slice(pe.data());
    }
    Tensor::from_vec(&[mask.batch_size() * mask.padded_len(), dim], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormParams {
    pub fn register(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        Ok(NormParams {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::new(&[dim], Init::Constant(1.0))?)?,
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[dim])?)?,
        })
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

/// Affine map `x · W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(LinearParams {
            weight: store.add(
                format!("{prefix}.weight"),
                Tensor::new(&[fan_in, fan_out], Init::ScaledNormal { seed })?,
            )?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[fan_out])?)?,
        })
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, b)
    }
}

/// Parameters of one encoder layer. Attention projections carry no bias.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderLayerParams {
    pub attn_norm: NormParams,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub ffn_norm: NormParams,
    pub ffn_in: LinearParams,
    pub ffn_out: LinearParams,
    pub heads: usize,
    pub activation: Activation,
}

impl EncoderLayerParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "model dim {dim} not divisible by {heads} heads"
            )));
        }
        let mut proj = |name: &str, k: u64| {
            store.add(
                format!("{prefix}.attn.{name}"),
                Tensor::new(&[dim, dim], Init::ScaledNormal { seed: seed + k })?,
            )
        };
        let (w_q, w_k, w_v, w_o) = (proj("q", 0)?, proj("k", 1)?, proj("v", 2)?, proj("o", 3)?);
        Ok(EncoderLayerParams {
            attn_norm: NormParams::register(store, &format!("{prefix}.attn_norm"), dim)?,
            w_q,
            w_k,
            w_v,
            w_o,
            ffn_norm: NormParams::register(store, &format!("{prefix}.ffn_norm"), dim)?,
            ffn_in: LinearParams::register(store, &format!("{prefix}.ffn.in"), dim, ffn_dim, seed + 4)?,
            ffn_out: LinearParams::register(store, &format!("{prefix}.ffn.out"), ffn_dim, dim, seed + 5)?,
            heads,
            activation,
        })
    }
}

/// `x + W_o · MHA(LN(x))`.
pub fn self_attention(
    g: &mut Graph<'_>,
    x: Var,
    layer: &EncoderLayerParams,
    mask: &PadMask,
) -> Result<Var> {
    let h = layer.attn_norm.apply(g, x)?;
    let (wq, wk, wv, wo) = (
        g.param(layer.w_q),
        g.param(layer.w_k),
        g.param(layer.w_v),
        g.param(layer.w_o),
    );
    let q = g.matmul(h, wq)?;
    let k = g.matmul(h, wk)?;
    let v = g.matmul(h, wv)?;
    let ctx = g.attention(q, k, v, layer.heads, mask)?;
    let o = g.matmul(ctx, wo)?;
    g.add(x, o)
}

/// `x + W₂ · act(W₁ · LN(x) + b₁) + b₂`.
pub fn ffn(g: &mut Graph<'_>, x: Var, layer: &EncoderLayerParams) -> Result<Var> {
    let h = layer.ffn_norm.apply(g, x)?;
    let inner = layer.ffn_in.apply(g, h)?;
    let act = match layer.activation {
        Activation::Relu => g.relu(inner),
        Activation::Gelu => g.gelu(inner),
    };
    let o = layer.ffn_out.apply(g, act)?;
    g.add(x, o)
}

pub fn encoder_layer(
    g: &mut Graph<'_>,
    x: Var,
    layer: &EncoderLayerParams,
    mask: &PadMask,
) -> Result<Var> {
    let mid = self_attention(g, x, layer, mask)?;
    ffn(g, mid, layer)
}

/// Projects `[B·P, D_feat]` features to the model dimension and adds the
/// position table. No temporal subsampling.
pub fn embed_input(
    g: &mut Graph<'_>,
    features: Var,
    proj: &LinearParams,
    mask: &PadMask,
) -> Result<Var> {
    let x = proj.apply(g, features)?;
    let dim = g.value(x).cols();
    if g.value(x).rows() != mask.batch_size() * mask.padded_len() {
        return Err(Error::InvalidShape(format!(
            "features have {} rows, mask describes {}x{}",
            g.value(x).rows(),
            mask.batch_size(),
            mask.padded_len()
        )));
    }
    let pe = g.input(batched_positional_encoding(mask, dim)?);
    g.add(x, pe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    fn layer_store(dim: usize, heads: usize, ffn_dim: usize) -> (ParamStore, EncoderLayerParams) {
        let mut store = ParamStore::new();
        let layer =
            EncoderLayerParams::register(&mut store, "l0", dim, heads, ffn_dim, Activation::Relu, 5)
                .unwrap();
        (store, layer)
    }

    fn input(rows: usize, cols: usize, seed: u64) -> Tensor {
        Tensor::new(&[rows, cols], Init::Uniform { lo: -1.0, hi: 1.0, seed }).unwrap()
    }

    fn zero(store: &mut ParamStore, id: ParamId) {
        let shape = store.get(id).value.shape().to_vec();
        store.set_value(id, Tensor::zeros(&shape).unwrap()).unwrap();
    }

    #[test]
    fn positional_encoding_basics() {
        let pe = positional_encoding(8, 6).unwrap();
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(positional_encoding(4, 5).is_err());
    }

    #[test]
    fn single_frame_attention_is_value_path() {
        let (store, layer) = layer_store(4, 2, 8);
        let mask = PadMask::full(1).unwrap();
        let mut g = Graph::new(&store);
        let x = g.input(input(1, 4, 1));
        let out = self_attention(&mut g, x, &layer, &mask).unwrap();
        let attn = g.len() - 3;
        let weights = g.attention_weights(Var(attn)).unwrap();
        assert_eq!(weights, &[1.0, 1.0]);

        // manual chain: x + LN(x)·Wv·Wo
        let mut g2 = Graph::new(&store);
        let x2 = g2.input(input(1, 4, 1));
        let h = layer.attn_norm.apply(&mut g2, x2).unwrap();
        let wv = g2.param(layer.w_v);
        let wo = g2.param(layer.w_o);
        let v = g2.matmul(h, wv).unwrap();
        let o = g2.matmul(v, wo).unwrap();
        let expect = g2.add(x2, o).unwrap();
        assert!(g.value(out).max_abs_diff(g2.value(expect)) < 1e-14);
    }

    #[test]
    fn padded_keys_get_no_weight() {
        let (store, layer) = layer_store(4, 2, 8);
        let mask = PadMask::new(vec![2, 3], 3).unwrap();
        let mut g = Graph::new(&store);
        let x = g.input(input(6, 4, 2));
        self_attention(&mut g, x, &layer, &mask).unwrap();
        let weights = g.attention_weights(Var(g.len() - 3)).unwrap();
        // utterance 0, both heads: key 2 is padding
        for h in 0..2 {
            for q in 0..3 {
                assert_eq!(weights[(h * 3 + q) * 3 + 2], 0.0);
            }
        }
    }

    #[test]
    fn zero_output_weights_give_residual_only() {
        let (mut store, layer) = layer_store(4, 2, 8);
        zero(&mut store, layer.w_o);
        zero(&mut store, layer.ffn_out.weight);
        let mask = PadMask::full(3).unwrap();
        let mut g = Graph::new(&store);
        let xin = input(3, 4, 3);
        let x = g.input(xin.clone());
        let mid = self_attention(&mut g, x, &layer, &mask).unwrap();
        let f = ffn(&mut g, mid, &layer).unwrap();
        assert_eq!(g.value(f), &xin);
        let y = encoder_layer(&mut g, x, &layer, &mask).unwrap();
        assert_eq!(g.value(y), &xin);
    }

    #[test]
    fn ffn_is_position_wise() {
        let (store, layer) = layer_store(4, 2, 8);
        let xin = input(3, 4, 4);
        let perm = [2usize, 0, 1];
        let mut permuted = Vec::new();
        for &r in &perm {
            permuted.extend_from_slice(xin.row(r));
        }
        let mut g = Graph::new(&store);
        let a = g.input(xin);
        let b = g.input(Tensor::from_vec(&[3, 4], permuted).unwrap());
        let ya = ffn(&mut g, a, &layer).unwrap();
        let yb = ffn(&mut g, b, &layer).unwrap();
        for (i, &r) in perm.iter().enumerate() {
            assert_eq!(g.value(yb).row(i), g.value(ya).row(r));
        }
    }

    #[test]
    fn embed_identity_projection() {
        let mut store = ParamStore::new();
        let proj = LinearParams::register(&mut store, "embed", 4, 4, 0).unwrap();
        store.set_value(proj.weight, Tensor::eye(4).unwrap()).unwrap();
        let feats = input(5, 4, 6);
        let mask = PadMask::full(5).unwrap();
        let mut g = Graph::new(&store);
        let x = g.input(feats.clone());
        let y = embed_input(&mut g, x, &proj, &mask).unwrap();
        let pe = positional_encoding(5, 4).unwrap();
        assert_eq!(g.value(y).shape(), &[5, 4]);
        for i in 0..feats.len() {
            assert!((g.value(y).data()[i] - feats.data()[i] - pe.data()[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_gradients() {
        let (mut store, layer) = layer_store(4, 2, 8);
        let x = store.add("x", input(3, 4, 7)).unwrap();
        let ids = [x, layer.w_q, layer.w_k, layer.w_v, layer.w_o, layer.attn_norm.gamma];
        let mask = PadMask::full(3).unwrap();
        let r = grad_check(&mut store, Some(&ids), 1e-5, |g| {
            let xv = g.param(x);
            let y = self_attention(g, xv, &layer, &mask)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn padded_attention_gradients() {
        let (mut store, layer) = layer_store(4, 2, 8);
        let x = store.add("x", input(6, 4, 8)).unwrap();
        let ids = [x, layer.w_q, layer.w_k, layer.w_v];
        let mask = PadMask::new(vec![3, 2], 3).unwrap();
        let r = grad_check(&mut store, Some(&ids), 1e-5, |g| {
            let xv = g.param(x);
            let y = self_attention(g, xv, &layer, &mask)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn ffn_gradients_both_activations() {
        for act in [Activation::Relu, Activation::Gelu] {
            let mut store = ParamStore::new();
            let layer = EncoderLayerParams::register(&mut store, "l", 4, 1, 6, act, 9).unwrap();
            let x = store.add("x", input(3, 4, 10)).unwrap();
            let r = grad_check(&mut store, None, 1e-5, |g| {
                let xv = g.param(x);
                let y = ffn(g, xv, &layer)?;
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            })
            .unwrap();
            assert!(r.max_rel_err < 1e-5, "{act:?}: {r:?}");
        }
    }

    #[test]
    fn embed_gradients() {
        let mut store = ParamStore::new();
        let proj = LinearParams::register(&mut store, "embed", 3, 4, 1).unwrap();
        let feats = input(5, 3, 11);
        let mask = PadMask::full(5).unwrap();
        let r = grad_check(&mut store, None, 1e-5, |g| {
            let x = g.input(feats.clone());
            let y = embed_input(g, x, &proj, &mask)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "{r:?}");
    }

    #[test]
    fn mask_rejects_bad_lengths() {
        assert!(PadMask::new(vec![4], 3).is_err());
        assert!(PadMask::new(vec![0], 3).is_err());
        assert!(PadMask::new(vec![], 3).is_err());
    }
}

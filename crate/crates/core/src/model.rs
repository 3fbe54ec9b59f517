//! Encoder with intermediate CTC predictions and optional self-conditioning.
//!
//! After each selected layer `l` the shared prediction head turns the layer
//! output into a posterior grid `Z_l`. In [`Mode::SelfCond`] the next layer
//! then receives `LN(X_l) + in_proj(Z_l)` instead of `X_l`, where `LN` is the
//! head's own layer norm and `in_proj` maps `|V'|` back to the model
//! dimension. Every `Z_l` also gets a CTC loss; the training objective is
//! `(1 − λ) · ctc(Z_L) + λ · mean_l ctc(Z_l)`.
//!
//! [`Mode::InterCtc`] keeps the intermediate losses but passes `X_l` through
//! unchanged, and [`Mode::PlainCtc`] uses the final layer only.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::ctc::{LabelSequence, PosteriorGrid, Vocabulary};
use crate::encoder::{self, Activation, EncoderLayerParams, LinearParams, NormParams, PadMask};
use crate::graph::CtcStatus;
use crate::{Error, Graph, ParamStore, Result, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    PlainCtc,
    InterCtc,
    SelfCond,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::PlainCtc => "plain-ctc",
            Mode::InterCtc => "interctc",
            Mode::SelfCond => "selfcond",
        }
    }

    pub fn has_intermediate(self) -> bool {
        self != Mode::PlainCtc
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain-ctc" => Ok(Mode::PlainCtc),
            "interctc" => Ok(Mode::InterCtc),
            "selfcond" => Ok(Mode::SelfCond),
            other => Err(Error::InvalidConfig(format!(
                "unknown mode {other:?} (expected plain-ctc, interctc or selfcond)"
            ))),
        }
    }
}

/// Layers `⌊k·L/(K+1)⌋` for `k = 1..=K`, 1-based, ascending, deduplicated.
pub fn select_intermediate_layers(layers: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k >= layers {
        return Err(Error::InvalidConfig(format!(
            "intermediate loss count K={k} must satisfy 1 <= K <= L-1 with L={layers}"
        )));
    }
    let mut out: Vec<usize> = (1..=k).map(|i| i * layers / (k + 1)).collect();
    out.dedup();
    out.retain(|&l| l >= 1 && l < layers);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub feat_dim: usize,
    pub vocab: Vocabulary,
    /// Number of intermediate CTC losses.
    pub k: usize,
    /// Weight of the intermediate losses in the total objective.
    pub lambda: f64,
    pub mode: Mode,
    pub activation: Activation,
    pub seed: u64,
}

impl ModelConfig {
    /// 18 layers, 256 dims, 4 heads, K = 5, λ = 0.5, self-conditioning.
    pub fn reference(vocab: Vocabulary, feat_dim: usize) -> Self {
        ModelConfig {
            layers: 18,
            dim: 256,
            heads: 4,
            ffn_dim: 1024,
            feat_dim,
            vocab,
            k: 5,
            lambda: 0.5,
            mode: Mode::SelfCond,
            activation: Activation::Relu,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.layers == 0 {
            return bad("layer count must be >= 1".into());
        }
        if self.dim < 2 || self.dim % 2 != 0 {
            return bad(format!("model dim must be even and >= 2, got {}", self.dim));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("model dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.ffn_dim == 0 || self.feat_dim == 0 {
            return bad("ffn and feature dims must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if self.mode.has_intermediate() {
            select_intermediate_layers(self.layers, self.k)?;
        }
        Ok(())
    }

    /// Layers carrying an intermediate prediction; empty for plain CTC.
    pub fn intermediate_layers(&self) -> Vec<usize> {
        if self.mode.has_intermediate() {
            select_intermediate_layers(self.layers, self.k).unwrap_or_default()
        } else {
            Vec::new()
        }
    }
}

/// Shared prediction head and the shared back-projection of predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadParams {
    pub norm: NormParams,
    pub out_proj: LinearParams,
    pub in_proj: LinearParams,
}

/// Log posteriors of the head, plus the normalized input they came from.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    pub normed: Var,
    pub log_probs: Var,
}

/// `log_softmax(out_proj(LN(x)))`.
pub fn prediction_head(g: &mut Graph<'_>, x: Var, head: &HeadParams) -> Result<HeadOutput> {
    let normed = head.norm.apply(g, x)?;
    let logits = head.out_proj.apply(g, normed)?;
    Ok(HeadOutput {
        normed,
        log_probs: g.log_softmax(logits),
    })
}

/// Input of the layer after an intermediate prediction: `x` itself unless
/// self-conditioning, then `LN(x) + in_proj(exp(z))` with the head's norm.
pub fn condition_input(
    g: &mut Graph<'_>,
    x: Var,
    z: Var,
    head: &HeadParams,
    mode: Mode,
) -> Result<Var> {
    if mode != Mode::SelfCond {
        return Ok(x);
    }
    let normed = head.norm.apply(g, x)?;
    let probs = g.exp(z);
    let injected = head.in_proj.apply(g, probs)?;
    g.add(normed, injected)
}

/// Graph handles produced by [`Model::forward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `(layer, Z_l)` for each selected layer, ascending.
    pub intermediate: Vec<(usize, Var)>,
    pub final_grid: Var,
    /// Output of every encoder layer, before any conditioning.
    pub layer_outputs: Vec<Var>,
    pub mask: PadMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub embed: LinearParams,
    pub layers: Vec<EncoderLayerParams>,
    pub head: HeadParams,
}

fn derive_seed(seed: u64, slot: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(slot.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let c = &config;
        let embed = LinearParams::register(&mut params, "embed", c.feat_dim, c.dim, derive_seed(c.seed, 0))?;
        let layers = (0..c.layers)
            .map(|l| {
                EncoderLayerParams::register(
                    &mut params,
                    &format!("layers.{l}"),
                    c.dim,
                    c.heads,
                    c.ffn_dim,
                    c.activation,
                    derive_seed(c.seed, 100 * (l as u64 + 1)),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let classes = c.vocab.num_classes();
        let head = HeadParams {
            norm: NormParams::register(&mut params, "head.norm", c.dim)?,
            out_proj: LinearParams::register(&mut params, "head.out", c.dim, classes, derive_seed(c.seed, 1))?,
            in_proj: LinearParams::register(&mut params, "cond.in", classes, c.dim, derive_seed(c.seed, 2))?,
        };
        Ok(Model {
            config,
            params,
            embed,
            layers,
            head,
        })
    }

    /// Rebuilds a model around stored parameters, which must match the
    /// layout `config` implies name for name and shape for shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Model::new(config)?;
        if !model.params.same_layout(&params) {
            return Err(Error::Contract(
                "stored parameters do not match the model layout".into(),
            ));
        }
        model.params = params;
        Ok(model)
    }

    /// Runs the encoder on `[B·P, D_feat]` features.
    pub fn forward(&self, g: &mut Graph<'_>, features: Var, mask: &PadMask) -> Result<ForwardTrace> {
        let selected = self.config.intermediate_layers();
        let mut x = encoder::embed_input(g, features, &self.embed, mask)?;
        let mut intermediate = Vec::with_capacity(selected.len());
        let mut layer_outputs = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let l = i + 1;
            x = encoder::encoder_layer(g, x, layer, mask)?;
            layer_outputs.push(x);
            if selected.contains(&l) {
                let z = prediction_head(g, x, &self.head)?;
                intermediate.push((l, z.log_probs));
                if self.config.mode == Mode::SelfCond {
                    // reuse the head's normalization of x
                    let probs = g.exp(z.log_probs);
                    let injected = self.head.in_proj.apply(g, probs)?;
                    x = g.add(z.normed, injected)?;
                }
            }
        }
        let final_grid = prediction_head(g, x, &self.head)?.log_probs;
        Ok(ForwardTrace {
            intermediate,
            final_grid,
            layer_outputs,
            mask: mask.clone(),
        })
    }

    /// Forward pass without keeping the graph; returns per-utterance grids.
    pub fn predict(&self, features: &Tensor, mask: &PadMask) -> Result<Prediction> {
        let mut g = Graph::new(&self.params);
        let x = g.input(features.clone());
        let trace = self.forward(&mut g, x, mask)?;
        let grids = |v: Var| -> Result<Vec<PosteriorGrid>> {
            let t = g.value(v);
            (0..mask.batch_size())
                .map(|b| PosteriorGrid::new(t.slice_rows(mask.row_start(b), mask.lengths()[b])?))
                .collect()
        };
        Ok(Prediction {
            final_grids: grids(trace.final_grid)?,
            intermediate: trace
                .intermediate
                .iter()
                .map(|&(l, v)| Ok((l, grids(v)?)))
                .collect::<Result<Vec<_>>>()?,
        })
    }
}

/// Posterior grids of one forward pass, unpadded, one per utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub final_grids: Vec<PosteriorGrid>,
    pub intermediate: Vec<(usize, Vec<PosteriorGrid>)>,
}

/// Loss terms of one utterance.
#[derive(Debug, Clone)]
pub struct UtteranceLoss {
    pub total: Var,
    pub final_ctc: Var,
    /// `(layer, ctc(Z_l))` for each intermediate prediction.
    pub intermediate: Vec<(usize, Var)>,
    /// Mean of the intermediate terms, if any.
    pub intermediate_mean: Option<Var>,
    pub status: CtcStatus,
}

/// `(1/K) Σ_k ctc(Z_{l_k}, y)` for utterance `b` of the batch, with the
/// individual terms.
pub fn intermediate_loss(
    g: &mut Graph<'_>,
    trace: &ForwardTrace,
    b: usize,
    labels: &LabelSequence,
) -> Result<Option<(Var, Vec<(usize, Var)>)>> {
    if trace.intermediate.is_empty() {
        return Ok(None);
    }
    let (start, frames) = (trace.mask.row_start(b), trace.mask.lengths()[b]);
    let terms = trace
        .intermediate
        .iter()
        .map(|&(l, z)| Ok((l, g.ctc_loss(z, start, frames, labels)?.0)))
        .collect::<Result<Vec<_>>>()?;
    let w = 1.0 / terms.len() as f64;
    let weighted: Vec<(Var, f64)> = terms.iter().map(|&(_, v)| (v, w)).collect();
    Ok(Some((g.weighted_sum(&weighted)?, terms)))
}

/// `(1 − λ) · ctc(Z_L, y) + λ · intermediate_loss` for utterance `b`. Plain
/// CTC traces have no intermediate term and the total is the final loss.
pub fn total_loss(
    g: &mut Graph<'_>,
    trace: &ForwardTrace,
    b: usize,
    labels: &LabelSequence,
    lambda: f64,
) -> Result<UtteranceLoss> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidConfig(format!("lambda {lambda} outside [0, 1]")));
    }
    let (start, frames) = (trace.mask.row_start(b), trace.mask.lengths()[b]);
    let (final_ctc, status) = g.ctc_loss(trace.final_grid, start, frames, labels)?;
    let inter = intermediate_loss(g, trace, b, labels)?;
    let (total, intermediate, intermediate_mean) = match inter {
        Some((mean, terms)) => (
            g.weighted_sum(&[(final_ctc, 1.0 - lambda), (mean, lambda)])?,
            terms,
            Some(mean),
        ),
        None => (final_ctc, Vec::new(), None),
    };
    Ok(UtteranceLoss {
        total,
        final_ctc,
        intermediate,
        intermediate_mean,
        status,
    })
}

/// Mean loss over the feasible utterances of a batch.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    /// `None` when every utterance was infeasible.
    pub root: Option<Var>,
    pub per_utterance: Vec<UtteranceLoss>,
    pub infeasible: usize,
}

pub fn batch_loss(
    g: &mut Graph<'_>,
    trace: &ForwardTrace,
    labels: &[LabelSequence],
    lambda: f64,
) -> Result<BatchLoss> {
    if labels.len() != trace.mask.batch_size() {
        return Err(Error::Contract(format!(
            "{} label sequences for a batch of {}",
            labels.len(),
            trace.mask.batch_size()
        )));
    }
    let per_utterance = labels
        .iter()
        .enumerate()
        .map(|(b, y)| total_loss(g, trace, b, y, lambda))
        .collect::<Result<Vec<_>>>()?;
    let feasible: Vec<Var> = per_utterance
        .iter()
        .filter(|u| u.status == CtcStatus::Feasible)
        .map(|u| u.total)
        .collect();
    let infeasible = per_utterance.len() - feasible.len();
    let root = if feasible.is_empty() {
        None
    } else {
        let w = 1.0 / feasible.len() as f64;
        let terms: Vec<(Var, f64)> = feasible.iter().map(|&v| (v, w)).collect();
        Some(g.weighted_sum(&terms)?)
    };
    Ok(BatchLoss {
        root,
        per_utterance,
        infeasible,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::Init;

    fn config(mode: Mode, layers: usize, k: usize) -> ModelConfig {
        ModelConfig {
            layers,
            dim: 8,
            heads: 2,
            ffn_dim: 16,
            feat_dim: 3,
            vocab: Vocabulary::new(&["a", "b", "c"]).unwrap(),
            k,
            lambda: 0.5,
            mode,
            activation: Activation::Relu,
            seed: 3,
        }
    }

    fn features(rows: usize, seed: u64) -> Tensor {
        Tensor::new(&[rows, 3], Init::Uniform { lo: -1.0, hi: 1.0, seed }).unwrap()
    }

    #[test]
    fn layer_selection_examples() {
        assert_eq!(select_intermediate_layers(18, 5).unwrap(), [3, 6, 9, 12, 15]);
        assert_eq!(select_intermediate_layers(12, 1).unwrap(), [6]);
        assert_eq!(select_intermediate_layers(12, 5).unwrap(), [2, 4, 6, 8, 10]);
        assert!(select_intermediate_layers(6, 0).is_err());
        assert!(select_intermediate_layers(6, 6).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(config(Mode::SelfCond, 3, 0).validate().is_err());
        assert!(config(Mode::PlainCtc, 3, 0).validate().is_ok());
        let mut c = config(Mode::SelfCond, 3, 1);
        c.lambda = 1.5;
        assert!(c.validate().is_err());
        c.lambda = 0.5;
        c.heads = 3;
        assert!(c.validate().is_err());
        assert_eq!("interctc".parse::<Mode>().unwrap(), Mode::InterCtc);
        assert!("ctc".parse::<Mode>().is_err());
    }

    #[test]
    fn zero_out_proj_gives_uniform_rows() {
        let mut model = Model::new(config(Mode::SelfCond, 2, 1)).unwrap();
        let w = model.head.out_proj.weight;
        model.params.set_value(w, Tensor::zeros(&[8, 4]).unwrap()).unwrap();
        let mask = PadMask::full(4).unwrap();
        let pred = model.predict(&features(4, 1), &mask).unwrap();
        for grid in pred.final_grids.iter().chain(&pred.intermediate[0].1) {
            for &v in grid.log_probs().data() {
                assert!((v + libm::log(4.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn condition_input_modes() {
        let mut model = Model::new(config(Mode::SelfCond, 2, 1)).unwrap();
        let mut g = Graph::new(&model.params);
        let x = g.input(Tensor::new(&[3, 8], Init::Uniform { lo: -2.0, hi: 2.0, seed: 4 }).unwrap());
        let z = prediction_head(&mut g, x, &model.head).unwrap().log_probs;
        let same = condition_input(&mut g, x, z, &model.head, Mode::InterCtc).unwrap();
        assert_eq!(same, x);
        drop(g);

        let w = model.head.in_proj.weight;
        let b = model.head.in_proj.bias;
        model.params.set_value(w, Tensor::zeros(&[4, 8]).unwrap()).unwrap();
        model.params.set_value(b, Tensor::zeros(&[8]).unwrap()).unwrap();
        let mut g = Graph::new(&model.params);
        let x = g.input(Tensor::new(&[3, 8], Init::Uniform { lo: -2.0, hi: 2.0, seed: 4 }).unwrap());
        let z = prediction_head(&mut g, x, &model.head).unwrap();
        let cond = condition_input(&mut g, x, z.log_probs, &model.head, Mode::SelfCond).unwrap();
        assert_eq!(g.value(cond), g.value(z.normed));
    }

    #[test]
    fn conditioning_is_position_wise() {
        let model = Model::new(config(Mode::SelfCond, 2, 1)).unwrap();
        let base = Tensor::new(&[4, 8], Init::Uniform { lo: -1.0, hi: 1.0, seed: 5 }).unwrap();
        let z0 = crate::ctc::log_softmax_rows(
            &Tensor::new(&[4, 4], Init::Uniform { lo: -1.0, hi: 1.0, seed: 6 }).unwrap(),
        );
        let mut z1 = z0.clone();
        // swap two entries in frame 2: still normalized
        z1.data_mut().swap(8, 9);
        let mut g = Graph::new(&model.params);
        let x = g.input(base);
        let za = g.input(z0);
        let zb = g.input(z1);
        let a = condition_input(&mut g, x, za, &model.head, Mode::SelfCond).unwrap();
        let b = condition_input(&mut g, x, zb, &model.head, Mode::SelfCond).unwrap();
        for s in 0..4 {
            let same = g.value(a).row(s) == g.value(b).row(s);
            assert_eq!(same, s != 2, "frame {s}");
        }
    }

    #[test]
    fn trace_shapes_per_mode() {
        let mask = PadMask::full(5).unwrap();
        for (mode, n) in [(Mode::PlainCtc, 0), (Mode::InterCtc, 2), (Mode::SelfCond, 2)] {
            let model = Model::new(config(mode, 3, 2)).unwrap();
            let mut g = Graph::new(&model.params);
            let x = g.input(features(5, 7));
            let trace = model.forward(&mut g, x, &mask).unwrap();
            assert_eq!(trace.intermediate.len(), n);
            assert_eq!(trace.layer_outputs.len(), 3);
            assert_eq!(g.value(trace.final_grid).shape(), &[5, 4]);
            if n > 0 {
                let layers: Vec<usize> = trace.intermediate.iter().map(|p| p.0).collect();
                assert_eq!(layers, select_intermediate_layers(3, 2).unwrap());
            }
        }
    }

    #[test]
    fn interctc_matches_plain_ctc_bitwise() {
        let plain = Model::new(config(Mode::PlainCtc, 3, 1)).unwrap();
        let mut inter = plain.clone();
        inter.config.mode = Mode::InterCtc;
        let mask = PadMask::full(6).unwrap();
        let f = features(6, 8);
        let a = plain.predict(&f, &mask).unwrap();
        let b = inter.predict(&f, &mask).unwrap();
        assert_eq!(a.final_grids, b.final_grids);
        assert!(a.intermediate.is_empty() && b.intermediate.len() == 1);
    }

    #[test]
    fn loss_weighting() {
        let model = Model::new(config(Mode::SelfCond, 3, 2)).unwrap();
        let mask = PadMask::full(6).unwrap();
        let y = LabelSequence::new(vec![1, 2, 2]).unwrap();
        let mut g = Graph::new(&model.params);
        let x = g.input(features(6, 9));
        let trace = model.forward(&mut g, x, &mask).unwrap();
        let values = |g: &mut Graph<'_>, lambda: f64| {
            let u = total_loss(g, &trace, 0, &y, lambda).unwrap();
            let mean = g.value(u.intermediate_mean.unwrap()).item();
            let terms: Vec<f64> = u.intermediate.iter().map(|p| g.value(p.1).item()).collect();
            (g.value(u.total).item(), g.value(u.final_ctc).item(), mean, terms)
        };
        let (t0, fin, mean, terms) = values(&mut g, 0.0);
        assert_eq!(t0, fin);
        assert!((mean - (terms[0] + terms[1]) / 2.0).abs() < 1e-12);
        let (t1, _, _, _) = values(&mut g, 1.0);
        assert_eq!(t1, mean);
        let (th, _, _, _) = values(&mut g, 0.5);
        assert!((th - (fin + mean) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn end_to_end_gradients() {
        let mut model = Model::new(config(Mode::SelfCond, 2, 1)).unwrap();
        let mask = PadMask::full(4).unwrap();
        let y = LabelSequence::new(vec![1, 3]).unwrap();
        let f = features(4, 10);
        let Model { config, params, .. } = &mut model;
        let shadow = Model::new(config.clone()).unwrap();
        let r = grad_check(params, None, 1e-5, |g| {
            let x = g.input(f.clone());
            let trace = shadow.forward(g, x, &mask)?;
            Ok(total_loss(g, &trace, 0, &y, 0.5)?.total)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}

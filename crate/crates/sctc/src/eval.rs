//! Decoding, scoring, latency measurement and per-layer inspection.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;

use sctc_core::ctc::{greedy_decode, LabelSequence, PosteriorGrid, Vocabulary};
use sctc_core::encoder::{self, PadMask};
use sctc_core::metrics::{edit_distance, ErrorCounts};
use sctc_core::model::{prediction_head, Mode, Model};
use sctc_core::synth::{Batch, Utterance};
use sctc_core::Graph;

use crate::{Error, Result};

/// Utterances per forward pass when decoding for scoring.
pub const DECODE_BATCH: usize = 32;

/// Frame period assumed when converting frame counts to input duration.
pub const FRAME_PERIOD: Duration = Duration::from_millis(10);

/// Greedy hypotheses for `utts`, in input order. Utterances are grouped by
/// length into padded batches; padding does not change the result.
pub fn decode(model: &Model, utts: &[Utterance], batch_size: usize) -> Result<Vec<LabelSequence>> {
    let mut order: Vec<usize> = (0..utts.len()).collect();
    order.sort_by_key(|&i| utts[i].frames());
    let chunks: Vec<&[usize]> = order.chunks(batch_size.max(1)).collect();
    let decoded = chunks
        .par_iter()
        .map(|chunk| -> Result<Vec<LabelSequence>> {
            let batch = Batch::from_utterances(&chunk.iter().map(|&i| &utts[i]).collect::<Vec<_>>())?;
            let pred = model.predict(&batch.features, &batch.mask)?;
            Ok(pred.final_grids.iter().map(greedy_decode).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = vec![LabelSequence::default(); utts.len()];
    for (chunk, hyps) in chunks.iter().zip(decoded) {
        for (&i, h) in chunk.iter().zip(hyps) {
            out[i] = h;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct UtteranceScore {
    pub id: String,
    pub hyp: String,
    #[serde(rename = "ref")]
    pub reference: String,
    #[serde(rename = "S")]
    pub substitutions: usize,
    #[serde(rename = "I")]
    pub insertions: usize,
    #[serde(rename = "D")]
    pub deletions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub counts: ErrorCounts,
    pub utterances: Vec<UtteranceScore>,
}

impl ScoreReport {
    /// Aggregate token error rate in percent.
    pub fn error_rate_percent(&self) -> f64 {
        100.0 * self.counts.rate()
    }

    /// One JSON object per utterance.
    pub fn records(&self) -> Vec<String> {
        self.utterances
            .iter()
            .map(|u| serde_json::to_string(u).expect("plain record"))
            .collect()
    }

    pub fn summary(&self) -> String {
        let c = &self.counts;
        format!(
            "TER {:.2}% ({} errors / {} tokens; S={} I={} D={}) over {} utterances",
            self.error_rate_percent(),
            c.errors(),
            c.ref_len,
            c.substitutions,
            c.insertions,
            c.deletions,
            self.utterances.len()
        )
    }
}

/// Scores `(id, hyp, ref)` triples; the rate is total errors over total
/// reference tokens.
pub fn score<'a>(
    vocab: &Vocabulary,
    items: impl IntoIterator<Item = (&'a str, &'a LabelSequence, &'a LabelSequence)>,
) -> ScoreReport {
    let mut counts = ErrorCounts::default();
    let utterances = items
        .into_iter()
        .map(|(id, hyp, reference)| {
            let c = edit_distance(hyp.ids(), reference.ids());
            counts.merge(&c);
            UtteranceScore {
                id: id.to_string(),
                hyp: vocab.decode(hyp).join(" "),
                reference: vocab.decode(reference).join(" "),
                substitutions: c.substitutions,
                insertions: c.insertions,
                deletions: c.deletions,
            }
        })
        .collect();
    ScoreReport { counts, utterances }
}

/// Greedy-decodes and scores every utterance.
pub fn score_dataset(model: &Model, utts: &[Utterance]) -> Result<ScoreReport> {
    let hyps = decode(model, utts, DECODE_BATCH)?;
    Ok(score(
        &model.config.vocab,
        utts.iter().zip(&hyps).map(|(u, h)| (u.id.as_str(), h, &u.labels)),
    ))
}

/// Wall time spent in each part of a batch-size-1 decode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageTimes {
    /// Input projection and encoder layers.
    pub encoder: Duration,
    /// Prediction heads: intermediate and final.
    pub heads: Duration,
    /// Feeding intermediate predictions back into the encoder.
    pub conditioning: Duration,
    /// Argmax and collapse of the final grid.
    pub search: Duration,
}

impl StageTimes {
    pub fn total(&self) -> Duration {
        self.encoder + self.heads + self.conditioning + self.search
    }

    fn add(&mut self, other: &StageTimes) {
        self.encoder += other.encoder;
        self.heads += other.heads;
        self.conditioning += other.conditioning;
        self.search += other.search;
    }
}

/// Decodes one utterance, timing each stage. Computes exactly what
/// [`Model::forward`] followed by greedy decoding computes.
pub fn timed_decode(model: &Model, utt: &Utterance) -> Result<(LabelSequence, StageTimes)> {
    let mut times = StageTimes::default();
    let mask = PadMask::full(utt.frames())?;
    let mut g = Graph::new(&model.params);
    let mut t = Instant::now();
    let mut lap = |slot: &mut Duration| {
        let now = Instant::now();
        *slot += now - t;
        t = now;
    };
    let features = g.input(utt.features.clone());
    let mut x = encoder::embed_input(&mut g, features, &model.embed, &mask)?;
    lap(&mut times.encoder);
    let selected = model.config.intermediate_layers();
    for (i, layer) in model.layers.iter().enumerate() {
        x = encoder::encoder_layer(&mut g, x, layer, &mask)?;
        lap(&mut times.encoder);
        if selected.contains(&(i + 1)) {
            let z = prediction_head(&mut g, x, &model.head)?;
            lap(&mut times.heads);
            if model.config.mode == Mode::SelfCond {
                let probs = g.exp(z.log_probs);
                let injected = model.head.in_proj.apply(&mut g, probs)?;
                x = g.add(z.normed, injected)?;
                lap(&mut times.conditioning);
            }
        }
    }
    let z = prediction_head(&mut g, x, &model.head)?;
    lap(&mut times.heads);
    let grid = PosteriorGrid::new(g.value(z.log_probs).clone())?;
    let hyp = greedy_decode(&grid);
    lap(&mut times.search);
    Ok((hyp, times))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UtteranceLatency {
    pub id: String,
    pub frames: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport {
    pub mode: String,
    pub utterances: Vec<UtteranceLatency>,
    pub total_seconds: f64,
    pub total_frames: usize,
    /// Decode time over input duration at [`FRAME_PERIOD`].
    pub rtf: f64,
    pub stages: StageTimes,
    pub environment: String,
}

impl LatencyReport {
    pub fn seconds_per_utterance(&self) -> f64 {
        self.total_seconds / self.utterances.len().max(1) as f64
    }

    pub fn summary(&self) -> String {
        let s = &self.stages;
        format!(
            "{}: {} utterances, {:.3} ms/utt, RTF {:.5} (encoder {:.1} ms, heads {:.1} ms, conditioning {:.1} ms, search {:.1} ms)",
            self.mode,
            self.utterances.len(),
            1e3 * self.seconds_per_utterance(),
            self.rtf,
            1e3 * s.encoder.as_secs_f64(),
            1e3 * s.heads.as_secs_f64(),
            1e3 * s.conditioning.as_secs_f64(),
            1e3 * s.search.as_secs_f64(),
        )
    }
}

pub fn environment_note() -> String {
    format!(
        "{} {}, {} logical CPUs, 1 decode thread",
        std::env::consts::OS,
        std::env::consts::ARCH,
        std::thread::available_parallelism().map_or(1, |n| n.get())
    )
}

/// Sequential batch-size-1 decoding of `utts` after one untimed warm-up
/// pass. Each utterance keeps its fastest of `repeats` timings.
pub fn measure_latency(model: &Model, utts: &[Utterance], repeats: usize) -> Result<LatencyReport> {
    if utts.is_empty() {
        return Err(Error::Usage("no utterances to time".into()));
    }
    for u in utts {
        timed_decode(model, u)?;
    }
    let mut stages = StageTimes::default();
    let mut utterances = Vec::with_capacity(utts.len());
    for u in utts {
        let mut best: Option<StageTimes> = None;
        for _ in 0..repeats.max(1) {
            let (_, t) = timed_decode(model, u)?;
            if best.map_or(true, |b| t.total() < b.total()) {
                best = Some(t);
            }
        }
        let best = best.expect("at least one repeat");
        stages.add(&best);
        utterances.push(UtteranceLatency {
            id: u.id.clone(),
            frames: u.frames(),
            seconds: best.total().as_secs_f64(),
        });
    }
    let total_seconds: f64 = utterances.iter().map(|u| u.seconds).sum();
    let total_frames: usize = utterances.iter().map(|u| u.frames).sum();
    Ok(LatencyReport {
        mode: model.config.mode.to_string(),
        rtf: total_seconds / (total_frames as f64 * FRAME_PERIOD.as_secs_f64()),
        utterances,
        total_seconds,
        total_frames,
        stages,
        environment: environment_note(),
    })
}

/// Per-utterance time of `model` over that of `baseline`. The two are
/// timed in alternating rounds and each keeps its fastest round.
pub fn latency_ratio(
    model: &Model,
    baseline: &Model,
    utts: &[Utterance],
    rounds: usize,
) -> Result<(f64, LatencyReport, LatencyReport)> {
    let mut best: (Option<LatencyReport>, Option<LatencyReport>) = (None, None);
    for _ in 0..rounds.max(1) {
        let b = measure_latency(baseline, utts, 1)?;
        let m = measure_latency(model, utts, 1)?;
        if best.0.as_ref().map_or(true, |x| m.total_seconds < x.total_seconds) {
            best.0 = Some(m);
        }
        if best.1.as_ref().map_or(true, |x| b.total_seconds < x.total_seconds) {
            best.1 = Some(b);
        }
    }
    let (m, b) = (best.0.unwrap(), best.1.unwrap());
    Ok((m.total_seconds / b.total_seconds, m, b))
}

/// Decoded output of one prediction layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutput {
    pub layer: usize,
    pub tokens: Vec<String>,
    /// Positions whose token differs from the final output's.
    pub differs: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InspectReport {
    pub id: String,
    pub reference: Vec<String>,
    /// Selected intermediate layers, ascending, then the final layer.
    pub layers: Vec<LayerOutput>,
}

impl InspectReport {
    pub fn final_output(&self) -> &LayerOutput {
        self.layers.last().expect("final layer present")
    }

    /// Aligned text, differing tokens in brackets.
    pub fn render(&self) -> String {
        let mut out = String::new();
        writeln!(out, "utterance {}", self.id).unwrap();
        writeln!(out, "{:>8}  {}", "ref", self.reference.join(" ")).unwrap();
        for l in &self.layers {
            let tokens: Vec<String> = l
                .tokens
                .iter()
                .zip(&l.differs)
                .map(|(t, &d)| if d { format!("[{t}]") } else { t.clone() })
                .collect();
            writeln!(out, "{:>8}  {}", format!("layer {}", l.layer), tokens.join(" ")).unwrap();
        }
        out
    }
}

/// Greedy outputs of every intermediate prediction and the final one.
pub fn dump_intermediate(model: &Model, utt: &Utterance) -> Result<InspectReport> {
    if !model.config.mode.has_intermediate() {
        return Err(Error::Usage(
            "plain-ctc model has no intermediate predictions to inspect".into(),
        ));
    }
    let pred = model.predict(&utt.features, &PadMask::full(utt.frames())?)?;
    let vocab = &model.config.vocab;
    let words = |grid: &PosteriorGrid| -> Vec<String> {
        vocab
            .decode(&greedy_decode(grid))
            .into_iter()
            .map(str::to_string)
            .collect()
    };
    let final_tokens = words(&pred.final_grids[0]);
    let mut layers: Vec<LayerOutput> = pred
        .intermediate
        .iter()
        .map(|(l, grids)| {
            let tokens = words(&grids[0]);
            let differs = tokens
                .iter()
                .enumerate()
                .map(|(i, t)| final_tokens.get(i) != Some(t))
                .collect();
            LayerOutput {
                layer: *l,
                tokens,
                differs,
            }
        })
        .collect();
    layers.push(LayerOutput {
        layer: model.config.layers,
        differs: vec![false; final_tokens.len()],
        tokens: final_tokens,
    });
    Ok(InspectReport {
        id: utt.id.clone(),
        reference: vocab.decode(&utt.labels).into_iter().map(str::to_string).collect(),
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use sctc_core::encoder::Activation;
    use sctc_core::model::ModelConfig;
    use sctc_core::synth::{generate_synthetic, SyntheticTaskSpec};

    fn data() -> sctc_core::synth::Dataset {
        generate_synthetic(&SyntheticTaskSpec {
            train_utts: 6,
            dev_utts: 2,
            test_utts: 2,
            vocab_size: 4,
            confusable_pairs: 1,
            feat_dim: 4,
            ..Default::default()
        })
        .unwrap()
    }

    fn model(mode: Mode, vocab: Vocabulary) -> Model {
        Model::new(ModelConfig {
            layers: 3,
            dim: 8,
            heads: 2,
            ffn_dim: 16,
            feat_dim: 4,
            vocab,
            k: 2,
            lambda: 0.5,
            mode,
            activation: Activation::Relu,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn aggregate_is_ratio_of_sums() {
        let v = Vocabulary::new(&["a", "b"]).unwrap();
        let seq = |ids: &[usize]| LabelSequence::new(ids.to_vec()).unwrap();
        let (h1, r1) = (seq(&[1]), seq(&[2]));
        let (h2, r2) = (seq(&[1, 2, 1]), seq(&[1, 2, 1]));
        let report = score(&v, [("x", &h1, &r1), ("y", &h2, &r2)]);
        assert_eq!(report.counts.errors(), 1);
        assert!((report.error_rate_percent() - 25.0).abs() < 1e-12);
        let rec = &report.records()[0];
        assert_eq!(rec, r#"{"id":"x","hyp":"a","ref":"b","S":1,"I":0,"D":0}"#);
    }

    #[test]
    fn batched_decode_matches_single() {
        let d = data();
        let m = model(Mode::SelfCond, d.vocab.clone());
        let batched = decode(&m, &d.train, 4).unwrap();
        for (u, h) in d.train.iter().zip(&batched) {
            assert_eq!(&decode(&m, std::slice::from_ref(u), 1).unwrap()[0], h);
            assert_eq!(&timed_decode(&m, u).unwrap().0, h);
        }
    }

    #[test]
    fn inspect_report_layers() {
        let d = data();
        let m = model(Mode::SelfCond, d.vocab.clone());
        let r = dump_intermediate(&m, &d.dev[0]).unwrap();
        let layers: Vec<usize> = r.layers.iter().map(|l| l.layer).collect();
        assert_eq!(layers, [1, 2, 3]);
        assert!(r.render().contains("layer 3"));
        let plain = model(Mode::PlainCtc, d.vocab.clone());
        let err = dump_intermediate(&plain, &d.dev[0]).unwrap_err().to_string();
        assert!(err.contains("intermediate"), "{err}");
    }

    #[test]
    fn latency_against_itself() {
        let d = data();
        let m = model(Mode::PlainCtc, d.vocab.clone());
        let (ratio, a, _) = latency_ratio(&m, &m, &d.dev, 3).unwrap();
        assert!(ratio > 0.5 && ratio < 2.0, "{ratio}");
        assert_eq!(a.total_frames, d.dev.iter().map(|u| u.frames()).sum::<usize>());
    }
}

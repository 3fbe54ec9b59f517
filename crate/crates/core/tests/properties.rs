use proptest::prelude::*;

use sctc_core::ctc::{collapse, ctc_brute_force, ctc_loss, greedy_decode, LabelSequence, PosteriorGrid};
use sctc_core::encoder::{Activation, PadMask};
use sctc_core::metrics::edit_distance;
use sctc_core::model::{select_intermediate_layers, Mode, Model, ModelConfig};
use sctc_core::ctc::Vocabulary;
use sctc_core::Tensor;

fn grid(frames: usize, classes: usize, logits: &[f64]) -> PosteriorGrid {
    let t = Tensor::from_vec(&[frames, classes], logits[..frames * classes].to_vec()).unwrap();
    PosteriorGrid::from_logits(&t).unwrap()
}

/// Frames, class count (blank included), logits and a label sequence.
fn ctc_instance() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<usize>)> {
    (1usize..=6, 2usize..=4).prop_flat_map(|(s, c)| {
        (
            Just(s),
            Just(c),
            prop::collection::vec(-3.0f64..3.0, s * c),
            prop::collection::vec(1..c, 0..=3),
        )
    })
}

proptest! {
    #[test]
    fn dp_matches_enumeration((s, c, logits, y) in ctc_instance()) {
        let g = grid(s, c, &logits);
        let y = LabelSequence::new(y).unwrap();
        let dp = ctc_loss(&g, &y);
        let brute = ctc_brute_force(&g, &y).unwrap();
        if brute.is_infinite() {
            prop_assert!(!dp.feasible);
        } else {
            prop_assert!(dp.feasible);
            prop_assert!((dp.loss - brute).abs() < 1e-9, "dp {} brute {}", dp.loss, brute);
        }
    }

    #[test]
    fn collapse_inverts_any_expansion(
        y in prop::collection::vec(1usize..4, 0..6),
        reps in prop::collection::vec(1usize..4, 6),
        blanks in prop::collection::vec(0usize..3, 7),
    ) {
        // each label repeated, blanks anywhere, and at least one between equal neighbours
        let mut a = vec![0; blanks[0]];
        for (i, &l) in y.iter().enumerate() {
            a.extend(std::iter::repeat_n(l, reps[i]));
            let gap = blanks[i + 1].max(usize::from(y.get(i + 1) == Some(&l)));
            a.extend(std::iter::repeat_n(0, gap));
        }
        let got = collapse(&a);
        prop_assert_eq!(got.ids(), &y[..]);
    }

    #[test]
    fn collapse_is_idempotent_without_repeats(a in prop::collection::vec(0usize..5, 0..20)) {
        let once = collapse(&a);
        prop_assert!(once.ids().iter().all(|&l| l != 0));
        if once.adjacent_repeats() == 0 {
            let twice = collapse(once.ids());
            prop_assert_eq!(twice.ids(), once.ids());
        }
    }

    #[test]
    fn greedy_output_is_feasible((s, c, logits, _y) in ctc_instance()) {
        // the best path's own label sequence is always reachable
        let g = grid(s, c, &logits);
        let y = greedy_decode(&g);
        let out = ctc_loss(&g, &y);
        prop_assert!(out.feasible && out.loss >= -1e-12);
    }

    #[test]
    fn edit_distance_is_a_metric(
        a in prop::collection::vec(0u8..4, 0..10),
        b in prop::collection::vec(0u8..4, 0..10),
        c in prop::collection::vec(0u8..4, 0..10),
    ) {
        let d = |x: &[u8], y: &[u8]| edit_distance(x, y).errors();
        prop_assert_eq!(d(&a, &a), 0);
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        prop_assert!(d(&a, &b) >= a.len().abs_diff(b.len()));
        prop_assert!(d(&a, &b) <= a.len().max(b.len()));
        let counts = edit_distance(&a, &b);
        prop_assert_eq!(counts.ref_len, b.len());
    }
}

fn small_model(mode: Mode, seed: u64) -> Model {
    Model::new(ModelConfig {
        layers: 3,
        dim: 8,
        heads: 2,
        ffn_dim: 16,
        feat_dim: 3,
        vocab: Vocabulary::new(&["a", "b", "c"]).unwrap(),
        k: 1,
        lambda: 0.5,
        mode,
        activation: Activation::Relu,
        seed,
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn padding_does_not_change_posteriors(
        lens in prop::collection::vec(1usize..7, 1..4),
        seed in 0u64..1000,
    ) {
        let model = small_model(Mode::SelfCond, seed);
        let padded = *lens.iter().max().unwrap();
        let feats: Vec<Tensor> = lens
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let init = sctc_core::Init::Uniform { lo: -1.0, hi: 1.0, seed: seed + i as u64 };
                Tensor::new(&[l, 3], init).unwrap()
            })
            .collect();
        let mut data = vec![0.0; lens.len() * padded * 3];
        for (b, f) in feats.iter().enumerate() {
            data[b * padded * 3..][..f.len()].copy_from_slice(f.data());
        }
        // garbage in padded rows must not leak into real frames
        for b in 0..lens.len() {
            for r in lens[b]..padded {
                for d in 0..3 {
                    data[(b * padded + r) * 3 + d] = 50.0 + (r + d) as f64;
                }
            }
        }
        let batch = Tensor::from_vec(&[lens.len() * padded, 3], data).unwrap();
        let mask = PadMask::new(lens.clone(), padded).unwrap();
        let together = model.predict(&batch, &mask).unwrap();
        for (b, f) in feats.iter().enumerate() {
            let alone = model.predict(f, &PadMask::full(lens[b]).unwrap()).unwrap();
            let x = together.final_grids[b].log_probs().data();
            let y = alone.final_grids[0].log_probs().data();
            for (p, q) in x.iter().zip(y) {
                prop_assert!((p - q).abs() < 1e-10, "{p} vs {q}");
            }
        }
    }
}

#[test]
fn layer_selection_matches_direct_rule() {
    assert_eq!(select_intermediate_layers(18, 5).unwrap(), [3, 6, 9, 12, 15]);
    for layers in 2..=64usize {
        for k in 1..layers {
            let mut direct = Vec::new();
            for i in 1..=k {
                let l = (i as f64 * layers as f64 / (k + 1) as f64).floor() as usize;
                if l >= 1 && l < layers && !direct.contains(&l) {
                    direct.push(l);
                }
            }
            assert_eq!(select_intermediate_layers(layers, k).unwrap(), direct, "L={layers} K={k}");
        }
    }
}

use super::*;
use crate::corpus::tests::{arb_example, WINDOWS_SENTENCE};
use crate::corpus::{build_vocabulary, linearize_targets, read_dataset, AnnotatedExample, Vocabulary};
use crate::model::ModelConfig;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup(examples: &[AnnotatedExample], seed: u64) -> (Model, ParameterSet<f64>, Vocabulary) {
    let vocab = build_vocabulary(examples, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (model, params) = Model::init(ModelConfig::tiny(), &vocab, &mut rng).unwrap();
    (model, params, vocab)
}

fn covered(pairs: &[(usize, usize)]) -> BTreeSet<usize> {
    pairs.iter().flat_map(|&(s, e)| s..=e).collect()
}

#[test]
fn step_kinds_cycle_from_one() {
    let kinds: Vec<_> = (1..=7).map(StepKind::of).collect();
    use StepKind::*;
    assert_eq!(kinds, vec![Start, End, Polarity, Start, End, Polarity, Start]);
}

#[test]
fn start_mask_blocks_emitted_aspects() {
    let m = start_mask(12, &covered(&[(2, 3)]));
    assert!(!m[2] && !m[3]);
    assert!(m[0] && m[1] && m[4] && m[11]);
    assert!(m[12], "NA stays available at start steps");
}

#[test]
fn end_mask_stops_at_the_next_covered_token() {
    let cov = covered(&[(2, 3)]);
    let m = end_mask(12, &cov, 0, NaPolicy::Inference);
    let admitted: Vec<usize> = (0..12).filter(|&i| m[i]).collect();
    assert_eq!(admitted, vec![0, 1]);
    assert!(!m[12]);
    let m = end_mask(12, &cov, 4, NaPolicy::Keep);
    let admitted: Vec<usize> = (0..12).filter(|&i| m[i]).collect();
    assert_eq!(admitted, (4..12).collect::<Vec<_>>());
    assert!(m[12]);
}

#[test]
fn polarity_mask_policy() {
    assert_eq!(polarity_mask(NaPolicy::Keep), vec![true; 4]);
    assert_eq!(polarity_mask(NaPolicy::Inference), vec![true, true, true, false]);
}

#[test]
fn forced_decoding_follows_the_gold_sequence() {
    let ds = read_dataset(WINDOWS_SENTENCE.as_bytes()).unwrap();
    let (model, params, vocab) = setup(&ds, 3);
    let sentence = vocab.index(ds[0].tokens());
    let targets = linearize_targets(&ds[0]);
    let mut g = Graph::new(params.table());
    let trace = forced_decode(&mut g, &model, &sentence, &targets).unwrap();
    assert_eq!(trace.steps.len(), 7);
    assert_eq!(trace.triplets, ds[0].triplets());
    let dists = trace.distributions(&g);
    for (t, d) in dists.iter().enumerate() {
        let sum: f64 = d.probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12, "step {} sums to {}", t + 1, sum);
        assert_eq!(d.kind, StepKind::of(t + 1));
    }
    // After the first aspect (2, 3), the second start step cannot reuse it.
    assert_eq!(dists[3].probs[2], 0.0);
    assert_eq!(dists[3].probs[3], 0.0);
}

#[test]
fn loss_is_the_sum_of_gold_surprisals() {
    let ds = read_dataset(WINDOWS_SENTENCE.as_bytes()).unwrap();
    let (model, params, vocab) = setup(&ds, 4);
    let sentence = vocab.index(ds[0].tokens());
    let targets = linearize_targets(&ds[0]);
    let mut g = Graph::new(params.table());
    let (loss, steps) = sequence_loss(&mut g, &model, &sentence, &targets).unwrap();
    assert_eq!(steps, 7);
    let mut g2 = Graph::new(params.table());
    let dists = forced_decode(&mut g2, &model, &sentence, &targets).unwrap().distributions(&g2);
    let expected: f64 = dists
        .iter()
        .zip(targets.arguments())
        .map(|(d, &a)| -d.prob(a).unwrap().ln())
        .sum();
    assert!((g.value(loss).data()[0] - expected).abs() < 1e-12);
}

#[test]
fn choosing_a_masked_argument_is_an_error() {
    let ds = read_dataset(WINDOWS_SENTENCE.as_bytes()).unwrap();
    let (model, params, vocab) = setup(&ds, 5);
    let sentence = vocab.index(ds[0].tokens());
    let mut g = Graph::new(params.table());
    // Second aspect starting inside the first one.
    let script = [
        DecodeArgument::Position(2),
        DecodeArgument::Position(3),
        DecodeArgument::Polarity(Polarity::Positive),
        DecodeArgument::Position(3),
    ];
    let err = run_decoder(&mut g, &model, &sentence, NaPolicy::Keep, 4, |t, _, _, _| Ok(script[t - 1])).unwrap_err();
    assert!(matches!(err, Error::MaskedGold { step: 4, .. }));
    // An end before the chosen start.
    let mut g = Graph::new(params.table());
    let script = [DecodeArgument::Position(5), DecodeArgument::Position(4)];
    let err = run_decoder(&mut g, &model, &sentence, NaPolicy::Keep, 2, |t, _, _, _| Ok(script[t - 1])).unwrap_err();
    assert!(matches!(err, Error::MaskedGold { step: 2, .. }));
}

#[test]
fn greedy_decoding_respects_the_step_budget() {
    let ds = read_dataset(WINDOWS_SENTENCE.as_bytes()).unwrap();
    let (model, params, vocab) = setup(&ds, 6);
    let sentence = vocab.index(ds[0].tokens());
    for max in [0, 1, 2, 5] {
        let mut g = Graph::new(params.table());
        let trace = decode_greedy(&mut g, &model, &sentence, max).unwrap();
        assert!(trace.steps.len() <= 3 * max);
        assert!(trace.triplets.len() <= max);
    }
}

#[test]
fn greedy_takes_the_lowest_index_on_ties() {
    let ds = read_dataset(WINDOWS_SENTENCE.as_bytes()).unwrap();
    let (model, mut params, vocab) = setup(&ds, 7);
    // Zero every scorer so all admissible entries tie at each step.
    for id in [
        model.decoder.start.w_state,
        model.decoder.start.w_token,
        model.decoder.end.w_state,
        model.decoder.end.w_token,
        model.decoder.na.weight,
        model.decoder.polarity.weight,
        model.decoder.polarity_na.weight,
    ] {
        params.value_mut(id).fill(0.0);
    }
    let sentence = vocab.index(ds[0].tokens());
    let mut g = Graph::new(params.table());
    let trace = decode_greedy(&mut g, &model, &sentence, 2).unwrap();
    assert_eq!(
        trace.triplets,
        vec![Triplet::new(0, 0, Polarity::Positive), Triplet::new(1, 1, Polarity::Positive)]
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Greedy decoding never yields malformed or overlapping spans, and every
    /// masked entry has probability exactly zero.
    #[test]
    fn greedy_output_is_well_formed(ex in arb_example(), seed in 0u64..1000) {
        let (model, params, vocab) = setup(std::slice::from_ref(&ex), seed);
        let sentence = vocab.index(ex.tokens());
        let mut g = Graph::new(params.table());
        let trace = decode_greedy(&mut g, &model, &sentence, ex.len()).unwrap();
        for (k, a) in trace.triplets.iter().enumerate() {
            prop_assert!(a.start <= a.end && a.end < ex.len());
            for b in &trace.triplets[k + 1..] {
                prop_assert!(!a.overlaps(b));
            }
        }
        for step in &trace.steps {
            let probs = g.value(step.probs).data();
            for (p, keep) in probs.iter().zip(&step.admissible) {
                if !keep {
                    prop_assert_eq!(*p, 0.0);
                }
            }
            if step.kind != StepKind::Start {
                prop_assert!(step.chosen != DecodeArgument::Na);
            }
        }
        prop_assert!(AnnotatedExample::new(None, ex.tokens().to_vec(), trace.triplets.clone()).is_ok());
    }

    /// Teacher forcing on any valid gold set never hits a masked argument.
    #[test]
    fn gold_sequences_are_admissible(ex in arb_example(), seed in 0u64..1000) {
        let (model, params, vocab) = setup(std::slice::from_ref(&ex), seed);
        let sentence = vocab.index(ex.tokens());
        let targets = linearize_targets(&ex);
        let mut g = Graph::new(params.table());
        let (loss, steps) = sequence_loss(&mut g, &model, &sentence, &targets).unwrap();
        prop_assert_eq!(steps, targets.len());
        prop_assert!(g.value(loss).data()[0] > 0.0);
    }

    /// A greedy run whose choices are pinned to the gold arguments reproduces
    /// the inference-policy teacher-forced distributions.
    #[test]
    fn pinned_greedy_matches_forced_inference(ex in arb_example(), seed in 0u64..1000) {
        let (model, params, vocab) = setup(std::slice::from_ref(&ex), seed);
        let sentence = vocab.index(ex.tokens());
        let targets = linearize_targets(&ex);
        let gold = targets.arguments();
        let mut g = Graph::new(params.table());
        let pinned = run_decoder(&mut g, &model, &sentence, NaPolicy::Inference, gold.len(), |t, _, _, _| Ok(gold[t - 1]))
            .unwrap()
            .distributions(&g);
        let mut g2 = Graph::new(params.table());
        let forced = forced_decode_with(&mut g2, &model, &sentence, &targets, NaPolicy::Inference)
            .unwrap()
            .distributions(&g2);
        prop_assert_eq!(pinned, forced);
    }
}

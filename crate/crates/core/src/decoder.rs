//! Triplet sequence generation.
//!
//! The decoder emits one argument per step. Step `t` (1-based) produces a
//! start position when `t % 3 == 1`, an end position when `t % 3 == 2` and a
//! polarity when `t % 3 == 0`. NA at a start step terminates the sequence.
//!
//! Masks:
//! * start steps exclude every token already covered by an emitted aspect;
//! * end steps admit only the covered-free run of tokens beginning at the
//!   chosen start, so spans never overlap;
//! * NA is always admissible at start steps. At end and polarity steps it is
//!   part of the distribution during training and masked at inference.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::attention::{attend, polarity_context, token_keys};
use crate::corpus::{DecodeArgument, IndexedSentence, Polarity, TargetSequence, Triplet};
use crate::encoder::{encode_sentence, SentenceEncoding};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{lstm_cell, BiLstmParams, Graph, LstmParams, ParamId, ParameterSet, Real, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Decoder recurrent size.
    pub hidden: usize,
    /// Width of the fed-back argument embeddings.
    pub arg_dim: usize,
    /// Inner width of both attention heads.
    pub attention_dim: usize,
    /// Per-direction size of the aspect span encoder.
    pub aspect_hidden: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            hidden: 300,
            arg_dim: 300,
            attention_dim: 300,
            aspect_hidden: 150,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("decoder.hidden", self.hidden),
            ("decoder.arg_dim", self.arg_dim),
            ("decoder.attention_dim", self.attention_dim),
            ("decoder.aspect_hidden", self.aspect_hidden),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        Ok(())
    }
}

/// Rows of the argument embedding table.
pub const ARG_BOS: usize = 0;
pub const ARG_NA: usize = 1;
pub const ARG_POLARITY: usize = 2;
pub const ARG_ROWS: usize = 5;

/// `selu(w_state . h + w_token . h_i + bias)` for every token i, which is the
/// concatenated form `[h; h_i] . W + b` with `W` split by input.
#[derive(Debug, Clone, Copy)]
pub struct PositionScorer {
    pub w_state: ParamId,
    pub w_token: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub input_proj: ParamId,
    pub cell: LstmParams,
    pub arg_table: ParamId,
    pub position_proj: ParamId,
    pub start: PositionScorer,
    pub end: PositionScorer,
    pub na: Affine,
    pub aspect: BiLstmParams,
    pub polarity: Affine,
    pub polarity_na: Affine,
}

impl DecoderParams {
    pub const INPUT_PROJ: &'static str = "decoder.input_proj";
    pub const CELL: &'static str = "decoder.cell";
    pub const ARG_TABLE: &'static str = "decoder.arg_table";
    pub const POSITION_PROJ: &'static str = "decoder.position_proj";
    pub const START: &'static str = "decoder.start";
    pub const END: &'static str = "decoder.end";
    pub const NA: &'static str = "decoder.na";
    pub const ASPECT: &'static str = "decoder.aspect";
    pub const POLARITY: &'static str = "decoder.polarity";
    pub const POLARITY_NA: &'static str = "decoder.polarity_na";

    pub fn bind<T: Real>(config: &DecoderConfig, params: &ParameterSet<T>) -> Result<Self> {
        let scorer = |prefix: &str| -> Result<PositionScorer> {
            Ok(PositionScorer {
                w_state: params.id(&format!("{prefix}.w_state"))?,
                w_token: params.id(&format!("{prefix}.w_token"))?,
                bias: params.id(&format!("{prefix}.bias"))?,
            })
        };
        let affine = |prefix: &str| -> Result<Affine> {
            Ok(Affine {
                weight: params.id(&format!("{prefix}.weight"))?,
                bias: params.id(&format!("{prefix}.bias"))?,
            })
        };
        Ok(DecoderParams {
            input_proj: params.id(Self::INPUT_PROJ)?,
            cell: LstmParams::bind(params, Self::CELL, config.hidden)?,
            arg_table: params.id(Self::ARG_TABLE)?,
            position_proj: params.id(Self::POSITION_PROJ)?,
            start: scorer(Self::START)?,
            end: scorer(Self::END)?,
            na: affine(Self::NA)?,
            aspect: BiLstmParams::bind(params, Self::ASPECT, config.aspect_hidden)?,
            polarity: affine(Self::POLARITY)?,
            polarity_na: affine(Self::POLARITY_NA)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StepKind {
    Start,
    End,
    Polarity,
}

impl StepKind {
    /// Kind of the 1-based step `t`.
    pub fn of(t: usize) -> StepKind {
        match t % 3 {
            1 => StepKind::Start,
            2 => StepKind::End,
            _ => StepKind::Polarity,
        }
    }
}

/// Whether NA stays in the end/polarity distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NaPolicy {
    /// Keep the NA entry (teacher-forced training).
    Keep,
    /// Mask NA at end and polarity steps so every started triplet completes.
    Inference,
}

/// Probability vector produced at one step: `n` positions then NA, or
/// `POS, NEG, NEU` then NA.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDistribution {
    pub kind: StepKind,
    pub probs: Vec<f64>,
}

impl StepDistribution {
    pub fn na_index(&self) -> usize {
        self.probs.len() - 1
    }

    /// Position of `arg` in `probs`, if the argument fits this step kind.
    pub fn index_of(&self, arg: DecodeArgument) -> Option<usize> {
        argument_index(self.kind, arg, self.probs.len() - 1)
    }

    pub fn prob(&self, arg: DecodeArgument) -> Option<f64> {
        self.index_of(arg).map(|i| self.probs[i])
    }
}

fn argument_index(kind: StepKind, arg: DecodeArgument, options: usize) -> Option<usize> {
    match (kind, arg) {
        (_, DecodeArgument::Na) => Some(options),
        (StepKind::Start | StepKind::End, DecodeArgument::Position(i)) if i < options => Some(i),
        (StepKind::Polarity, DecodeArgument::Polarity(p)) => Some(p.index()),
        _ => None,
    }
}

fn argument_at(kind: StepKind, index: usize, options: usize) -> DecodeArgument {
    if index == options {
        DecodeArgument::Na
    } else if kind == StepKind::Polarity {
        DecodeArgument::Polarity(Polarity::ALL[index])
    } else {
        DecodeArgument::Position(index)
    }
}

/// Recurrent state between steps.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub hidden: Var,
    pub cell: Var,
    /// Token positions consumed by aspects emitted so far.
    pub coverage: BTreeSet<usize>,
    /// Number of steps taken; the initial state has step 0.
    pub step: usize,
}

impl DecoderState {
    pub fn initial<T: Real>(g: &mut Graph<'_, T>, hidden: usize) -> Self {
        DecoderState {
            hidden: g.zeros(&[hidden]),
            cell: g.zeros(&[hidden]),
            coverage: BTreeSet::new(),
            step: 0,
        }
    }
}

/// Admissible start-step entries (`n` positions then NA).
pub fn start_mask(n: usize, coverage: &BTreeSet<usize>) -> Vec<bool> {
    let mut mask: Vec<bool> = (0..n).map(|i| !coverage.contains(&i)).collect();
    mask.push(true);
    mask
}

/// Admissible end-step entries: positions from `start` up to (not including)
/// the next covered token, then NA.
pub fn end_mask(n: usize, coverage: &BTreeSet<usize>, start: usize, policy: NaPolicy) -> Vec<bool> {
    let stop = coverage.range(start..).next().copied().unwrap_or(n);
    let mut mask: Vec<bool> = (0..n).map(|i| i >= start && i < stop).collect();
    mask.push(policy == NaPolicy::Keep);
    mask
}

pub fn polarity_mask(policy: NaPolicy) -> Vec<bool> {
    vec![true, true, true, policy == NaPolicy::Keep]
}

/// Embedding of the argument fed back at the next step. Positions are a
/// linear projection of the chosen token's contextual representation.
pub fn argument_embedding<T: Real>(
    g: &mut Graph<'_, T>,
    p: &DecoderParams,
    arg: Option<DecodeArgument>,
    enc: &SentenceEncoding,
) -> Result<Var> {
    let table = g.param(p.arg_table);
    match arg {
        None => g.lookup(table, ARG_BOS),
        Some(DecodeArgument::Na) => g.lookup(table, ARG_NA),
        Some(DecodeArgument::Polarity(pol)) => g.lookup(table, ARG_POLARITY + pol.index()),
        Some(DecodeArgument::Position(i)) => {
            let row = *enc
                .rows
                .get(i)
                .ok_or_else(|| Error::shape("argument_embedding", format!("position {} of {}", i, enc.len())))?;
            let w = g.param(p.position_proj);
            g.matvec(w, row)
        }
    }
}

/// One recurrence step on `input_proj [v_prev; context]`.
pub fn decoder_step<T: Real>(
    g: &mut Graph<'_, T>,
    p: &DecoderParams,
    state: &DecoderState,
    v_prev: Var,
    context: Var,
) -> Result<DecoderState> {
    let joined = g.concat(&[v_prev, context])?;
    let joined = g.dropout(joined)?;
    let w = g.param(p.input_proj);
    let x = g.matvec(w, joined)?;
    let (hidden, cell) = lstm_cell(g, &p.cell, x, state.hidden, state.cell)?;
    Ok(DecoderState {
        hidden,
        cell,
        coverage: state.coverage.clone(),
        step: state.step + 1,
    })
}

fn position_scores<T: Real>(g: &mut Graph<'_, T>, scorer: &PositionScorer, hidden: Var, states: Var) -> Result<Var> {
    let wt = g.param(scorer.w_token);
    let ws = g.param(scorer.w_state);
    let b = g.param(scorer.bias);
    let per_token = g.matvec(states, wt)?;
    let shared = g.matvec(ws, hidden)?;
    let shared = g.add(shared, b)?;
    let raw = g.add_scalar(per_token, shared)?;
    g.selu(raw)
}

fn affine_selu<T: Real>(g: &mut Graph<'_, T>, a: &Affine, x: Var) -> Result<Var> {
    let w = g.param(a.weight);
    let b = g.param(a.bias);
    let z = g.matvec(w, x)?;
    let z = g.add(z, b)?;
    g.selu(z)
}

/// Start-step probabilities over `n` positions and NA. Covered positions get
/// probability zero.
pub fn score_start<T: Real>(
    g: &mut Graph<'_, T>,
    p: &DecoderParams,
    state: &DecoderState,
    enc: &SentenceEncoding,
) -> Result<(Var, Vec<bool>)> {
    let q = position_scores(g, &p.start, state.hidden, enc.states)?;
    let q_na = affine_selu(g, &p.na, state.hidden)?;
    let all = g.concat(&[q, q_na])?;
    let mask = start_mask(enc.len(), &state.coverage);
    Ok((g.masked_softmax(all, &mask)?, mask))
}

/// End-step probabilities over `n` positions and NA given the chosen start.
pub fn score_end<T: Real>(
    g: &mut Graph<'_, T>,
    p: &DecoderParams,
    state: &DecoderState,
    enc: &SentenceEncoding,
    start: usize,
    policy: NaPolicy,
) -> Result<(Var, Vec<bool>)> {
    let q = position_scores(g, &p.end, state.hidden, enc.states)?;
    let q_na = affine_selu(g, &p.na, state.hidden)?;
    let all = g.concat(&[q, q_na])?;
    let mask = end_mask(enc.len(), &state.coverage, start, policy);
    Ok((g.masked_softmax(all, &mask)?, mask))
}

/// `[h_s; forward_final; backward_final; h_e]` where the middle part comes
/// from a bidirectional pass over the span's rows.
pub fn encode_aspect<T: Real>(
    g: &mut Graph<'_, T>,
    p: &DecoderParams,
    enc: &SentenceEncoding,
    span: (usize, usize),
) -> Result<Var> {
    let (s, e) = span;
    if s > e || e >= enc.len() {
        return Err(Error::shape("encode_aspect", format!("span {:?} of {}", span, enc.len())));
    }
    let rows = &enc.rows[s..=e];
    let (fwd, bwd) = p.aspect.run(g, rows)?;
    let last_fwd = *fwd.last().expect("span is non-empty");
    let last_bwd = bwd[0];
    g.concat(&[enc.rows[s], last_fwd, last_bwd, enc.rows[e]])
}

/// Probabilities over `POS, NEG, NEU, NA`.
pub fn score_polarity<T: Real>(
    g: &mut Graph<'_, T>,
    p: &DecoderParams,
    state: &DecoderState,
    aspect: Var,
    policy: NaPolicy,
) -> Result<(Var, Vec<bool>)> {
    let joined = g.concat(&[aspect, state.hidden])?;
    let q = affine_selu(g, &p.polarity, joined)?;
    let q_na = affine_selu(g, &p.polarity_na, state.hidden)?;
    let all = g.concat(&[q, q_na])?;
    let mask = polarity_mask(policy);
    Ok((g.masked_softmax(all, &mask)?, mask))
}

/// One decoded step as recorded on the graph.
#[derive(Debug, Clone)]
pub struct DecodeStep {
    pub kind: StepKind,
    pub probs: Var,
    pub admissible: Vec<bool>,
    pub chosen: DecodeArgument,
    /// Coverage in effect when the step was scored.
    pub coverage: BTreeSet<usize>,
}

#[derive(Debug, Clone)]
pub struct DecodeTrace {
    pub encoding: SentenceEncoding,
    pub steps: Vec<DecodeStep>,
    pub triplets: Vec<Triplet>,
}

impl DecodeTrace {
    pub fn distributions<T: Real>(&self, g: &Graph<'_, T>) -> Vec<StepDistribution> {
        self.steps
            .iter()
            .map(|s| StepDistribution {
                kind: s.kind,
                probs: g.value(s.probs).to_f64_vec(),
            })
            .collect()
    }
}

/// Decoding loop shared by teacher forcing and greedy search. `choose`
/// receives the step index, kind, probabilities and mask and returns the
/// argument to commit. The loop ends on NA at a start step, on NA anywhere
/// else, or after `max_steps` steps.
pub fn run_decoder<T, C>(
    g: &mut Graph<'_, T>,
    model: &Model,
    sentence: &IndexedSentence,
    policy: NaPolicy,
    max_steps: usize,
    mut choose: C,
) -> Result<DecodeTrace>
where
    T: Real,
    C: FnMut(usize, StepKind, &[f64], &[bool]) -> Result<DecodeArgument>,
{
    let p = &model.decoder;
    let enc = encode_sentence(g, &model.encoder, sentence)?;
    let n = enc.len();
    let boundary_keys = token_keys(g, &model.attention.boundary, enc.states)?;

    let mut state = DecoderState::initial(g, model.config.decoder.hidden);
    let mut previous: Option<DecodeArgument> = None;
    let mut span_start = 0;
    let mut span_end = 0;
    let mut steps = Vec::new();
    let mut triplets = Vec::new();

    for t in 1..=max_steps {
        let kind = StepKind::of(t);
        let context = match kind {
            StepKind::Start | StepKind::End => {
                attend(g, &model.attention.boundary, state.cell, boundary_keys, enc.states)?.context
            }
            StepKind::Polarity => {
                polarity_context(g, &model.attention, state.cell, enc.states, (span_start, span_end))?.context
            }
        };
        let v_prev = argument_embedding(g, p, previous, &enc)?;
        state = decoder_step(g, p, &state, v_prev, context)?;
        let (probs, admissible) = match kind {
            StepKind::Start => score_start(g, p, &state, &enc)?,
            StepKind::End => score_end(g, p, &state, &enc, span_start, policy)?,
            StepKind::Polarity => {
                let aspect = encode_aspect(g, p, &enc, (span_start, span_end))?;
                score_polarity(g, p, &state, aspect, policy)?
            }
        };
        let values = g.value(probs).to_f64_vec();
        let arg = choose(t, kind, &values, &admissible)?;
        let options = admissible.len() - 1;
        match argument_index(kind, arg, options) {
            Some(i) if admissible[i] => {}
            _ => {
                return Err(Error::MaskedGold {
                    step: t,
                    argument: arg.to_string(),
                })
            }
        }
        steps.push(DecodeStep {
            kind,
            probs,
            admissible,
            chosen: arg,
            coverage: state.coverage.clone(),
        });
        match (kind, arg) {
            (_, DecodeArgument::Na) => break,
            (StepKind::Start, DecodeArgument::Position(s)) => span_start = s,
            (StepKind::End, DecodeArgument::Position(e)) => {
                span_end = e;
                state.coverage.extend(span_start..=span_end);
            }
            (StepKind::Polarity, DecodeArgument::Polarity(r)) => {
                triplets.push(Triplet::new(span_start, span_end, r));
            }
            _ => unreachable!("argument kind validated above"),
        }
        previous = Some(arg);
    }
    debug_assert!(state.coverage.iter().all(|&i| i < n));
    Ok(DecodeTrace {
        encoding: enc,
        steps,
        triplets,
    })
}

/// Greedy decoding: argmax over admissible entries at each step (lowest
/// index wins ties), at most `max_aspects` triplets.
pub fn decode_greedy<T: Real>(
    g: &mut Graph<'_, T>,
    model: &Model,
    sentence: &IndexedSentence,
    max_aspects: usize,
) -> Result<DecodeTrace> {
    run_decoder(g, model, sentence, NaPolicy::Inference, 3 * max_aspects, |_, kind, probs, mask| {
        let options = probs.len() - 1;
        let best = probs
            .iter()
            .zip(mask)
            .enumerate()
            .filter(|(_, (_, &keep))| keep)
            .fold(None, |best: Option<(usize, f64)>, (i, (&p, _))| match best {
                Some((_, bp)) if bp >= p => best,
                _ => Some((i, p)),
            })
            .map(|(i, _)| i)
            .expect("every mask admits at least one entry");
        Ok(argument_at(kind, best, options))
    })
}

/// Teacher-forced decoding along `targets`, returning one distribution per
/// gold argument.
pub fn forced_decode<T: Real>(
    g: &mut Graph<'_, T>,
    model: &Model,
    sentence: &IndexedSentence,
    targets: &TargetSequence,
) -> Result<DecodeTrace> {
    forced_decode_with(g, model, sentence, targets, NaPolicy::Keep)
}

pub fn forced_decode_with<T: Real>(
    g: &mut Graph<'_, T>,
    model: &Model,
    sentence: &IndexedSentence,
    targets: &TargetSequence,
    policy: NaPolicy,
) -> Result<DecodeTrace> {
    let gold = targets.arguments();
    let trace = run_decoder(g, model, sentence, policy, gold.len(), |t, _, _, _| Ok(gold[t - 1]))?;
    debug_assert_eq!(trace.steps.len(), gold.len());
    Ok(trace)
}

/// Sum over steps of `-ln p(gold)` under teacher forcing, with the number of
/// steps.
pub fn sequence_loss<T: Real>(
    g: &mut Graph<'_, T>,
    model: &Model,
    sentence: &IndexedSentence,
    targets: &TargetSequence,
) -> Result<(Var, usize)> {
    let trace = forced_decode(g, model, sentence, targets)?;
    let mut terms = Vec::with_capacity(trace.steps.len());
    for (t, step) in trace.steps.iter().enumerate() {
        let idx = argument_index(step.kind, step.chosen, step.admissible.len() - 1).expect("validated while decoding");
        if g.value(step.probs).data()[idx] == T::zero() {
            return Err(Error::ZeroProbability { step: t + 1 });
        }
        terms.push(g.neg_log_at(step.probs, idx)?);
    }
    Ok((g.sum_scalars(&terms)?, terms.len()))
}

#[cfg(test)]
mod tests;

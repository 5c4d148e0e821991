//! Step-dependent sentence contexts for the decoder.
//!
//! Start and end steps attend over the contextual token representations
//! with an additive score driven by the previous decoder cell state.
//! Polarity steps first scale each token by its closeness to the aspect
//! being classified and then attend the same way over the scaled rows.

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParameterSet, Real, Tensor, Var};

/// Parameters of one additive attention head:
/// `beta_i = score . tanh(state_proj c + state_bias + token_proj h_i)`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionHead {
    pub state_proj: ParamId,
    pub state_bias: ParamId,
    pub token_proj: ParamId,
    pub score: ParamId,
}

impl AttentionHead {
    pub fn names(prefix: &str) -> [String; 4] {
        [
            format!("{prefix}.state_proj"),
            format!("{prefix}.state_bias"),
            format!("{prefix}.token_proj"),
            format!("{prefix}.score"),
        ]
    }

    pub fn bind<T: Real>(params: &ParameterSet<T>, prefix: &str) -> Result<Self> {
        let [a, b, c, d] = Self::names(prefix);
        Ok(AttentionHead {
            state_proj: params.id(&a)?,
            state_bias: params.id(&b)?,
            token_proj: params.id(&c)?,
            score: params.id(&d)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub boundary: AttentionHead,
    pub polarity: AttentionHead,
}

impl AttentionParams {
    pub const BOUNDARY: &'static str = "attention.boundary";
    pub const POLARITY: &'static str = "attention.polarity";

    pub fn bind<T: Real>(params: &ParameterSet<T>) -> Result<Self> {
        Ok(AttentionParams {
            boundary: AttentionHead::bind(params, Self::BOUNDARY)?,
            polarity: AttentionHead::bind(params, Self::POLARITY)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// Weighted sum of the attended rows.
    pub context: Var,
    /// Attention distribution over tokens.
    pub weights: Var,
}

/// Token-side projections `token_proj h_i` for every row of `values`. They do
/// not depend on the decoder state and can be reused across steps.
pub fn token_keys<T: Real>(g: &mut Graph<'_, T>, head: &AttentionHead, values: Var) -> Result<Var> {
    let w = g.param(head.token_proj);
    g.matmul_t(values, w)
}

/// Attends over `values` given precomputed `keys`.
pub fn attend<T: Real>(
    g: &mut Graph<'_, T>,
    head: &AttentionHead,
    cell: Var,
    keys: Var,
    values: Var,
) -> Result<AttentionOutput> {
    let w = g.param(head.state_proj);
    let b = g.param(head.state_bias);
    let v = g.param(head.score);
    let query = g.matvec(w, cell)?;
    let query = g.add(query, b)?;
    let pre = g.add_row(keys, query)?;
    let act = g.tanh(pre)?;
    let scores = g.matvec(act, v)?;
    let weights = g.softmax(scores)?;
    let context = g.vecmat(weights, values)?;
    Ok(AttentionOutput { context, weights })
}

/// Context for start and end steps.
pub fn boundary_context<T: Real>(
    g: &mut Graph<'_, T>,
    params: &AttentionParams,
    cell: Var,
    states: Var,
) -> Result<AttentionOutput> {
    let keys = token_keys(g, &params.boundary, states)?;
    attend(g, &params.boundary, cell, keys, states)
}

/// Distance of token `i` to the span `[start, end]`: zero inside the span,
/// otherwise the distance to the nearer boundary. Also returns the scale
/// `1 - d / n` applied to that token.
pub fn token_distance(span: (usize, usize), i: usize, n: usize) -> (usize, f64) {
    let (s, e) = span;
    let d = if (s..=e).contains(&i) {
        0
    } else {
        i.abs_diff(s).min(i.abs_diff(e))
    };
    (d, 1.0 - d as f64 / n as f64)
}

pub fn distance_scales(span: (usize, usize), n: usize) -> Vec<f64> {
    (0..n).map(|i| token_distance(span, i, n).1).collect()
}

/// Context for polarity steps: rows are scaled by closeness to `span` before
/// both scoring and summation.
pub fn polarity_context<T: Real>(
    g: &mut Graph<'_, T>,
    params: &AttentionParams,
    cell: Var,
    states: Var,
    span: (usize, usize),
) -> Result<AttentionOutput> {
    let n = g.value(states).rows();
    if span.0 > span.1 || span.1 >= n {
        return Err(Error::shape(
            "polarity_context",
            format!("span {:?} for a sentence of {} tokens", span, n),
        ));
    }
    let scales = distance_scales(span, n).into_iter().map(T::of).collect();
    let scales = g.constant(Tensor::vector(scales));
    let scaled = g.scale_rows(states, scales)?;
    let keys = token_keys(g, &params.polarity, scaled)?;
    attend(g, &params.polarity, cell, keys, scaled)
}

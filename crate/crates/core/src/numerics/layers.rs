use rand::Rng;

use crate::error::Result;
use crate::numerics::graph::{Graph, Var};
use crate::numerics::params::{ParamId, ParameterSet};
use crate::numerics::tensor::{Real, Tensor};

/// Weights of one long short-term memory cell.
///
/// `weight` is (4H x (I + H)) applied to `[x; h]`; gate blocks are ordered
/// input, forget, candidate, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmParams {
    pub fn declare<T: Real, R: Rng>(
        params: &mut ParameterSet<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = params.insert(format!("{prefix}.weight"), glorot(&[4 * hidden, input + hidden], rng))?;
        let mut b = Tensor::zeros(&[4 * hidden]);
        b.data_mut()[hidden..2 * hidden].fill(T::one());
        let bias = params.insert(format!("{prefix}.bias"), b)?;
        Ok(LstmParams { weight, bias, hidden })
    }

    pub fn bind<T: Real>(params: &ParameterSet<T>, prefix: &str, hidden: usize) -> Result<Self> {
        Ok(LstmParams {
            weight: params.id(&format!("{prefix}.weight"))?,
            bias: params.id(&format!("{prefix}.bias"))?,
            hidden,
        })
    }
}

/// One recurrence step. Returns the new `(h, c)`.
pub fn lstm_cell<T: Real>(g: &mut Graph<'_, T>, p: &LstmParams, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let hsz = p.hidden;
    let w = g.param(p.weight);
    let b = g.param(p.bias);
    let xh = g.concat(&[x, h])?;
    let z = g.matvec(w, xh)?;
    let z = g.add(z, b)?;
    let zi = g.slice(z, 0, hsz)?;
    let zf = g.slice(z, hsz, hsz)?;
    let zg = g.slice(z, 2 * hsz, hsz)?;
    let zo = g.slice(z, 3 * hsz, hsz)?;
    let i = g.sigmoid(zi)?;
    let f = g.sigmoid(zf)?;
    let cand = g.tanh(zg)?;
    let o = g.sigmoid(zo)?;
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let squashed = g.tanh(c_next)?;
    let h_next = g.mul(o, squashed)?;
    Ok((h_next, c_next))
}

/// Runs a cell over `inputs` in order (or reversed), returning the hidden
/// state at every input position in the original order.
pub fn lstm_sequence<T: Real>(g: &mut Graph<'_, T>, p: &LstmParams, inputs: &[Var], reverse: bool) -> Result<Vec<Var>> {
    let mut h = g.zeros(&[p.hidden]);
    let mut c = g.zeros(&[p.hidden]);
    let mut out = vec![h; inputs.len()];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..inputs.len()).rev())
    } else {
        Box::new(0..inputs.len())
    };
    for i in order {
        (h, c) = lstm_cell(g, p, inputs[i], h, c)?;
        out[i] = h;
    }
    Ok(out)
}

/// Forward and backward pass of a bidirectional layer.
#[derive(Debug, Clone, Copy)]
pub struct BiLstmParams {
    pub forward: LstmParams,
    pub backward: LstmParams,
}

impl BiLstmParams {
    pub fn declare<T: Real, R: Rng>(
        params: &mut ParameterSet<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(BiLstmParams {
            forward: LstmParams::declare(params, &format!("{prefix}.fwd"), input, hidden, rng)?,
            backward: LstmParams::declare(params, &format!("{prefix}.bwd"), input, hidden, rng)?,
        })
    }

    pub fn bind<T: Real>(params: &ParameterSet<T>, prefix: &str, hidden: usize) -> Result<Self> {
        Ok(BiLstmParams {
            forward: LstmParams::bind(params, &format!("{prefix}.fwd"), hidden)?,
            backward: LstmParams::bind(params, &format!("{prefix}.bwd"), hidden)?,
        })
    }

    /// Per-position directional states `(forward, backward)`.
    pub fn run<T: Real>(&self, g: &mut Graph<'_, T>, inputs: &[Var]) -> Result<(Vec<Var>, Vec<Var>)> {
        let fwd = lstm_sequence(g, &self.forward, inputs, false)?;
        let bwd = lstm_sequence(g, &self.backward, inputs, true)?;
        Ok((fwd, bwd))
    }
}

/// Uniform in `[-sqrt(6 / (fan_in + fan_out)), +sqrt(6 / (fan_in + fan_out))]`.
/// A vector is treated as a single-output row.
pub fn glorot<T: Real, R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let (fan_out, fan_in) = match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => (shape[0], shape[1..].iter().product()),
    };
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(shape, bound, rng)
}

pub fn uniform<T: Real, R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| T::of(rng.gen_range(-bound..=bound))).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

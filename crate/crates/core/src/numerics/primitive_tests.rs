use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Result;

#[test]
fn softmax_of_equal_scores_is_uniform() {
    let p = ParameterSet::<f64>::new();
    let mut g = Graph::new(p.table());
    let x = g.constant(Tensor::vector(vec![0.0; 3]));
    let y = g.softmax(x).unwrap();
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn masked_entry_gets_exactly_zero() {
    let p = ParameterSet::<f64>::new();
    let mut g = Graph::new(p.table());
    let x = g.constant(Tensor::vector(vec![0.0; 3]));
    let y = g.masked_softmax(x, &[true, false, true]).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.0, 0.5]);
}

#[test]
fn masked_entry_is_zero_at_single_precision() {
    let p = ParameterSet::<f32>::new();
    let mut g = Graph::new(p.table());
    let x = g.constant(Tensor::vector(vec![3.0, 50.0, -2.0]));
    let y = g.masked_softmax(x, &[true, false, true]).unwrap();
    assert!(g.value(y).data()[1] <= 1e-30);
}

#[test]
fn fully_masked_softmax_is_an_error() {
    let p = ParameterSet::<f64>::new();
    let mut g = Graph::new(p.table());
    let x = g.constant(Tensor::vector(vec![1.0, 2.0]));
    assert!(g.masked_softmax(x, &[false, false]).is_err());
}

#[test]
fn selu_fixes_the_origin() {
    let p = ParameterSet::<f64>::new();
    let mut g = Graph::new(p.table());
    let x = g.constant(Tensor::vector(vec![0.0, 1.0, -1.0]));
    let y = g.selu(x).unwrap();
    let v = g.value(y).data();
    assert_eq!(v[0], 0.0);
    assert!((v[1] - SELU_SCALE).abs() < 1e-15);
    assert!((v[2] - SELU_SCALE * SELU_ALPHA * ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
}

#[test]
fn shape_mismatch_is_reported() {
    let p = ParameterSet::<f64>::new();
    let mut g = Graph::new(p.table());
    let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    assert!(matches!(g.add(a, b), Err(crate::Error::ShapeMismatch { .. })));
    let m = g.constant(Tensor::zeros(&[2, 2]));
    assert!(g.matvec(m, b).is_err());
}

#[test]
fn non_finite_results_are_errors() {
    let p = ParameterSet::<f64>::new();
    let mut g = Graph::new(p.table());
    let a = g.constant(Tensor::vector(vec![f64::MAX, 1.0]));
    assert!(matches!(g.scale(a, 10.0), Err(crate::Error::NonFinite { .. })));
    let probs = g.constant(Tensor::vector(vec![0.0, 1.0]));
    assert!(matches!(g.neg_log_at(probs, 0), Err(crate::Error::NonFinite { .. })));
}

#[test]
fn dropout_is_identity_without_configuration() {
    let p = ParameterSet::<f64>::new();
    let mut g = Graph::new(p.table());
    let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
    assert_eq!(g.dropout(a).unwrap(), a);
    assert!(!g.is_stochastic());
}

#[test]
fn dropout_scales_survivors() {
    let p = ParameterSet::<f64>::new();
    let mut g = Graph::with_dropout(p.table(), 0.5, 11);
    let a = g.constant(Tensor::vector(vec![1.0; 64]));
    let d = g.dropout(a).unwrap();
    assert!(g.is_stochastic());
    assert!(g.value(d).data().iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn conv_max_pools_each_filter() {
    let mut p = ParameterSet::<f64>::new();
    // 4 positions, 1-dim embeddings; width 2.
    let input = p.insert("x", Tensor::from_vec(&[4, 1], vec![1.0, -2.0, 3.0, 0.5]).unwrap()).unwrap();
    let filters = p.insert("f", Tensor::from_vec(&[2, 2], vec![1.0, 1.0, -1.0, 0.0]).unwrap()).unwrap();
    let bias = p.insert("b", Tensor::vector(vec![0.0, 0.5])).unwrap();
    let mut g = Graph::new(p.table());
    let (x, f, b) = (g.param(input), g.param(filters), g.param(bias));
    let y = g.conv1d_max(x, f, b, 2).unwrap();
    // filter 0 window sums: -1, 1, 3.5 -> 3.5 ; filter 1: -1, 2, -3 (+0.5) -> 2.5
    assert_eq!(g.value(y).data(), &[3.5, 2.5]);
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    uniform(shape, 1.0, rng)
}

/// Checks `op` by contracting its output with fixed random weights into a
/// scalar and comparing against central differences over every input.
fn check_primitive<F>(seed: u64, shapes: &[Vec<usize>], op: F) -> f64
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterSet::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| params.insert(format!("in{i}"), random_tensor(&mut rng, s)).unwrap())
        .collect();
    let probe_seed: u64 = rng.gen();
    let report = gradient_check(&mut params, 1e-5, |g| {
        let inputs: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
        let out = op(g, &inputs)?;
        let n = g.value(out).len();
        let mut prng = ChaCha8Rng::seed_from_u64(probe_seed);
        let w = g.constant(uniform(&[1, n], 1.0, &mut prng));
        let flat = g.concat(&[out])?;
        g.matvec(w, flat)
    })
    .unwrap();
    report.max_relative_error
}

const TOL: f64 = 1e-4;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn add_sub_mul_gradients(seed in any::<u64>(), n in 1usize..6) {
        let s = vec![vec![n], vec![n]];
        prop_assert!(check_primitive(seed, &s, |g, x| g.add(x[0], x[1])) < TOL);
        prop_assert!(check_primitive(seed, &s, |g, x| g.sub(x[0], x[1])) < TOL);
        prop_assert!(check_primitive(seed, &s, |g, x| g.mul(x[0], x[1])) < TOL);
    }

    #[test]
    fn broadcast_gradients(seed in any::<u64>(), n in 1usize..5, c in 1usize..5) {
        prop_assert!(check_primitive(seed, &[vec![n], vec![1]], |g, x| g.add_scalar(x[0], x[1])) < TOL);
        prop_assert!(check_primitive(seed, &[vec![n, c], vec![c]], |g, x| g.add_row(x[0], x[1])) < TOL);
        prop_assert!(check_primitive(seed, &[vec![n, c], vec![n]], |g, x| g.scale_rows(x[0], x[1])) < TOL);
        prop_assert!(check_primitive(seed, &[vec![n]], |g, x| g.scale(x[0], 1.7)) < TOL);
    }

    #[test]
    fn product_gradients(seed in any::<u64>(), n in 1usize..5, c in 1usize..5, r in 1usize..5) {
        prop_assert!(check_primitive(seed, &[vec![r, c], vec![c]], |g, x| g.matvec(x[0], x[1])) < TOL);
        prop_assert!(check_primitive(seed, &[vec![n], vec![n, c]], |g, x| g.vecmat(x[0], x[1])) < TOL);
        prop_assert!(check_primitive(seed, &[vec![n, c], vec![r, c]], |g, x| g.matmul_t(x[0], x[1])) < TOL);
    }

    #[test]
    fn structural_gradients(seed in any::<u64>(), n in 2usize..6, c in 1usize..4) {
        prop_assert!(check_primitive(seed, &[vec![n], vec![c]], |g, x| g.concat(&[x[0], x[1], x[0]])) < TOL);
        prop_assert!(check_primitive(seed, &[vec![n]], |g, x| g.slice(x[0], 1, n - 1)) < TOL);
        prop_assert!(check_primitive(seed, &[vec![n, c]], |g, x| g.row(x[0], n - 1)) < TOL);
        prop_assert!(check_primitive(seed, &[vec![c], vec![c]], |g, x| g.stack_rows(&[x[0], x[1], x[0]])) < TOL);
        prop_assert!(check_primitive(seed, &[vec![n, c]], |g, x| g.gather(x[0], &[0, n - 1, 0])) < TOL);
    }

    #[test]
    fn activation_gradients(seed in any::<u64>(), n in 1usize..6) {
        prop_assert!(check_primitive(seed, &[vec![n]], |g, x| g.tanh(x[0])) < TOL);
        prop_assert!(check_primitive(seed, &[vec![n]], |g, x| g.sigmoid(x[0])) < TOL);
        prop_assert!(check_primitive(seed, &[vec![n]], |g, x| g.selu(x[0])) < TOL);
    }

    #[test]
    fn softmax_and_log_gradients(seed in any::<u64>(), n in 2usize..6) {
        prop_assert!(check_primitive(seed, &[vec![n]], |g, x| g.softmax(x[0])) < TOL);
        let mut mask = vec![true; n];
        mask[0] = false;
        prop_assert!(check_primitive(seed, &[vec![n]], |g, x| g.masked_softmax(x[0], &mask)) < TOL);
        let err = check_primitive(seed, &[vec![n]], |g, x| {
            let p = g.masked_softmax(x[0], &mask)?;
            g.neg_log_at(p, n - 1)
        });
        prop_assert!(err < TOL, "neg_log_at: {}", err);
        prop_assert!(check_primitive(seed, &[vec![1], vec![1]], |g, x| g.sum_scalars(&[x[0], x[1], x[0]])) < TOL);
    }

    #[test]
    fn conv_and_lstm_gradients(seed in any::<u64>(), len in 3usize..6, d in 1usize..3, f in 1usize..4) {
        prop_assert!(check_primitive(seed, &[vec![len, d], vec![f, 3 * d], vec![f]], |g, x| g.conv1d_max(x[0], x[1], x[2], 3)) < TOL);
        let h = f;
        let err = check_primitive(seed, &[vec![4 * h, d + h], vec![4 * h], vec![d], vec![h], vec![h]], |g, x| {
            let cell = LstmCellVars { w: x[0], b: x[1] };
            let (hn, cn) = cell.step(g, x[2], x[3], x[4])?;
            g.concat(&[hn, cn])
        });
        prop_assert!(err < TOL, "lstm cell: {}", err);
    }
}

/// `lstm_cell` takes parameter ids; this replicates its arithmetic over
/// arbitrary graph inputs so the gradient test can perturb every operand.
struct LstmCellVars {
    w: Var,
    b: Var,
}

impl LstmCellVars {
    fn step(&self, g: &mut Graph<'_, f64>, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hsz = g.value(h).len();
        let xh = g.concat(&[x, h])?;
        let z = g.matvec(self.w, xh)?;
        let z = g.add(z, self.b)?;
        let parts: Vec<Var> = (0..4).map(|k| g.slice(z, k * hsz, hsz)).collect::<Result<_>>()?;
        let i = g.sigmoid(parts[0])?;
        let f = g.sigmoid(parts[1])?;
        let cand = g.tanh(parts[2])?;
        let o = g.sigmoid(parts[3])?;
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c2 = g.add(keep, write)?;
        let t = g.tanh(c2)?;
        let h2 = g.mul(o, t)?;
        Ok((h2, c2))
    }
}

#[test]
fn lstm_cell_gradients_through_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut params = ParameterSet::<f64>::new();
    let cell = LstmParams::declare(&mut params, "cell", 3, 4, &mut rng).unwrap();
    let xs: Vec<Tensor<f64>> = (0..3).map(|_| uniform(&[3], 1.0, &mut rng)).collect();
    let report = gradient_check(&mut params, 1e-5, |g| {
        let inputs: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let hs = lstm_sequence(g, &cell, &inputs, false)?;
        let all = g.concat(&hs)?;
        let p = g.softmax(all)?;
        g.neg_log_at(p, 2)
    })
    .unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

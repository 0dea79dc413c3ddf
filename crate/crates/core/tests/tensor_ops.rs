//! Every differentiable op is checked against central differences on random
//! inputs, plus the normalisation invariants of softmax and layer-norm.

use proptest::prelude::*;
use vdu_core::tensor::{
    attention_mask, finite_diff_check, Graph, ParamId, ParamStore, SeededRng, Tensor, Var,
};
use vdu_core::Result;

/// Builds `sum(op(inputs) * probe)` so every output element carries a
/// distinct weight.
fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let probe = SeededRng::new(seed ^ 0xabc).normal_tensor(&shape, 1.0);
    let p = g.constant(probe);
    let prod = g.mul(out, p)?;
    Ok(g.sum(prod))
}

fn check<F>(shapes: &[&[usize]], seed: u64, build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = SeededRng::new(seed);
    let mut store = ParamStore::<f64>::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("docformer.in{i}"), rng.normal_tensor(s, 1.0), true))
        .collect();
    let eval = |store: &ParamStore<f64>, backward: bool| -> Result<(f64, Option<ParamStore<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(store, id)).collect();
        let out = build(&mut g, &vars)?;
        let loss = if g.value(out).is_scalar() {
            out
        } else {
            weighted_sum(&mut g, out, seed)?
        };
        let v = g.value(loss).item();
        if backward {
            let mut s = store.clone();
            s.zero_grads();
            g.backward_into(loss, &mut s)?;
            Ok((v, Some(s)))
        } else {
            Ok((v, None))
        }
    };
    let (_, with_grads) = eval(&store, true).unwrap();
    let mut store = with_grads.unwrap();
    finite_diff_check(&mut store, |s| eval(s, false).map(|r| r.0), 1e-5)
        .unwrap()
        .max_rel_err
}

const TOL: f64 = 1e-4;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn matmul_grad(seed in any::<u64>()) {
        let err = check(&[&[3, 4], &[4, 2]], seed, |g, v| g.matmul(v[0], v[1]));
        prop_assert!(err < TOL, "max rel err {}", err);
    }

    #[test]
    fn matmul_t_grad(seed in any::<u64>()) {
        let err = check(&[&[3, 4], &[5, 4]], seed, |g, v| g.matmul_t(v[0], v[1]));
        prop_assert!(err < TOL, "max rel err {}", err);
    }

    #[test]
    fn add_mul_grad(seed in any::<u64>()) {
        let err = check(&[&[2, 3], &[2, 3]], seed, |g, v| {
            let s = g.add(v[0], v[1])?;
            g.mul(s, v[1])
        });
        prop_assert!(err < TOL, "max rel err {}", err);
    }

    #[test]
    fn add_row_scale_grad(seed in any::<u64>()) {
        let err = check(&[&[3, 4], &[1, 4]], seed, |g, v| {
            let s = g.add_row(v[0], v[1])?;
            Ok(g.scale(s, -0.7))
        });
        prop_assert!(err < TOL, "max rel err {}", err);
    }

    #[test]
    fn gelu_grad(seed in any::<u64>()) {
        let err = check(&[&[3, 5]], seed, |g, v| Ok(g.gelu(v[0])));
        prop_assert!(err < TOL, "max rel err {}", err);
    }

    #[test]
    fn layer_norm_grad(seed in any::<u64>()) {
        let err = check(&[&[3, 6], &[1, 6], &[1, 6]], seed, |g, v| g.layer_norm(v[0], v[1], v[2]));
        prop_assert!(err < TOL, "max rel err {}", err);
    }

    #[test]
    fn softmax_grad(seed in any::<u64>()) {
        let err = check(&[&[3, 5]], seed, |g, v| g.softmax(v[0]));
        prop_assert!(err < TOL, "max rel err {}", err);
    }

    #[test]
    fn masked_softmax_grad(seed in any::<u64>()) {
        let mask = attention_mask::<f64>(4, 4, Some(&[false, true, false, false]), true);
        let err = check(&[&[4, 4]], seed, |g, v| g.softmax_masked(v[0], mask.as_ref()));
        prop_assert!(err < TOL, "max rel err {}", err);
    }

    #[test]
    fn embedding_grad(seed in any::<u64>()) {
        let err = check(&[&[6, 3]], seed, |g, v| g.embedding(v[0], &[4, 1, 4, 0]));
        prop_assert!(err < TOL, "max rel err {}", err);
    }

    #[test]
    fn concat_slice_grad(seed in any::<u64>()) {
        let err = check(&[&[2, 3], &[3, 3], &[5, 2]], seed, |g, v| {
            let rows = g.concat_rows(&[v[0], v[1]])?;
            let cols = g.concat_cols(&[rows, v[2]])?;
            let a = g.slice_rows(cols, 1, 3)?;
            g.slice_cols(a, 2, 3)
        });
        prop_assert!(err < TOL, "max rel err {}", err);
    }

    #[test]
    fn means_grad(seed in any::<u64>()) {
        let err = check(&[&[3, 4], &[3, 4]], seed, |g, v| {
            let m = g.mean_of(&[v[0], v[1]])?;
            g.mean_rows(m)
        });
        prop_assert!(err < TOL, "max rel err {}", err);
    }

    #[test]
    fn cross_entropy_grad(seed in any::<u64>()) {
        let err = check(&[&[4, 7]], seed, |g, v| g.softmax_cross_entropy(v[0], &[3, 0, 6, 2], 0));
        prop_assert!(err < TOL, "max rel err {}", err);
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..9) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(SeededRng::new(seed).normal_tensor(&[rows, cols], 3.0));
        let y = g.softmax(x).unwrap();
        for r in 0..rows {
            let s: f64 = g.value(y).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_standardises(seed in any::<u64>(), rows in 1usize..5, cols in 2usize..12) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(SeededRng::new(seed).normal_tensor(&[rows, cols], 2.0));
        let gain = g.constant(Tensor::full(&[1, cols], 1.0));
        let bias = g.constant(Tensor::zeros(&[1, cols]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        let moments = |row: &[f64]| {
            let mean = row.iter().sum::<f64>() / cols as f64;
            (mean, row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64)
        };
        for r in 0..rows {
            // the 1e-5 epsilon inside the square root shrinks the output variance to v / (v + 1e-5)
            let (_, v) = moments(g.value(x).row(r));
            let (mean, var) = moments(g.value(y).row(r));
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - v / (v + 1e-5)).abs() < 1e-9, "var {} for input var {}", var, v);
        }
    }
}

#[test]
fn identical_inputs_bitwise_identical() {
    let run = || {
        let mut g = Graph::<f64>::new();
        let mut rng = SeededRng::new(11);
        let a = g.constant(rng.normal_tensor(&[5, 7], 1.0));
        let b = g.constant(rng.normal_tensor(&[7, 3], 1.0));
        let c = g.matmul(a, b).unwrap();
        let s = g.softmax(c).unwrap();
        g.value(s).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

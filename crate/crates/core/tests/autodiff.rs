mod common;

use common::{random_tensor, SEEDS};
use dense2moe_core::gradcheck::rel_error;
use dense2moe_core::tape::{Tape, Var};
use dense2moe_core::{Error, Result, Tensor};
use proptest::prelude::*;

type Op = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// `sum(op(inputs) ⊙ W)` for a fixed random `W`.
fn objective(op: &Op, inputs: &[Tensor], weight_seed: u64) -> Result<(Tape, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = op(&mut tape, &vars)?;
    let w = random_tensor(tape.value(out).shape(), weight_seed + 1_000_003, 1.0);
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    let loss = tape.sum(prod)?;
    Ok((tape, vars, loss))
}

/// Largest relative error between reverse-mode and central differences
/// over every input entry.
fn max_rel_error(op: &Op, inputs: Vec<Tensor>, seed: u64) -> f64 {
    let (mut tape, vars, loss) = objective(op, &inputs, seed).unwrap();
    tape.backward(loss).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].numel() {
            let eval = |delta: f64| {
                let mut shifted = inputs.clone();
                shifted[i].data_mut()[j] += delta;
                let (t, _, l) = objective(op, &shifted, seed).unwrap();
                t.value(l).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            worst = worst.max(rel_error(analytic.data()[j], numeric));
        }
    }
    worst
}

fn ops() -> Vec<(&'static str, Vec<Vec<usize>>, Box<Op>)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 5]], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("add", vec![vec![3, 4], vec![3, 4]], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![vec![3, 4], vec![3, 4]], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![vec![3, 4], vec![3, 4]], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("mul_scalar", vec![vec![3, 4], vec![]], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", vec![vec![2, 3]], Box::new(|t, v| t.scale(v[0], -1.7))),
        ("linear", vec![vec![3, 4], vec![4, 5], vec![5]], Box::new(|t, v| t.linear(v[0], v[1], Some(v[2])))),
        ("gelu", vec![vec![3, 4]], Box::new(|t, v| t.gelu(v[0]))),
        ("silu", vec![vec![3, 4]], Box::new(|t, v| t.silu(v[0]))),
        ("softmax", vec![vec![3, 5]], Box::new(|t, v| t.softmax_lastdim(v[0]))),
        ("layer_norm", vec![vec![3, 6]], Box::new(|t, v| t.layer_norm(v[0]))),
        ("mse", vec![vec![8], vec![8]], Box::new(|t, v| t.mse(v[0], v[1]))),
        ("l2_norm", vec![vec![8]], Box::new(|t, v| t.l2_norm(v[0]))),
        ("mean", vec![vec![2, 5]], Box::new(|t, v| t.mean(v[0]))),
        ("mean_rows", vec![vec![4, 3]], Box::new(|t, v| t.mean_rows(v[0]))),
        ("transpose", vec![vec![2, 3]], Box::new(|t, v| t.transpose(v[0]))),
        ("reshape", vec![vec![2, 6]], Box::new(|t, v| t.reshape(v[0], &[3, 4]))),
        ("concat_rows", vec![vec![2, 3], vec![1, 3]], Box::new(|t, v| t.concat_rows(&[v[0], v[1]]))),
        ("slice_rows", vec![vec![4, 3]], Box::new(|t, v| t.slice_rows(v[0], 1, 2))),
        ("concat_cols", vec![vec![2, 3], vec![2, 2]], Box::new(|t, v| t.concat_cols(&[v[0], v[1]]))),
        ("slice_cols", vec![vec![2, 5]], Box::new(|t, v| t.slice_cols(v[0], 2, 3))),
        ("modulate", vec![vec![3, 4], vec![1, 4], vec![1, 4]], Box::new(|t, v| t.modulate(v[0], v[1], v[2]))),
        (
            "gated_residual",
            vec![vec![3, 4], vec![1, 4], vec![3, 4]],
            Box::new(|t, v| t.gated_residual(v[0], v[1], v[2])),
        ),
        ("gather_rows", vec![vec![3, 2]], Box::new(|t, v| t.gather_rows(v[0], &[2, 0, 2]))),
        ("scatter_add_rows", vec![vec![3, 2]], Box::new(|t, v| t.scatter_add_rows(v[0], &[1, 0, 1], 4))),
        ("scale_rows", vec![vec![3, 4], vec![3]], Box::new(|t, v| t.scale_rows(v[0], v[1]))),
        ("take", vec![vec![2, 3]], Box::new(|t, v| t.take(v[0], &[5, 0, 0, 3], &[2, 2]))),
        (
            "topk_renorm",
            vec![vec![2, 4]],
            Box::new(|t, v| {
                let a = t.softmax_lastdim(v[0])?;
                t.topk_renorm(a, &[true, false, true, false, false, true, true, true])
            }),
        ),
        (
            "composite_mlp",
            vec![vec![3, 4], vec![4, 6], vec![6], vec![6, 4], vec![4]],
            Box::new(|t, v| {
                let h = t.linear(v[0], v[1], Some(v[2]))?;
                let h = t.gelu(h)?;
                let y = t.linear(h, v[3], Some(v[4]))?;
                let n = t.layer_norm(y)?;
                t.softmax_lastdim(n)
            }),
        ),
    ]
}

#[test]
fn every_op_matches_finite_differences_over_20_seeds() {
    for (name, shapes, op) in ops() {
        for seed in 0..SEEDS {
            let inputs: Vec<Tensor> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| random_tensor(s, seed * 31 + i as u64, 0.8))
                .collect();
            let err = max_rel_error(op.as_ref(), inputs, seed);
            assert!(err < 1e-4, "{name} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn matmul_and_mse_meet_tight_tolerance() {
    let matmul: Box<Op> = Box::new(|t, v| {
        let c = t.matmul(v[0], v[1])?;
        t.sum(c)
    });
    let mse: Box<Op> = Box::new(|t, v| t.mse(v[0], v[1]));
    for seed in 0..SEEDS {
        let a = random_tensor(&[3, 4], seed, 1.0);
        let b = random_tensor(&[4, 5], seed + 100, 1.0);
        assert!(max_rel_error(matmul.as_ref(), vec![a, b], seed) < 1e-6);
        let x = random_tensor(&[8], seed + 200, 1.0);
        let y = random_tensor(&[8], seed + 300, 1.0);
        assert!(max_rel_error(mse.as_ref(), vec![x, y], seed) < 1e-6);
    }
}

#[test]
fn sum_of_squares_oracle() {
    let w = random_tensor(&[5], 4, 1.0);
    let mut tape = Tape::new();
    let v = tape.param(w.clone());
    let sq = tape.mul(v, v).unwrap();
    let l = tape.sum(sq).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(v).unwrap(), w.map(|x| 2.0 * x));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.param(Tensor::zeros(&[2, 3]));
    let b = tape.param(Tensor::zeros(&[4, 5]));
    match tape.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 5]);
        }
        other => panic!("expected a shape error, got {other:?}"),
    }
}

#[test]
fn non_finite_output_is_a_numeric_fault() {
    let mut tape = Tape::new();
    let a = tape.param(Tensor::vector(vec![f64::MAX, 1.0]));
    let b = tape.scale(a, 10.0);
    assert!(matches!(b, Err(Error::NumericFault { op: "scale" })));
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let (tape, _, loss) = objective(ops()[28].2.as_ref(), &[
            random_tensor(&[3, 4], 1, 1.0),
            random_tensor(&[4, 6], 2, 1.0),
            random_tensor(&[6], 3, 1.0),
            random_tensor(&[6, 4], 4, 1.0),
            random_tensor(&[4], 5, 1.0),
        ], 0)
        .unwrap();
        tape.value(loss).item().to_bits()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(3, 4, data).unwrap());
        let s = tape.softmax_lastdim(a).unwrap();
        for r in 0..3 {
            let sum: f64 = tape.value(s).row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_rows_are_centered(data in prop::collection::vec(-100.0f64..100.0, 18)) {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(3, 6, data).unwrap());
        let n = tape.layer_norm(a).unwrap();
        for r in 0..3 {
            let mean: f64 = tape.value(n).row(r).iter().sum::<f64>() / 6.0;
            prop_assert!(mean.abs() < 1e-10);
        }
    }

    #[test]
    fn fan_out_accumulates(w in prop::collection::vec(-5.0f64..5.0, 4), c in -3.0f64..3.0) {
        // loss = sum(w) + c·sum(w) → grad = 1 + c
        let mut tape = Tape::new();
        let v = tape.param(Tensor::vector(w));
        let a = tape.sum(v).unwrap();
        let s = tape.scale(v, c).unwrap();
        let b = tape.sum(s).unwrap();
        let l = tape.add(a, b).unwrap();
        tape.backward(l).unwrap();
        for g in tape.grad(v).unwrap().data() {
            prop_assert!((g - (1.0 + c)).abs() < 1e-12);
        }
    }
}

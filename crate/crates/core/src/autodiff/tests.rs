//! Finite-difference oracles for every tape op.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{central_diff_grad, relative_error};
use super::*;

/// Build a tape from a flat parameter vector, return the scalar loss; used
/// both for the analytic pass and inside the FD closure.
fn check_composition<B>(n_params: usize, seed: u64, build: B, tol: f64)
where
    B: Fn(&mut Tape<f64>, VarId) -> VarId,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let point: Vec<f64> = (0..n_params).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();

    let loss_of = |p: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row_vec(p.to_vec()));
        let loss = build(&mut tape, x);
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let x = tape.param(Tensor::row_vec(point.clone()));
    let loss = build(&mut tape, x);
    let grads = tape.backward(loss);
    let analytic = &grads.get(x).expect("gradient for input").data;

    let numeric = central_diff_grad(loss_of, &point, 1e-6);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = relative_error(*a, *n);
        assert!(err <= tol, "coordinate {i}: analytic {a} vs numeric {n} (err {err})");
    }
}

#[test]
fn matmul_linear_relu_chain() {
    check_composition(
        12,
        1,
        |tape, x| {
            let m = tape.reshape(x, 3, 4);
            let w = tape.constant(Tensor::from_vec(4, 2, (1..=8).map(|v| v as f64 * 0.1).collect()));
            let b = tape.constant(Tensor::row_vec(vec![0.1, -0.2]));
            let y = linear(tape, m, w, b);
            let r = tape.relu(y);
            tape.mean_row_sqnorm(r)
        },
        1e-5,
    );
}

#[test]
fn layer_norm_grad() {
    check_composition(
        8,
        2,
        |tape, x| {
            let m = tape.reshape(x, 2, 4);
            let g = tape.constant(Tensor::row_vec(vec![1.1, 0.9, 1.0, 1.2]));
            let b = tape.constant(Tensor::row_vec(vec![0.0, 0.1, -0.1, 0.2]));
            let y = tape.layer_norm(m, g, b, 1e-5);
            tape.mean_row_sqnorm(y)
        },
        1e-4,
    );
}

#[test]
fn layer_norm_affine_grads() {
    // gradients wrt gain and bias
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::<f64>::uniform(3, 4, 1.0, &mut rng);
    let point = vec![1.0, 0.9, 1.1, 1.0, 0.0, 0.1, -0.1, 0.0];
    let loss_of = |p: &[f64]| {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let g = tape.constant(Tensor::row_vec(p[0..4].to_vec()));
        let b = tape.constant(Tensor::row_vec(p[4..8].to_vec()));
        let y = tape.layer_norm(xv, g, b, 1e-5);
        let l = tape.mean_row_sqnorm(y);
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = tape.param(Tensor::row_vec(point[0..4].to_vec()));
    let b = tape.param(Tensor::row_vec(point[4..8].to_vec()));
    let y = tape.layer_norm(xv, g, b, 1e-5);
    let l = tape.mean_row_sqnorm(y);
    let grads = tape.backward(l);
    let analytic: Vec<f64> = grads
        .get(g)
        .unwrap()
        .data
        .iter()
        .chain(&grads.get(b).unwrap().data)
        .copied()
        .collect();
    let numeric = central_diff_grad(loss_of, &point, 1e-6);
    for (a, n) in analytic.iter().zip(&numeric) {
        assert!(relative_error(*a, *n) <= 1e-5, "{a} vs {n}");
    }
}

#[test]
fn softmax_sigmoid_mul_chain() {
    check_composition(
        6,
        4,
        |tape, x| {
            let m = tape.reshape(x, 2, 3);
            let s = tape.softmax_rows(m);
            let g = tape.sigmoid(m);
            let y = tape.mul(s, g);
            tape.sum_all(y)
        },
        1e-5,
    );
}

#[test]
fn scatter_select_permute_chain() {
    check_composition(
        12,
        5,
        |tape, x| {
            let m = tape.reshape(x, 4, 3);
            let a = tape.narrow_rows(m, 0, 2);
            let b = tape.narrow_rows(m, 2, 2);
            // interleave rows a0 b0 a1 b1
            let inter = tape.scatter_rows(&[(a, vec![0, 2]), (b, vec![1, 3])], 4);
            let picked = tape.select_rows(inter, &[1, 3, 0]);
            let perm = tape.permute_cols(picked, &[2, 0, 1]);
            tape.mean_row_sqnorm(perm)
        },
        1e-5,
    );
}

#[test]
fn pooling_and_concat_chain() {
    check_composition(
        16,
        6,
        |tape, x| {
            let m = tape.reshape(x, 4, 4);
            let pooled = tape.mean_pool_groups(m, 2); // [2 x 4]
            let other = tape.scale(pooled, 0.5);
            let cat = tape.concat_cols(&[pooled, other]); // [2 x 8]
            tape.mean_all(cat)
        },
        1e-5,
    );
}

#[test]
fn norm_rows_all_kinds() {
    for kind in [NormKind::L1, NormKind::L2, NormKind::LInf] {
        check_composition(
            9,
            7,
            move |tape, x| {
                let m = tape.reshape(x, 3, 3);
                tape.norm_rows_mean(m, kind)
            },
            1e-4,
        );
    }
}

#[test]
fn norm_rows_l2_zero_row_has_zero_subgradient() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.param(Tensor::zeros(2, 3));
    let l = tape.norm_rows_mean(x, NormKind::L2);
    let grads = tape.backward(l);
    assert!(grads.get(x).unwrap().data.iter().all(|&v| v == 0.0));
}

#[test]
fn expectile_mean_grad_both_sides() {
    for sigma in [0.3, 0.5, 0.9] {
        check_composition(
            6,
            8,
            move |tape, x| {
                let m = tape.reshape(x, 6, 1);
                tape.expectile_mean(m, sigma)
            },
            1e-4,
        );
    }
}

#[test]
fn cross_entropy_grad_weighted_and_plain() {
    check_composition(
        8,
        9,
        |tape, x| {
            let m = tape.reshape(x, 2, 4);
            tape.softmax_cross_entropy(m, &[1, 3], None)
        },
        1e-5,
    );
    check_composition(
        8,
        10,
        |tape, x| {
            let m = tape.reshape(x, 2, 4);
            tape.softmax_cross_entropy(m, &[0, 2], Some(&[0.5, 2.0]))
        },
        1e-5,
    );
}

#[test]
fn select_cols_per_row_grad() {
    check_composition(
        8,
        11,
        |tape, x| {
            let m = tape.reshape(x, 2, 4);
            let picked = tape.select_cols_per_row(m, &[3, 1]);
            tape.mean_row_sqnorm(picked)
        },
        1e-5,
    );
}

#[test]
fn embedding_lookup_grad() {
    let table = Tensor::<f64>::from_vec(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
    let point = table.data.clone();
    let loss_of = |p: &[f64]| {
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::from_vec(3, 2, p.to_vec()));
        let e = tape.embed_lookup(t, &[2, 0, 2]);
        let l = tape.mean_row_sqnorm(e);
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let t = tape.param(table);
    let e = tape.embed_lookup(t, &[2, 0, 2]);
    let l = tape.mean_row_sqnorm(e);
    let grads = tape.backward(l);
    let numeric = central_diff_grad(loss_of, &point, 1e-6);
    for (a, n) in grads.get(t).unwrap().data.iter().zip(&numeric) {
        assert!(relative_error(*a, *n) <= 1e-5);
    }
}

#[test]
fn dropout_masks_gradient_identically_to_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.param(Tensor::ones(1, 100));
    let d = tape.dropout(x, 0.4, &mut rng);
    let l = tape.sum_all(d);
    let grads = tape.backward(l);
    let g = grads.get(x).unwrap();
    let out = tape.value(d);
    // gradient through a kept entry equals its scaling; dropped entries get zero
    for (gv, ov) in g.data.iter().zip(&out.data) {
        if *ov == 0.0 {
            assert_eq!(*gv, 0.0);
        } else {
            assert!((gv - 1.0 / 0.6).abs() < 1e-12);
        }
    }
}

#[test]
fn lr_zero_adam_leaves_params_bit_identical() {
    use crate::optim::Adam;
    let mut p = Tensor::<f64>::from_vec(1, 3, vec![0.5, -0.25, 0.125]);
    let before = p.clone();
    let g = Tensor::from_vec(1, 3, vec![1.0, 2.0, 3.0]);
    let mut adam = Adam::new(0.0);
    adam.update(&mut [&mut p], &[Some(&g)]);
    assert_eq!(p, before);
}

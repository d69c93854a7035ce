//! Finite-difference validation of every differentiable tape operation.
//!
//! Each op is exercised on 100 seeded random instances; analytic
//! gradients must agree with central differences (step 1e-5) within a
//! scaled error of 1e-4, and well within 1e-6 for the simple ops.

use cgvlm_core::tensor::fd::check_grads;
use cgvlm_core::{Tape, Tensor, Var};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

const INSTANCES: usize = 100;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let numel = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Runs `build` over `INSTANCES` random input sets and returns the
/// worst scaled gradient error observed.
fn sweep<F>(seed: u64, shapes: &[&[usize]], mut build: F) -> f64
where
    F: FnMut(&Tape, &[Var]) -> Var,
{
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut r, s)).collect();
        worst = worst.max(check_grads(&inputs, &mut build));
    }
    worst
}

#[test]
fn grad_matmul() {
    let err = sweep(10, &[&[4, 5], &[5, 2]], |_, xs| {
        xs[0].matmul(&xs[1]).unwrap().sum_all()
    });
    assert!(err < 1e-6, "matmul grad err {err}");
}

#[test]
fn grad_elementwise_binary() {
    let err = sweep(11, &[&[3, 4], &[3, 4]], |_, xs| {
        // Mix add/sub/mul so all three backward rules are on the path.
        let s = xs[0].add(&xs[1]).unwrap();
        let d = xs[0].sub(&xs[1]).unwrap();
        s.mul(&d).unwrap().sum_all()
    });
    assert!(err < 1e-6, "add/sub/mul grad err {err}");
}

#[test]
fn grad_div() {
    let mut r = rng(12);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let a = rand_tensor(&mut r, &[6]);
        // Keep denominators away from zero.
        let b_data: Vec<f64> = (0..6)
            .map(|_| {
                let v: f64 = r.random_range(0.5..2.0);
                if r.random_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let b = Tensor::vector(b_data);
        worst = worst.max(check_grads(&[a, b], |_, xs| {
            xs[0].div(&xs[1]).unwrap().sum_all()
        }));
    }
    assert!(worst < 1e-6, "div grad err {worst}");
}

#[test]
fn grad_neg_scale() {
    let err = sweep(13, &[&[7]], |_, xs| xs[0].neg().scale(3.25).sum_all());
    assert!(err < 1e-6, "neg/scale grad err {err}");
}

#[test]
fn grad_gelu() {
    let err = sweep(14, &[&[16]], |_, xs| xs[0].gelu().sum_all());
    assert!(err < 1e-6, "gelu grad err {err}");
}

#[test]
fn grad_exp_ln_sqrt() {
    let mut r = rng(15);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let pos: Vec<f64> = (0..5).map(|_| r.random_range(0.2..3.0)).collect();
        let t = Tensor::vector(pos);
        worst = worst.max(check_grads(&[t], |_, xs| {
            xs[0].ln().exp().sqrt().sum_all()
        }));
    }
    assert!(worst < 1e-6, "exp/ln/sqrt grad err {worst}");
}

#[test]
fn grad_softmax_both_axes() {
    // Compose with a fixed weighting so the softmax Jacobian is not
    // annihilated by the uniform row-sum gradient.
    let err = sweep(16, &[&[3, 5]], |tape, xs| {
        let w = tape.constant(&Tensor::new(vec![3, 5], (0..15).map(|i| (i % 4) as f64).collect()).unwrap());
        let s1 = xs[0].softmax(1).unwrap().mul(&w).unwrap().sum_all();
        let s0 = xs[0].softmax(0).unwrap().mul(&w).unwrap().sum_all();
        s1.add(&s0).unwrap()
    });
    assert!(err < 1e-6, "softmax grad err {err}");
}

#[test]
fn grad_log_softmax() {
    let err = sweep(17, &[&[4, 6]], |tape, xs| {
        let w = tape.constant(
            &Tensor::new(vec![4, 6], (0..24).map(|i| ((i * 7) % 5) as f64 * 0.5).collect()).unwrap(),
        );
        xs[0].log_softmax_rows().unwrap().mul(&w).unwrap().sum_all()
    });
    assert!(err < 1e-6, "log_softmax grad err {err}");
}

#[test]
fn grad_cross_entropy() {
    let mut r = rng(18);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let logits = rand_tensor(&mut r, &[6, 9]);
        let targets: Vec<usize> = (0..6).map(|_| r.random_range(0..9)).collect();
        let mut mask: Vec<bool> = (0..6).map(|_| r.random_bool(0.7)).collect();
        if mask.iter().all(|m| !m) {
            mask[0] = true;
        }
        worst = worst.max(check_grads(&[logits], |_, xs| {
            xs[0].cross_entropy(&targets, &mask).unwrap()
        }));
    }
    assert!(worst < 1e-6, "cross_entropy grad err {worst}");
}

#[test]
fn grad_gather_concat_slice() {
    let mut r = rng(19);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let table = rand_tensor(&mut r, &[5, 3]);
        let extra = rand_tensor(&mut r, &[2, 3]);
        let indices: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
        worst = worst.max(check_grads(&[table, extra], |_, xs| {
            let picked = xs[0].gather_rows(&indices).unwrap();
            let cat = Var::concat_rows(&[picked, xs[1].clone()]).unwrap();
            let sl = cat.slice_rows(1, 4).unwrap();
            sl.mul(&sl).unwrap().sum_all()
        }));
    }
    assert!(worst < 1e-6, "gather/concat/slice grad err {worst}");
}

#[test]
fn grad_cols_ops_and_transpose() {
    let err = sweep(20, &[&[3, 4], &[3, 2]], |_, xs| {
        let cat = Var::concat_cols(&[xs[0].clone(), xs[1].clone()]).unwrap();
        let part = cat.slice_cols(2, 3).unwrap();
        let t = part.transpose().unwrap();
        t.mul(&t).unwrap().sum_all()
    });
    assert!(err < 1e-6, "cols/transpose grad err {err}");
}

#[test]
fn grad_reductions() {
    let err = sweep(21, &[&[4, 3]], |tape, xs| {
        let w = tape.constant(&Tensor::vector(vec![1.0, -2.0, 0.5]));
        let m = xs[0].mean_rows().unwrap().mul(&w).unwrap().sum_all();
        let q = xs[0].mul(&xs[0]).unwrap().mean_all().unwrap();
        m.add(&q).unwrap()
    });
    assert!(err < 1e-6, "reduction grad err {err}");
}

#[test]
fn grad_add_row_mul_scalar_reshape() {
    let err = sweep(22, &[&[3, 4], &[4], &[]], |_, xs| {
        let biased = xs[0].add_row(&xs[1]).unwrap();
        let scaled = biased.mul_scalar(&xs[2]).unwrap();
        let flat = scaled.reshape(vec![12]).unwrap();
        flat.mul(&flat).unwrap().sum_all()
    });
    assert!(err < 1e-6, "add_row/mul_scalar/reshape grad err {err}");
}

#[test]
fn grad_normalize_rows() {
    let mut r = rng(23);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        // Rows bounded away from zero norm so the domain is respected.
        let data: Vec<f64> = (0..12)
            .map(|_| {
                let v: f64 = r.random_range(0.3..2.0);
                if r.random_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let x = Tensor::new(vec![3, 4], data).unwrap();
        worst = worst.max(check_grads(&[x], |tape, xs| {
            let w = tape.constant(
                &Tensor::new(vec![3, 4], (0..12).map(|i| (i % 3) as f64 - 1.0).collect()).unwrap(),
            );
            xs[0].normalize_rows().unwrap().mul(&w).unwrap().sum_all()
        }));
    }
    assert!(worst < 1e-6, "normalize_rows grad err {worst}");
}

#[test]
fn grad_layer_norm() {
    let err = sweep(24, &[&[4, 6], &[6], &[6]], |tape, xs| {
        let w = tape.constant(
            &Tensor::new(vec![4, 6], (0..24).map(|i| ((i * 3) % 7) as f64 * 0.25).collect())
                .unwrap(),
        );
        xs[0]
            .layer_norm(&xs[1], &xs[2], 1e-5)
            .unwrap()
            .mul(&w)
            .unwrap()
            .sum_all()
    });
    assert!(err < 1e-4, "layer_norm grad err {err}");
}

#[test]
fn grad_deep_composition() {
    // A small MLP-like chain touching matmul, bias, gelu, layer norm,
    // softmax and cross entropy in one graph.
    let mut r = rng(25);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let x = rand_tensor(&mut r, &[3, 4]);
        let w1 = rand_tensor(&mut r, &[4, 5]);
        let b1 = rand_tensor(&mut r, &[5]);
        let g = Tensor::vector(vec![1.0, 0.9, 1.1, 1.0, 0.8]);
        let be = Tensor::vector(vec![0.0, 0.1, -0.1, 0.0, 0.2]);
        let targets = [2usize, 0, 4];
        let mask = [true, true, false];
        worst = worst.max(check_grads(&[x, w1, b1, g, be], |_, xs| {
            let h = xs[0].matmul(&xs[1]).unwrap().add_row(&xs[2]).unwrap().gelu();
            let n = h.layer_norm(&xs[3], &xs[4], 1e-5).unwrap();
            n.cross_entropy(&targets, &mask).unwrap()
        }));
    }
    assert!(worst < 1e-4, "deep composition grad err {worst}");
}

#[test]
fn forward_determinism_same_seed_bit_identical() {
    let run = |seed: u64| -> Vec<f64> {
        let mut r = rng(seed);
        let x = rand_tensor(&mut r, &[4, 4]);
        let w = rand_tensor(&mut r, &[4, 4]);
        let tape = Tape::new();
        let xv = tape.leaf(&x);
        let wv = tape.leaf(&w);
        let y = xv.matmul(&wv).unwrap().gelu().softmax(1).unwrap();
        y.value().data().to_vec()
    };
    let a = run(99);
    let b = run(99);
    assert_eq!(a, b);
}

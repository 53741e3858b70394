use depthrnn_core::numerics::{grad_check, Activation, NumericsError, Tape, Tensor, Var, DEFAULT_STEP};
use depthrnn_core::rng::{self, Rng};
use proptest::prelude::*;
use rand::Rng as _;

type Build = fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>;

/// Weighted sum of `y` against a fixed pseudo-random pattern so no coordinate cancels.
fn probe(t: &mut Tape, y: Var) -> Result<Var, NumericsError> {
    let n = t.value(y).len();
    let shape = t.value(y).shape().to_vec();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + ((i * 7919) % 13) as f64 / 13.0).collect();
    let w = t.constant(Tensor::new(&shape, w)?);
    let p = t.mul(y, w)?;
    t.sum(p)
}

fn check(name: &str, f: Build, inputs: &dyn Fn(&mut Rng, usize) -> Vec<Tensor>) {
    check_with(name, f, inputs, |_| DEFAULT_STEP)
}

fn check_with(name: &str, f: Build, inputs: &dyn Fn(&mut Rng, usize) -> Vec<Tensor>, step: fn(usize) -> f64) {
    let mut rng = rng::seeded(0x9A1 ^ name.len() as u64);
    let mut worst = 0.0f64;
    for i in 0..10 {
        let d = 1 + i % 8;
        let g = grad_check(f, &inputs(&mut rng, d), step(d)).unwrap();
        worst = worst.max(g.max_rel_error);
    }
    assert!(worst <= 1e-5, "{name}: max relative error {worst:e}");
}

fn mat(rng: &mut Rng, r: usize, c: usize) -> Tensor {
    rng::uniform(rng, &[r, c], 1.0)
}

fn vec_(rng: &mut Rng, n: usize) -> Tensor {
    rng::uniform(rng, &[n], 1.0)
}

#[test]
fn binary_primitives_match_finite_differences() {
    check(
        "matmul",
        |t, x| {
            let y = t.matmul(x[0], x[1])?;
            probe(t, y)
        },
        &|r, d| vec![mat(r, 3, d), mat(r, d, 2)],
    );
    check(
        "add",
        |t, x| {
            let y = t.add(x[0], x[1])?;
            probe(t, y)
        },
        &|r, d| vec![mat(r, 2, d), mat(r, 2, d)],
    );
    check(
        "sub",
        |t, x| {
            let y = t.sub(x[0], x[1])?;
            probe(t, y)
        },
        &|r, d| vec![vec_(r, d), vec_(r, d)],
    );
    check(
        "mul",
        |t, x| {
            let y = t.mul(x[0], x[1])?;
            probe(t, y)
        },
        &|r, d| vec![mat(r, 3, d), mat(r, 3, d)],
    );
    check(
        "add_row",
        |t, x| {
            let y = t.add_row(x[0], x[1])?;
            probe(t, y)
        },
        &|r, d| vec![mat(r, 3, d), vec_(r, d)],
    );
    check(
        "scale_rows",
        |t, x| {
            let y = t.scale_rows(x[0], x[1])?;
            probe(t, y)
        },
        &|r, d| vec![mat(r, 4, d), vec_(r, 4)],
    );
}

#[test]
fn unary_primitives_match_finite_differences() {
    check(
        "transpose",
        |t, x| {
            let y = t.transpose(x[0])?;
            probe(t, y)
        },
        &|r, d| vec![mat(r, 3, d)],
    );
    check(
        "affine",
        |t, x| {
            let y = t.affine(x[0], -1.7, 0.4)?;
            probe(t, y)
        },
        &|r, d| vec![mat(r, 2, d)],
    );
    for (name, kind) in [
        ("sigmoid", Activation::Sigmoid),
        ("relu", Activation::Relu),
        ("tanh", Activation::Tanh),
        ("gelu", Activation::Gelu),
    ] {
        let f: Build = match kind {
            Activation::Sigmoid => |t, x| {
                let y = t.activation(Activation::Sigmoid, x[0])?;
                probe(t, y)
            },
            Activation::Relu => |t, x| {
                let y = t.activation(Activation::Relu, x[0])?;
                probe(t, y)
            },
            Activation::Tanh => |t, x| {
                let y = t.activation(Activation::Tanh, x[0])?;
                probe(t, y)
            },
            Activation::Gelu => |t, x| {
                let y = t.activation(Activation::Gelu, x[0])?;
                probe(t, y)
            },
        };
        check(name, f, &|r, d| vec![rng::uniform(r, &[3, d], 2.0)]);
    }
    check(
        "sum",
        |t, x| t.sum(x[0]),
        &|r, d| vec![mat(r, 2, d)],
    );
}

#[test]
fn structural_primitives_match_finite_differences() {
    check(
        "concat",
        |t, x| {
            let y = t.concat(&[x[0], x[1]])?;
            probe(t, y)
        },
        &|r, d| vec![mat(r, 3, d), mat(r, 3, 2)],
    );
    check(
        "slice_cols",
        |t, x| {
            let c = t.value(x[0]).cols();
            let y = t.slice_cols(x[0], c / 2, c - c / 2)?;
            probe(t, y)
        },
        &|r, d| vec![mat(r, 3, d)],
    );
    check(
        "slice_rows",
        |t, x| {
            let y = t.slice_rows(x[0], 1, 2)?;
            probe(t, y)
        },
        &|r, d| vec![mat(r, 4, d)],
    );
    check(
        "gather_rows",
        |t, x| {
            let y = t.gather_rows(x[0], &[2, 0, 2, 1])?;
            probe(t, y)
        },
        &|r, d| vec![mat(r, 3, d)],
    );
}

#[test]
fn normalizing_primitives_match_finite_differences() {
    check(
        "causal_softmax",
        |t, x| {
            let y = t.causal_softmax(x[0])?;
            probe(t, y)
        },
        &|r, d| vec![rng::uniform(r, &[d, d], 2.0)],
    );
    // A normalized pair is ±1 up to eps, so at width 2 the input gradient is
    // O(eps) and rounding noise at the default step swamps it; use 1e-5 there.
    check_with(
        "layer_norm",
        |t, x| {
            let y = t.layer_norm(x[0], x[1], x[2])?;
            probe(t, y)
        },
        &|r, d| vec![mat(r, 3, d), vec_(r, d), vec_(r, d)],
        |d| if d == 2 { 1e-5 } else { DEFAULT_STEP },
    );
    check(
        "softmax_cross_entropy",
        |t, x| {
            let rows = t.value(x[0]).rows();
            let cols = t.value(x[0]).cols();
            let targets: Vec<Option<usize>> = (0..rows).map(|r| (r != 1).then_some((3 * r + 1) % cols)).collect();
            t.softmax_cross_entropy(x[0], &targets)
        },
        &|r, d| vec![rng::uniform(r, &[3, d + 1], 2.0)],
    );
}

#[test]
fn trivial_gradients() {
    let mut t = Tape::new();
    let x = t.leaf(&Tensor::vector(vec![1.0, -2.0, 5.0]).with_requires_grad(true));
    let s = t.sum(x).unwrap();
    assert_eq!(t.backward(s).unwrap().get(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut t = Tape::new();
    let w = t.leaf(&Tensor::vector(vec![0.0, 0.0]).with_requires_grad(true));
    let c = t.constant(Tensor::vector(vec![3.0, -8.0]));
    let s = t.sigmoid(w).unwrap();
    let y = t.mul(s, c).unwrap();
    let l = t.sum(y).unwrap();
    assert_eq!(t.backward(l).unwrap().get(w).unwrap(), &[0.75, -2.0]);

    let mut t = Tape::new();
    let x = t.leaf(&Tensor::scalar(1.5).with_requires_grad(true));
    let y = t.add(x, x).unwrap();
    assert_eq!(t.backward(y).unwrap().get(x).unwrap(), &[2.0]);
}

fn naive(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            for p in 0..k {
                out[i * m + j] += a.data()[i * k + p] * b.data()[p * m + j];
            }
        }
    }
    Tensor::matrix(n, m, out).unwrap()
}

fn tape_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let mut t = Tape::new();
    let (x, y) = (t.constant(a.clone()), t.constant(b.clone()));
    let z = t.matmul(x, y).unwrap();
    t.value(z).clone()
}

#[test]
fn matmul_matches_triple_loop_and_associates() {
    let mut rng = rng::seeded(44);
    for _ in 0..50 {
        let a = rng::uniform(&mut rng, &[4, 4], 1.0);
        let b = rng::uniform(&mut rng, &[4, 4], 1.0);
        let c = rng::uniform(&mut rng, &[4, 4], 1.0);
        assert!(tape_matmul(&a, &b).max_abs_diff(&naive(&a, &b)) <= 1e-12);
        let left = tape_matmul(&tape_matmul(&a, &b), &c);
        let right = tape_matmul(&a, &tape_matmul(&b, &c));
        assert!(left.max_abs_diff(&naive(&naive(&a, &b), &c)) <= 1e-10);
        assert!(left.max_abs_diff(&right) <= 1e-10);
    }
}

fn ce(logits: Vec<f64>, target: usize) -> f64 {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(logits));
    let l = t.softmax_cross_entropy(x, &[Some(target)]).unwrap();
    t.value(l).item().unwrap()
}

proptest! {
    #[test]
    fn cross_entropy_is_non_negative(
        logits in prop::collection::vec(-50.0f64..50.0, 2..12),
        pick in 0usize..100,
    ) {
        let target = pick % logits.len();
        prop_assert!(ce(logits, target) >= 0.0);
    }
}

#[test]
fn cross_entropy_reaches_zero_only_when_target_dominates() {
    assert!(ce(vec![0.0, 0.0, 0.0], 1) > 1.0);
    assert!(ce(vec![10.0, 0.0, 0.0], 0) > 0.0);
    assert_eq!(ce(vec![800.0, 0.0, 0.0], 0), 0.0);
    let mut rng = rng::seeded(5);
    for _ in 0..100 {
        let logits: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
        assert!(ce(logits, 2) > 0.0);
    }
}

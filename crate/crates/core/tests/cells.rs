use depthrnn_core::cells::{self, Ablation, DgDpuParams, DgDpuVars, GruParams, GruVars};
use depthrnn_core::numerics::{grad_check, Tensor, DEFAULT_STEP};
use depthrnn_core::rng;
use proptest::prelude::*;
use rand::Rng as _;

fn vector(d: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-4.0f64..4.0, d).prop_map(Tensor::vector)
}

fn xavier(fan_in: usize, fan_out: usize) -> std::ops::Range<f64> {
    let b = (6.0 / (fan_in + fan_out) as f64).sqrt();
    -b..b
}

/// Weights anywhere in the Xavier range. Larger weights can push a gate logit
/// past ~37, where the logistic rounds to exactly 1 (see `saturated_gates`).
fn params(d: usize) -> impl Strategy<Value = DgDpuParams> {
    (
        prop::collection::vec(xavier(d, d), d * d),
        prop::collection::vec(xavier(2 * d, d), 2 * d * d),
        prop::collection::vec(xavier(d, 1), d),
    )
        .prop_map(move |(a, e1, e2)| {
            DgDpuParams::new(
                Tensor::matrix(d, d, a).unwrap(),
                Tensor::matrix(2 * d, d, e1).unwrap(),
                Tensor::matrix(d, 1, e2).unwrap(),
            )
            .unwrap()
        })
}

fn instance() -> impl Strategy<Value = (Tensor, Tensor, DgDpuParams)> {
    (1usize..=8).prop_flat_map(|d| (vector(d), vector(d), params(d)))
}

fn between(x: f64, a: f64, b: f64) -> bool {
    a.min(b) <= x && x <= a.max(b)
}

proptest! {
    #[test]
    fn gates_stay_open_and_blends_stay_convex((m, v, p) in instance()) {
        let (next, trace) = cells::dgdpu_step(&m, &v, &p).unwrap();
        prop_assert!(trace.g_a.data().iter().all(|&g| g > 0.0 && g < 1.0));
        prop_assert!(trace.g_e > 0.0 && trace.g_e < 1.0);
        for i in 0..m.len() {
            let (mi, vi, ci) = (m.data()[i], v.data()[i], trace.c_tilde.data()[i]);
            prop_assert!(between(ci, mi, vi), "c_tilde[{i}] = {ci} outside [{mi}, {vi}]");
            prop_assert!(between(next.data()[i], mi, ci));
        }
    }

    #[test]
    fn equal_inputs_are_a_fixed_point((m, _, p) in instance()) {
        let (next, trace) = cells::dgdpu_step(&m, &m, &p).unwrap();
        prop_assert_eq!(&next, &m);
        prop_assert_eq!(&trace.c_tilde, &m);
        let (next, _) = cells::ablated_step(Ablation::ConstraintOnly, &m, &m, &p).unwrap();
        prop_assert_eq!(&next, &m);
        let (next, _) = cells::ablated_step(Ablation::CorrectionOnly, &m, &m, &p).unwrap();
        prop_assert_eq!(&next, &m);
    }

    #[test]
    fn ablations_are_convex((m, v, p) in instance()) {
        for kind in [Ablation::ConstraintOnly, Ablation::CorrectionOnly] {
            let (next, _) = cells::ablated_step(kind, &m, &v, &p).unwrap();
            for i in 0..m.len() {
                prop_assert!(between(next.data()[i], m.data()[i], v.data()[i]));
            }
        }
    }

    #[test]
    fn gru_output_is_bounded_by_state_and_candidate_range((m, v, _) in instance()) {
        let mut rng = rng::seeded(m.len() as u64);
        let p = GruParams::xavier(m.len(), &mut rng);
        let next = cells::gru_step(&m, &v, &p).unwrap();
        // convex blend of v and a tanh candidate in (-1, 1)
        for i in 0..m.len() {
            let vi = v.data()[i];
            prop_assert!(next.data()[i] >= vi.min(-1.0) && next.data()[i] <= vi.max(1.0));
        }
    }
}

#[test]
fn saturated_gates() {
    // huge weights drive both logits far past the point where sigmoid rounds to 1
    let d = 2;
    let p = DgDpuParams::new(
        Tensor::matrix(d, d, vec![-500.0, 0.0, 0.0, -500.0]).unwrap(),
        Tensor::matrix(2 * d, d, vec![100.0; 2 * d * d]).unwrap(),
        Tensor::matrix(d, 1, vec![100.0; d]).unwrap(),
    )
    .unwrap();
    let m = Tensor::vector(vec![3.0, 0.1]);
    let v = Tensor::vector(vec![1.0, 0.3]);
    let (next, trace) = cells::dgdpu_step(&m, &v, &p).unwrap();
    assert_eq!(trace.g_e, 1.0);
    assert!(trace.g_a.data().iter().all(|&g| (0.0..=1.0).contains(&g)));
    for i in 0..d {
        let (lo, hi) = (m.data()[i].min(v.data()[i]), m.data()[i].max(v.data()[i]));
        let ulp = f64::EPSILON * hi.abs().max(lo.abs());
        assert!(next.data()[i] >= lo - ulp && next.data()[i] <= hi + ulp);
    }
}

#[test]
fn correction_gate_depends_on_inputs() {
    let mut rng = rng::seeded(21);
    let p = DgDpuParams::xavier(4, &mut rng);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for _ in 0..2000 {
        let m = rng::uniform(&mut rng, &[4], 3.0);
        let v = rng::uniform(&mut rng, &[4], 3.0);
        let (_, trace) = cells::dgdpu_step(&m, &v, &p).unwrap();
        lo = lo.min(trace.g_e);
        hi = hi.max(trace.g_e);
        if hi - lo > 0.1 {
            return;
        }
    }
    panic!("g_e stayed within [{lo}, {hi}]");
}

#[test]
fn hand_cases() {
    let z = DgDpuParams::zeros(2);
    let m = Tensor::vector(vec![2.0, 0.0]);
    let v = Tensor::vector(vec![0.0, 0.0]);
    let (next, trace) = cells::dgdpu_step(&m, &v, &z).unwrap();
    assert_eq!(trace.c_tilde.data(), &[1.0, 0.0]);
    assert_eq!(trace.g_e, 0.5);
    assert_eq!(next.data(), &[1.5, 0.0]);

    let (next, _) = cells::ablated_step(Ablation::ConstraintOnly, &m, &Tensor::vector(vec![4.0, -2.0]), &z).unwrap();
    assert_eq!(next.data(), &[3.0, -1.0]);

    let g = GruParams::zeros(1);
    assert_eq!(cells::gru_step(&Tensor::vector(vec![7.0]), &Tensor::vector(vec![2.0]), &g).unwrap().data(), &[1.0]);
    assert_eq!(cells::gru_step(&Tensor::vector(vec![-3.0]), &Tensor::vector(vec![0.0]), &g).unwrap().data(), &[0.0]);
}

#[test]
fn parameter_counts() {
    for d in [1, 2, 4, 8, 32] {
        let mut rng = rng::seeded(d as u64);
        assert_eq!(DgDpuParams::xavier(d, &mut rng).parameter_count(), 3 * d * d + d);
        assert_eq!(GruParams::xavier(d, &mut rng).parameter_count(), 6 * d * d + 3 * d);
    }
}

#[test]
fn dgdpu_parameter_gradients_match_finite_differences_at_width_4() {
    let mut rng = rng::seeded(404);
    let m = rng::uniform(&mut rng, &[4], 1.0);
    let v = rng::uniform(&mut rng, &[4], 1.0);
    let p = DgDpuParams::xavier(4, &mut rng);
    let tensors: Vec<Tensor> = p.named().into_iter().map(|(_, t)| t.clone()).collect();
    let g = grad_check(
        |t, x| {
            let (mc, vc) = (t.constant(m.clone()), t.constant(v.clone()));
            let w = DgDpuVars {
                w_a: x[0],
                w_e1: x[1],
                w_e2: x[2],
            };
            let s = cells::dgdpu_step_on(t, mc, vc, &w)?;
            t.sum(s.v_next)
        },
        &tensors,
        DEFAULT_STEP,
    )
    .unwrap();
    assert_eq!(g.coordinates, 3 * 16 + 4);
    assert!(g.max_rel_error <= 1e-5, "{g:?}");
}

#[test]
fn gru_parameter_gradients_match_finite_differences_at_width_4() {
    let mut rng = rng::seeded(405);
    let m = rng::uniform(&mut rng, &[4], 1.0);
    let v = rng::uniform(&mut rng, &[4], 1.0);
    let p = GruParams::xavier(4, &mut rng);
    let tensors: Vec<Tensor> = p.named().into_iter().map(|(_, t)| t.clone()).collect();
    let g = grad_check(
        |t, x| {
            let (mc, vc) = (t.constant(m.clone()), t.constant(v.clone()));
            let w = GruVars {
                w_z: x[0],
                w_r: x[1],
                w_h: x[2],
                u_z: x[3],
                u_r: x[4],
                u_h: x[5],
                b_z: x[6],
                b_r: x[7],
                b_h: x[8],
            };
            let out = cells::gru_step_on(t, mc, vc, &w)?;
            t.sum(out)
        },
        &tensors,
        DEFAULT_STEP,
    )
    .unwrap();
    assert_eq!(g.coordinates, 6 * 16 + 3 * 4);
    assert!(g.max_rel_error <= 1e-5, "{g:?}");
}

#[test]
fn shape_mismatch_is_rejected() {
    let mut rng = rng::seeded(1);
    let p = DgDpuParams::xavier(3, &mut rng);
    let bad = Tensor::vector((0..4).map(|_| rng.random_range(-1.0..1.0)).collect());
    let ok = Tensor::vector(vec![0.1, 0.2, 0.3]);
    assert!(cells::dgdpu_step(&bad, &ok, &p).is_err());
    assert!(cells::gru_step(&ok, &bad, &GruParams::zeros(3)).is_err());
}

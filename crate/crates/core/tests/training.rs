mod common;

use depthrnn_core::backbone::{BackboneConfig, BackboneWeights};
use depthrnn_core::cells::DgDpuVars;
use depthrnn_core::eval::{self, Label, Split};
use depthrnn_core::numerics::{Dd, OptimizerKind, Tape, Tensor};
use depthrnn_core::recurrence::{BoundCell, CellInit, CellMode, CellVariant};
use depthrnn_core::reference::{self, grad_check_reference, Arr, Backbone, CellRef, REFERENCE_STEP};
use depthrnn_core::rng;
use depthrnn_core::training::{self, LossMask, TrainConfig, TrainError, TrainSequence};

fn small(n_layers: usize, d: usize, max_seq: usize) -> BackboneConfig {
    BackboneConfig {
        n_layers,
        d_model: d,
        n_heads: 2,
        vocab: 12,
        max_seq,
        ff_mult: 2,
    }
}

fn frozen(c: BackboneConfig, seed: u64) -> BackboneWeights {
    let mut w = BackboneWeights::init(c, &mut rng::seeded(seed)).unwrap();
    w.freeze();
    w
}

fn tc(lr: f64, batch: usize, epochs: usize, mask: LossMask) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        batch_size: batch,
        epochs,
        optimizer: OptimizerKind::Adam,
        seed: 9,
        loss_mask: mask,
        max_steps: None,
    }
}

fn seq(tokens: Vec<usize>) -> TrainSequence {
    let answer_start = tokens.len() - 1;
    TrainSequence { tokens, answer_start }
}

fn dgdpu(d: usize, seed: u64) -> CellMode {
    CellMode::init(CellVariant::Dgdpu, d, CellInit::Xavier, &mut rng::seeded(seed))
}

#[test]
fn one_sequence_is_memorized() {
    let init = BackboneWeights::init(small(2, 16, 8), &mut rng::seeded(1)).unwrap();
    let corpus = [seq(vec![3, 1, 4, 1, 5, 9, 2, 6])];
    let (w, steps) = training::pretrain_backbone(init, &corpus, &tc(1e-2, 1, 200, LossMask::AllTokens)).unwrap();
    assert!(w.is_frozen());
    assert_eq!(steps.len(), 200);
    assert!(steps.last().unwrap().loss < 0.01, "{:?}", steps.last());
}

#[test]
fn zero_learning_rate_leaves_weights_byte_identical() {
    let init = BackboneWeights::init(small(2, 8, 6), &mut rng::seeded(2)).unwrap();
    let corpus = [seq(vec![1, 2, 3, 4]), seq(vec![5, 6, 7])];
    let (w, steps) = training::pretrain_backbone(init.clone(), &corpus, &tc(0.0, 1, 3, LossMask::AllTokens)).unwrap();
    assert_eq!(steps.len(), 6);
    assert_eq!(w.to_bytes(), init.to_bytes());

    let bb = frozen(small(2, 8, 6), 3);
    let mode = dgdpu(8, 4);
    let (trained, record) = training::finetune_cell(&bb, mode.clone(), &corpus, &tc(0.0, 2, 4, LossMask::AnswerTokensOnly)).unwrap();
    assert_eq!(record.steps.len(), 4);
    assert_eq!(trained.to_bytes(), mode.to_bytes());
}

#[test]
fn zero_epochs_leave_the_cell_unchanged() {
    let bb = frozen(small(2, 8, 6), 5);
    let mode = CellMode::init(CellVariant::Gru, 8, CellInit::Xavier, &mut rng::seeded(6));
    let (trained, record) =
        training::finetune_cell(&bb, mode.clone(), &[seq(vec![1, 2, 3])], &tc(1e-3, 1, 0, LossMask::AllTokens)).unwrap();
    assert!(record.steps.is_empty());
    assert_eq!(trained.to_bytes(), mode.to_bytes());
}

#[test]
fn biased_pretraining_says_yes_to_popular_negatives() {
    let b = common::biased();
    let out = eval::run_eval(&eval::VanillaModel { backbone: &b.backbone }, &b.data.eval).unwrap();
    let acc = |keep: &dyn Fn(Split, Label) -> bool| {
        let hits: Vec<bool> = out
            .predictions
            .iter()
            .filter(|p| keep(p.split, p.label))
            .map(|p| p.answer == Some(p.label))
            .collect();
        hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64
    };
    let popular_negatives = acc(&|s, l| s == Split::Popular && l == Label::No);
    let positives = acc(&|_, l| l == Label::Yes);
    assert!(
        popular_negatives < positives,
        "popular negatives {popular_negatives} vs positives {positives}"
    );
}

/// Exponential moving average with span 20.
fn ema(xs: &[f64]) -> Vec<f64> {
    let a = 2.0 / 21.0;
    let mut out = Vec::with_capacity(xs.len());
    let mut e = xs[0];
    for &x in xs {
        e = a * x + (1.0 - a) * e;
        out.push(e);
    }
    out
}

#[test]
fn single_example_loss_trends_down() {
    let bb = frozen(small(3, 8, 8), 7);
    let data = [seq(vec![0, 4, 9, 2, 1, 11, 3, 5])];
    let (_, record) = training::finetune_cell(&bb, dgdpu(8, 8), &data, &tc(1e-2, 1, 100, LossMask::AnswerTokensOnly)).unwrap();
    let losses: Vec<f64> = record.steps.iter().map(|s| s.loss).collect();
    let smooth = ema(&losses);
    for (i, w) in smooth.windows(2).enumerate() {
        assert!(w[1] < w[0], "EMA rose at step {}: {} -> {}", i + 1, w[0], w[1]);
    }
    assert!(losses[99] < losses[0]);
}

#[test]
fn step_zero_cell_gradient_matches_finite_differences() {
    // N = 3, width 4, six input positions
    let c = small(3, 4, 6);
    let mut rng = rng::seeded(10);
    for _ in 0..5 {
        let bb = BackboneWeights::init(c, &mut rng).unwrap();
        let mode = CellMode::init(CellVariant::Dgdpu, 4, CellInit::Xavier, &mut rng);
        let tokens: Vec<usize> = (0..7).map(|_| rand::Rng::random_range(&mut rng, 0..12)).collect();
        let s = seq(tokens);
        let params: Vec<Tensor> = mode.named().into_iter().map(|(_, t)| t.clone()).collect();
        let bb_ref: Vec<Arr<Dd>> = bb.tensors().into_iter().map(Arr::from_tensor).collect();
        let targets = s.targets(LossMask::AnswerTokensOnly);
        let g = grad_check_reference(
            |t, x| {
                let bv = bb.bind(t);
                let cell = BoundCell::Dgdpu(DgDpuVars {
                    w_a: x[0],
                    w_e1: x[1],
                    w_e2: x[2],
                });
                training::recurrent_loss_on(t, &bv, &[cell], &s, LossMask::AnswerTokensOnly)
                    .map_err(|e| depthrnn_core::numerics::NumericsError::Contract(e.to_string()))
            },
            |x| {
                let b = Backbone {
                    config: c,
                    params: &bb_ref,
                };
                reference::cross_entropy(&reference::recurrent_logits(&b, &[CellRef::Dgdpu(x)], s.inputs()), &targets)
            },
            &params,
            REFERENCE_STEP,
        )
        .unwrap();
        assert_eq!(g.coordinates, 3 * 16 + 4);
        assert!(g.max_rel_error <= 1e-5, "{g:?}");
    }
}

#[test]
fn finetuning_is_deterministic_and_keeps_the_backbone() {
    let bb = frozen(small(2, 8, 8), 11);
    let before = bb.to_bytes();
    let data: Vec<TrainSequence> = (0..12).map(|i| seq(vec![i % 12, (i + 3) % 12, 7, (i * 5) % 12])).collect();
    let cfg = tc(1e-2, 4, 3, LossMask::AnswerTokensOnly);
    let (a, ra) = training::finetune_cell(&bb, dgdpu(8, 12), &data, &cfg).unwrap();
    let (b, rb) = training::finetune_cell(&bb, dgdpu(8, 12), &data, &cfg).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(ra.steps, rb.steps);
    assert_ne!(a, dgdpu(8, 12));
    assert_eq!(ra.backbone_sha_before, ra.backbone_sha_after);
    assert_eq!(ra.backbone_sha_after, bb.sha256());
    assert_eq!(bb.to_bytes(), before);
    assert_eq!(a.parameter_count(), 3 * 64 + 8);
}

#[test]
fn answer_only_mask_ignores_earlier_labels() {
    let s = seq(vec![2, 7, 1, 8, 2, 8]);
    let all = s.targets(LossMask::AllTokens);
    let answer = s.targets(LossMask::AnswerTokensOnly);
    assert_eq!(all.len(), 5);
    assert_eq!(answer[..4], [None; 4]);
    assert_eq!(answer[4], all[4]);

    // the gradient of the masked loss equals the gradient of CE on the answer row alone,
    // whatever labels the earlier rows carry
    let bb = frozen(small(2, 4, 6), 13);
    let mode = dgdpu(4, 14);
    let grad = |targets: &[Option<usize>], masked: Option<LossMask>| -> Vec<f64> {
        let mut tape = Tape::new();
        let bv = bb.bind(&mut tape);
        let cell = mode.bind(&mut tape);
        let loss = match masked {
            Some(mask) => training::recurrent_loss_on(&mut tape, &bv, &[cell], &s, mask).unwrap(),
            None => {
                let fwd = depthrnn_core::recurrence::depth_forward_on(&mut tape, &bv, &[cell], s.inputs()).unwrap();
                tape.softmax_cross_entropy(fwd.logits, targets).unwrap()
            }
        };
        let g = tape.backward(loss).unwrap();
        cell.params().iter().flat_map(|&p| g.get(p).unwrap().to_vec()).collect()
    };
    let masked = grad(&[], Some(LossMask::AnswerTokensOnly));
    assert_eq!(masked, grad(&answer, None));
    let mut relabeled = all.clone();
    for (j, t) in relabeled.iter_mut().enumerate().take(4) {
        *t = Some((j * 5 + 3) % 12);
    }
    assert_ne!(grad(&relabeled, None), masked);
    assert_ne!(grad(&[], Some(LossMask::AllTokens)), masked);
}

#[test]
fn contract_errors() {
    let data = [seq(vec![1, 2, 3])];
    let cfg = tc(1e-3, 1, 1, LossMask::AllTokens);
    let mut bb = BackboneWeights::init(small(2, 8, 6), &mut rng::seeded(15)).unwrap();
    assert!(matches!(
        training::finetune_cell(&bb, dgdpu(8, 16), &data, &cfg),
        Err(TrainError::NotFrozen)
    ));
    bb.freeze();
    assert!(matches!(
        training::finetune_cell(&bb, CellMode::ForcedVanilla, &data, &cfg),
        Err(TrainError::NotTrainable(_))
    ));
    assert!(training::finetune_cell(&bb, dgdpu(4, 16), &data, &cfg).is_err());
    assert!(matches!(
        training::finetune_cell(&bb, dgdpu(8, 16), &data, &TrainConfig { batch_size: 0, ..cfg }),
        Err(TrainError::Config(_))
    ));

    // a frozen backbone cannot hold a gradient, so the buffer check starts clean
    let mut live = BackboneWeights::init(small(2, 8, 6), &mut rng::seeded(16)).unwrap();
    live.tensors_mut()[4].accumulate_grad(&[1e-3; 64]).unwrap();
    assert!(live.named().iter().any(|(_, t)| t.grad().is_some()));
    live.freeze();
    assert!(live.named().iter().all(|(_, t)| t.grad().is_none()));
    live.tensors_mut()[4].accumulate_grad(&[1e-3; 64]).unwrap();
    assert!(live.named().iter().all(|(_, t)| t.grad().is_none()));
    assert!(training::finetune_cell(&live, dgdpu(8, 16), &data, &cfg).is_ok());
}

#[test]
fn step_csv_has_one_row_per_step() {
    let bb = frozen(small(2, 8, 6), 17);
    let data = [seq(vec![1, 2, 3]), seq(vec![4, 5, 6])];
    let (_, record) = training::finetune_cell(&bb, dgdpu(8, 18), &data, &tc(1e-3, 1, 2, LossMask::AllTokens)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("steps.csv");
    record.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,epoch,loss,grad_norm");
    assert_eq!(lines.len(), 5);
    assert!(record.steps.iter().all(|s| s.loss.is_finite() && s.grad_norm >= 0.0));
}

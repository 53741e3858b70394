use depthrnn_core::backbone::{self, BackboneConfig, BackboneWeights};
use depthrnn_core::numerics::{Tensor, LAYER_NORM_EPS};
use depthrnn_core::rng::{self, Rng};
use depthrnn_core::training::{self, LossMask, TrainConfig, TrainSequence};
use depthrnn_core::numerics::OptimizerKind;
use rand::Rng as _;

fn cfg(n_layers: usize, d: usize, heads: usize) -> BackboneConfig {
    BackboneConfig {
        n_layers,
        d_model: d,
        n_heads: heads,
        vocab: 13,
        max_seq: 8,
        ff_mult: 2,
    }
}

/// Random weights everywhere, including the norm gains and offsets.
fn random_weights(c: BackboneConfig, rng: &mut Rng) -> BackboneWeights {
    let mut w = BackboneWeights::init(c, rng).unwrap();
    for t in w.tensors_mut() {
        for x in t.data_mut() {
            *x = rng.random_range(-1.0..1.0);
        }
    }
    w
}

// ---- standalone oracle: plain nested Vecs, no tape ----

type M = Vec<Vec<f64>>;

fn to_m(t: &Tensor) -> M {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn mm(a: &M, b: &Tensor) -> M {
    let b = to_m(b);
    a.iter()
        .map(|row| (0..b[0].len()).map(|j| row.iter().zip(&b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

fn norm(a: &M, g: &Tensor, b: &Tensor) -> M {
    a.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, x)| (x - mu) / (var + LAYER_NORM_EPS).sqrt() * g.data()[j] + b.data()[j])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn block_oracle(h: &M, w: &BackboneWeights, i: usize) -> M {
    let l = &w.layers[i];
    let c = w.config;
    let x = norm(h, &l.ln1_gain, &l.ln1_bias);
    let (q, k, v) = (mm(&x, &l.w_q), mm(&x, &l.w_k), mm(&x, &l.w_v));
    let dh = c.head_dim();
    let seq = h.len();
    let mut joined = vec![vec![0.0; c.d_model]; seq];
    for head in 0..c.n_heads {
        let cols = head * dh..(head + 1) * dh;
        for t in 0..seq {
            let scores: Vec<f64> = (0..=t)
                .map(|s| cols.clone().map(|j| q[t][j] * k[s][j]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
            for (s, sc) in scores.iter().enumerate() {
                let p = (sc - mx).exp() / z;
                for j in cols.clone() {
                    joined[t][j] += p * v[s][j];
                }
            }
        }
    }
    let attn = mm(&joined, &l.w_o);
    let mid: M = h.iter().zip(&attn).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect();
    let y = norm(&mid, &l.ln2_gain, &l.ln2_bias);
    let hidden: M = mm(&y, &l.w_ff1).into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
    let mlp = mm(&hidden, &l.w_ff2);
    mid.iter().zip(&mlp).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
}

#[test]
fn block_matches_standalone_oracle() {
    let mut rng = rng::seeded(31);
    for _ in 0..10 {
        let w = random_weights(cfg(2, 4, 2), &mut rng);
        let h = rng::uniform(&mut rng, &[3, 4], 1.5);
        for i in 0..2 {
            let m = backbone::layer_forward(i, &h, &w).unwrap();
            let oracle = block_oracle(&to_m(&h), &w, i);
            for t in 0..3 {
                for j in 0..4 {
                    let got = h.row(t)[j] + m.row(t)[j];
                    assert!((got - oracle[t][j]).abs() <= 1e-10, "{got} vs {}", oracle[t][j]);
                }
            }
        }
    }
}

#[test]
fn head_argmax_matches_dot_product_oracle() {
    let mut rng = rng::seeded(32);
    for _ in 0..20 {
        let w = random_weights(cfg(1, 6, 2), &mut rng);
        let h = rng::uniform(&mut rng, &[6], 2.0);
        let logits = backbone::predict_head(&h, &w).unwrap();
        let x = norm(&vec![h.data().to_vec()], &w.lnf_gain, &w.lnf_bias).remove(0);
        let oracle: Vec<f64> = (0..13)
            .map(|v| (0..6).map(|j| x[j] * w.head.data()[j * 13 + v]).sum())
            .collect();
        assert_eq!(backbone::argmax(logits.data()), backbone::argmax(&oracle));
        for (a, b) in logits.data().iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-10);
        }
    }
}

#[test]
fn embedding_cases() {
    let mut rng = rng::seeded(33);
    let w = random_weights(cfg(1, 4, 1), &mut rng);
    let e = backbone::embed(&[5], &w).unwrap();
    let expect: Vec<f64> = (0..4).map(|j| w.tok_emb.row(5)[j] + w.pos_emb.row(0)[j]).collect();
    assert_eq!(e.row(0), expect.as_slice());

    let a = backbone::embed(&[2, 7], &w).unwrap();
    let b = backbone::embed(&[7, 2], &w).unwrap();
    for j in 0..4 {
        assert_eq!(a.row(0)[j] - w.pos_emb.row(0)[j], b.row(1)[j] - w.pos_emb.row(1)[j]);
    }
    assert!(backbone::embed(&[13], &w).is_err());
    assert!(backbone::embed(&[0; 9], &w).is_err());
}

#[test]
fn residual_stream_telescopes() {
    let mut rng = rng::seeded(34);
    let w = random_weights(cfg(4, 8, 2), &mut rng);
    let toks = [1, 9, 4, 4, 12, 0];
    let (_, stack) = backbone::vanilla_forward(&toks, &w).unwrap();
    assert_eq!(stack.h.len(), 5);
    let mut sum = Tensor::zeros(&[6, 8]);
    for i in 0..4 {
        let m = backbone::layer_forward(i, &stack.h[i], &w).unwrap();
        for (s, x) in sum.data_mut().iter_mut().zip(m.data()) {
            *s += x;
        }
    }
    for k in 0..48 {
        let diff = stack.h[4].data()[k] - stack.h[0].data()[k];
        assert!((diff - sum.data()[k]).abs() <= 1e-10);
    }
}

#[test]
fn logits_are_causal() {
    let mut rng = rng::seeded(35);
    let w = random_weights(cfg(3, 8, 4), &mut rng);
    for _ in 0..20 {
        let toks: Vec<usize> = (0..7).map(|_| rng.random_range(0..13)).collect();
        let cut = rng.random_range(0..6);
        let mut other = toks.clone();
        for t in other.iter_mut().skip(cut + 1) {
            *t = (*t + 1 + rng.random_range(0..12)) % 13;
        }
        let (a, _) = backbone::vanilla_forward(&toks, &w).unwrap();
        let (b, _) = backbone::vanilla_forward(&other, &w).unwrap();
        for t in 0..=cut {
            assert_eq!(a.row(t), b.row(t));
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let w1 = random_weights(cfg(2, 8, 2), &mut rng::seeded(36));
    let w2 = random_weights(cfg(2, 8, 2), &mut rng::seeded(36));
    let toks = [3, 1, 4, 1, 5];
    assert_eq!(backbone::vanilla_forward(&toks, &w1).unwrap(), backbone::vanilla_forward(&toks, &w2).unwrap());
}

#[test]
fn zero_head_gives_uniform_softmax_and_head_is_linear() {
    let mut rng = rng::seeded(37);
    let mut w = random_weights(cfg(1, 4, 2), &mut rng);
    let h = rng::uniform(&mut rng, &[4], 1.0);
    let base = backbone::predict_head(&h, &w).unwrap();
    for x in w.head.data_mut() {
        *x *= -2.5;
    }
    let scaled = backbone::predict_head(&h, &w).unwrap();
    for (a, b) in base.data().iter().zip(scaled.data()) {
        assert!((a * -2.5 - b).abs() <= 1e-12);
    }
    w.head.data_mut().iter_mut().for_each(|x| *x = 0.0);
    let p = backbone::softmax(backbone::predict_head(&h, &w).unwrap().data());
    assert!(p.iter().all(|&x| (x - 1.0 / 13.0).abs() < 1e-15));
}

#[test]
fn memorized_sequences_are_recalled_greedily() {
    // ten sequences whose first two tokens identify the rest
    let mut rng = rng::seeded(38);
    let mut corpus = Vec::new();
    for i in 0..10 {
        let mut tokens = vec![i, 10 + i % 3];
        tokens.extend((0..3).map(|_| rng.random_range(0..13)));
        corpus.push(TrainSequence {
            tokens,
            answer_start: 1,
        });
    }
    let c = cfg(2, 16, 2);
    let init = BackboneWeights::init(c, &mut rng::seeded(39)).unwrap();
    let tc = TrainConfig {
        learning_rate: 1e-2,
        batch_size: 10,
        epochs: 300,
        optimizer: OptimizerKind::Adam,
        seed: 1,
        loss_mask: LossMask::AllTokens,
        max_steps: None,
    };
    let (w, steps) = training::pretrain_backbone(init, &corpus, &tc).unwrap();
    assert!(w.is_frozen());
    assert!(steps.last().unwrap().loss < 0.01);
    for s in &corpus {
        let out = backbone::greedy_continue(&s.tokens[..2], 3, &w).unwrap();
        assert_eq!(out, s.tokens);
    }
}

mod common;

use maskdiff::diffusion::{semi_ar_mask, TokenSeq};
use maskdiff::losses::{certainty_loss, consistency_loss, correct_set};
use maskdiff::model::{init_model, load_checkpoint, save_checkpoint, Adam, AdamConfig, LogitMatrix, ModelConfig};
use maskdiff::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(layers: usize, rank: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        max_len: 16,
        num_layers: layers,
        num_heads: 2,
        hidden_dim: 8,
        ffn_dim: 12,
        adapter_rank: rank,
        seed,
    }
}

fn random_tokens(rng: &mut ChaCha8Rng, len: usize, vocab: u32) -> Vec<u32> {
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

#[test]
fn init_is_deterministic_and_validates() {
    let cfg = tiny(2, 0, 3);
    let a = init_model::<f32>(&cfg).unwrap();
    let b = init_model::<f32>(&cfg).unwrap();
    assert_eq!(a, b);
    let bad = ModelConfig {
        hidden_dim: 65,
        num_heads: 8,
        ..cfg.clone()
    };
    match init_model::<f32>(&bad) {
        Err(Error::Config { field, .. }) => assert_eq!(field, "hidden_dim"),
        other => panic!("expected config error, got {other:?}"),
    }
    assert!(init_model::<f32>(&ModelConfig { vocab_size: 2, ..cfg }).is_err());
}

#[test]
fn zero_layer_model_ignores_position() {
    let p = init_model::<f32>(&tiny(0, 0, 1)).unwrap();
    for k in 0..11 {
        let logits = p.forward(&[k; 9]).unwrap();
        for i in 1..9 {
            assert_eq!(logits.row(i), logits.row(0));
        }
    }
}

#[test]
fn forward_shape_determinism_and_errors() {
    let p = init_model::<f32>(&tiny(2, 0, 1)).unwrap();
    let masks = vec![maskdiff::tasks::MASK_ID; 16];
    let l = p.forward(&masks).unwrap();
    assert_eq!((l.rows, l.vocab), (16, 11));
    assert!(l.is_finite());
    assert_eq!(p.forward(&masks).unwrap(), l);
    match p.forward(&[1, 2, 11, 3]) {
        Err(Error::Input { position, .. }) => assert_eq!(position, 2),
        other => panic!("{other:?}"),
    }
    assert!(p.forward(&[1; 17]).is_err());
}

#[test]
fn batched_forward_matches_single() {
    let p = init_model::<f32>(&tiny(2, 0, 4)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let toks = random_tokens(&mut rng, 30, 11);
    let batch = p.forward_batch(&toks, 3).unwrap();
    for b in 0..3 {
        let single = p.forward(&toks[b * 10..(b + 1) * 10]).unwrap();
        for i in 0..10 {
            for (x, y) in single.row(i).iter().zip(batch.row(b * 10 + i)) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn attention_is_bidirectional() {
    let p = init_model::<f64>(&tiny(2, 0, 7)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let toks = random_tokens(&mut rng, 12, 11);
    let base = p.forward(&toks).unwrap();
    let mut changed = toks.clone();
    changed[11] = (changed[11] + 1) % 11;
    let after = p.forward(&changed).unwrap();
    assert_ne!(base.row(0), after.row(0));
}

#[test]
fn embedding_gradient_matches_finite_differences() {
    let cfg = tiny(2, 0, 9);
    let p = init_model::<f64>(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let toks = random_tokens(&mut rng, 10, 11);
    let weights: Vec<f64> = (0..10 * 11).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = |q: &maskdiff::model::ModelParams<f64>| -> f64 {
        q.forward(&toks).unwrap().data.iter().zip(&weights).map(|(a, b)| a * b).sum()
    };
    let rec = p.forward_recorded(&toks, 1).unwrap();
    let grads = p.backward(&rec, &LogitMatrix::new(10, 11, weights.clone())).unwrap();
    let analytic = &grads.token_embedding.data;
    let h = cfg.hidden_dim;
    let mut worst = 0.0f64;
    for &tok in toks.iter().take(4) {
        for c in 0..h {
            let idx = tok as usize * h + c;
            let eval = |d: f64| {
                let mut q = p.clone();
                q.weights.token_embedding.data[idx] += d;
                loss(&q)
            };
            let numeric = (eval(common::FD_STEP) - eval(-common::FD_STEP)) / (2.0 * common::FD_STEP);
            worst = worst.max(common::rel_err(analytic[idx], numeric));
        }
    }
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn every_tensor_gradient_matches_for_distillation_losses() {
    for (rank, seed) in [(0, 11u64), (3, 12)] {
        let cfg = tiny(2, rank, seed);
        let mut p = init_model::<f64>(&cfg).unwrap();
        if rank > 0 {
            // make the adapter path non-trivial
            for t in p.weights.tensors_mut().into_iter().filter(|t| t.is_adapter) {
                for (i, x) in t.tensor.data.iter_mut().enumerate() {
                    *x += 0.05 * ((i as f64) * 0.7).sin();
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut toks = random_tokens(&mut rng, 12, 11);
        toks.iter_mut().for_each(|t| {
            if *t == maskdiff::tasks::MASK_ID {
                *t = 5
            }
        });
        let y = TokenSeq::new(toks, 4).unwrap();
        let state = semi_ar_mask(&y, 0, 0.6, 4, &mut rng).unwrap();
        let active: Vec<usize> = if state.active_mask().is_empty() { vec![4, 5] } else { state.active_mask().to_vec() };
        let logits = p.forward(&state.tokens).unwrap();
        // hold the correct set fixed: membership carries no gradient
        let mut correct = correct_set(&logits, &y, &active);
        if correct.is_empty() {
            correct = active.clone();
        }
        let objective = |l: &LogitMatrix<f64>| {
            consistency_loss(l, &y, &active).unwrap().value + 2.0 * certainty_loss(l, &correct, 0.5).unwrap().value
        };
        let rec = p.forward_recorded(&state.tokens, 1).unwrap();
        let mut dl = consistency_loss(&rec.logits, &y, &active).unwrap().grad;
        let cert = certainty_loss(&rec.logits, &correct, 0.5).unwrap().grad;
        dl.data.iter_mut().zip(&cert.data).for_each(|(a, b)| *a += 2.0 * b);
        let grads = p.backward(&rec, &dl).unwrap();
        let (worst, at) = common::check_param_grad(&p, &grads, 5, |q| objective(&q.forward(&state.tokens).unwrap()));
        assert!(worst < 1e-3, "rank {rank}: worst relative error {worst} at {at}");
    }
}

#[test]
fn learning_rate_zero_leaves_params_unchanged() {
    let mut p = init_model::<f32>(&tiny(2, 0, 5)).unwrap();
    let before = p.clone();
    let mut opt = Adam::new(AdamConfig::default());
    let toks = vec![3u32; 8];
    let rec = p.forward_recorded(&toks, 1).unwrap();
    let g = LogitMatrix::new(8, 11, vec![1.0; 88]);
    p.backward_and_step(rec, &g, &mut opt, 0.0).unwrap();
    assert_eq!(p, before);
}

#[test]
fn adapters_freeze_base_weights() {
    let mut p = init_model::<f32>(&tiny(2, 0, 5)).unwrap();
    p.attach_adapters(4, 99).unwrap();
    let before = p.clone();
    let mut opt = Adam::new(AdamConfig::default());
    let toks = vec![3u32, 4, 5, 6, 7, 8, 9, 10];
    for _ in 0..3 {
        let rec = p.forward_recorded(&toks, 1).unwrap();
        let g = LogitMatrix::new(8, 11, vec![1.0; 88]);
        p.backward_and_step(rec, &g, &mut opt, 1e-2).unwrap();
    }
    let changed: Vec<(String, bool)> = p
        .weights
        .tensors()
        .iter()
        .zip(before.weights.tensors())
        .map(|(a, b)| (a.name.clone(), a.tensor != b.tensor))
        .collect();
    for (name, did_change) in changed {
        let adapter = name.contains("adapter");
        assert_eq!(did_change, adapter, "{name}");
    }
}

#[test]
fn stale_recording_is_rejected() {
    let mut p = init_model::<f32>(&tiny(1, 0, 5)).unwrap();
    let mut opt = Adam::new(AdamConfig::default());
    let toks = vec![3u32; 6];
    let old = p.forward_recorded(&toks, 1).unwrap();
    let fresh = p.forward_recorded(&toks, 1).unwrap();
    let g = LogitMatrix::new(6, 11, vec![0.5; 66]);
    p.backward_and_step(fresh, &g, &mut opt, 1e-3).unwrap();
    assert!(matches!(p.backward_and_step(old, &g, &mut opt, 1e-3), Err(Error::Usage(_))));
}

#[test]
fn memorizes_sixteen_samples() {
    let cfg = ModelConfig {
        vocab_size: 11,
        max_len: 12,
        num_layers: 2,
        num_heads: 2,
        hidden_dim: 64,
        ffn_dim: 128,
        adapter_rank: 0,
        seed: 3,
    };
    let mut p = init_model::<f32>(&cfg).unwrap();
    let mut opt = Adam::new(AdamConfig { max_grad_norm: None, ..AdamConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // 16 samples, positions 0..3 are a key, 4..12 the target
    let samples: Vec<Vec<u32>> = (0..16)
        .map(|_| (0..12).map(|_| rng.random_range(2..11)).collect())
        .collect();
    let mut inputs = Vec::new();
    for s in &samples {
        let mut x = s.clone();
        x[4..].iter_mut().for_each(|t| *t = maskdiff::tasks::MASK_ID);
        inputs.extend(x);
    }
    let active: Vec<usize> = (4..12).collect();
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..100 {
        let rec = p.forward_recorded(&inputs, 16).unwrap();
        let mut dl = LogitMatrix::zeros(rec.logits.rows, 11);
        let mut total = 0.0;
        for (b, s) in samples.iter().enumerate() {
            let rows = LogitMatrix::new(12, 11, rec.logits.data[b * 132..(b + 1) * 132].to_vec());
            let y = TokenSeq::new(s.clone(), 4).unwrap();
            let sc = consistency_loss(&rows, &y, &active).unwrap();
            total += sc.value / 16.0;
            for (d, g) in dl.data[b * 132..(b + 1) * 132].iter_mut().zip(&sc.grad.data) {
                *d = g / 16.0;
            }
        }
        first.get_or_insert(total);
        last = total;
        p.backward_and_step(rec, &dl, &mut opt, 3e-3).unwrap();
    }
    assert!(last < first.unwrap());
    assert!(last < 0.01, "masked CE after 100 steps: {last}");
}

#[test]
fn checkpoint_round_trip_and_config_check() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut p = init_model::<f32>(&tiny(2, 0, 8)).unwrap();
    p.attach_adapters(2, 1).unwrap();
    p.weights.blocks[0].query.adapter.as_mut().unwrap().up.data[0] = 0.25;
    save_checkpoint(&p, &path).unwrap();
    let q = load_checkpoint(&path, Some(&p.config)).unwrap();
    assert_eq!(p, q);
    assert!(matches!(load_checkpoint(&path, Some(&tiny(2, 0, 8))), Err(Error::Checkpoint(_))));
    std::fs::write(&path, b"garbage").unwrap();
    assert!(load_checkpoint(&path, None).is_err());
}

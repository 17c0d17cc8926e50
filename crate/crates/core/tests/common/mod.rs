//! Independent finite-difference oracle shared by the test targets.
#![allow(dead_code)]

use maskdiff::model::{LogitMatrix, ModelParams, Weights};

pub const FD_STEP: f64 = 1e-4;

/// |a - n| / max(|a|, |n|, floor)
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

/// Central differences of `f` with respect to each entry of `x`.
pub fn fd_vector(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + FD_STEP;
            let up = f(&work);
            work[i] = x[i] - FD_STEP;
            let down = f(&work);
            work[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Largest relative error between analytic logit gradients and central
/// differences of `loss` over every logit entry.
pub fn check_logit_grad(
    logits: &LogitMatrix<f64>,
    analytic: &LogitMatrix<f64>,
    loss: impl Fn(&LogitMatrix<f64>) -> f64,
) -> f64 {
    let numeric = fd_vector(&logits.data, |d| loss(&LogitMatrix::new(logits.rows, logits.vocab, d.to_vec())));
    analytic
        .data
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Checks up to `per_tensor` entries of every trainable tensor. Returns the
/// worst relative error and the name of the tensor it occurred in.
pub fn check_param_grad(
    params: &ModelParams<f64>,
    grads: &Weights<f64>,
    per_tensor: usize,
    loss: impl Fn(&ModelParams<f64>) -> f64,
) -> (f64, String) {
    let mut worst = (0.0, String::new());
    let names: Vec<(String, bool, usize)> = params
        .weights
        .tensors()
        .iter()
        .map(|t| (t.name.clone(), t.is_adapter, t.tensor.data.len()))
        .collect();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.tensor.data.clone()).collect();
    for (ti, (name, is_adapter, len)) in names.iter().enumerate() {
        if !params.is_trainable(*is_adapter) {
            continue;
        }
        let stride = (len / per_tensor).max(1);
        for idx in (0..*len).step_by(stride).take(per_tensor) {
            let eval = |delta: f64| {
                let mut p = params.clone();
                p.weights.tensors_mut()[ti].tensor.data[idx] += delta;
                loss(&p)
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            let err = rel_err(analytic[ti][idx], numeric);
            if err > worst.0 {
                worst = (err, format!("{name}[{idx}] analytic={} numeric={numeric}", analytic[ti][idx]));
            }
        }
    }
    worst
}

pub mod suites {
    //! Whole-criterion checks shared by the property tests and the acceptance run.

    use super::check_logit_grad;
    use maskdiff::diffusion::{forward_mask, semi_ar_mask, semi_ar_mask_with_pattern, MaskLevel, MaskedState, TokenSeq};
    use maskdiff::losses::{certainty_loss, cfd_loss, consistency_loss, correct_set, pretrain_loss};
    use maskdiff::model::LogitMatrix;
    use maskdiff::tasks::MASK_ID;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub struct GradInstance {
        pub logits: LogitMatrix<f64>,
        pub y: TokenSeq,
        pub state: MaskedState,
        pub t: MaskLevel,
        pub temperature: f64,
        pub beta: f64,
    }

    /// Random tiny instance: V in 4..=11, L in 4..=16, logits of mixed scale.
    /// One instance in four plants the trajectory token as argmax on some
    /// active rows so the certainty term is exercised.
    pub fn random_instance(rng: &mut ChaCha8Rng) -> GradInstance {
        let vocab = rng.random_range(4..=11usize);
        let block_len = rng.random_range(1..=4usize);
        let blocks = rng.random_range(1..=3usize);
        let response = block_len * blocks;
        let prompt = rng.random_range(1..=(16 - response).clamp(1, 4));
        let len = prompt + response;
        let tokens: Vec<u32> = (0..len)
            .map(|_| loop {
                let t = rng.random_range(0..vocab as u32);
                if t != MASK_ID {
                    break t;
                }
            })
            .collect();
        let y = TokenSeq::new(tokens, prompt).unwrap();
        let n = rng.random_range(0..blocks);
        let mut pattern: Vec<bool> = (0..block_len).map(|_| rng.random::<bool>()).collect();
        pattern[rng.random_range(0..block_len)] = true;
        let state = semi_ar_mask_with_pattern(&y, n, block_len, &pattern).unwrap();
        let scale = [0.5, 2.0, 4.0][rng.random_range(0..3)];
        let mut data: Vec<f64> = (0..len * vocab).map(|_| rng.random_range(-scale..scale)).collect();
        for &i in state.active_mask() {
            if rng.random::<f64>() < 0.6 {
                data[i * vocab + y.tokens[i] as usize] += 2.0 * scale;
            }
        }
        GradInstance {
            logits: LogitMatrix::new(len, vocab, data),
            y,
            state,
            t: MaskLevel::new(rng.random_range(0.05..=1.0)).unwrap(),
            temperature: [0.5, 1.0, 2.0][rng.random_range(0..3)],
            beta: rng.random_range(0.0..3.0),
        }
    }

    /// Worst relative error of each loss over `count` random instances:
    /// `[pretrain, consistency, certainty, cfd]`.
    ///
    /// The correct set is a discrete selection with no gradient, so the
    /// certainty and combined checks hold it fixed at the unperturbed logits.
    pub fn gradient_suite(count: usize, seed: u64) -> [f64; 4] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = [0.0f64; 4];
        for _ in 0..count {
            let g = random_instance(&mut rng);
            let x0 = &g.y;
            let masked = &g.state;
            let p = pretrain_loss(&g.logits, x0, masked, g.t).unwrap();
            worst[0] = worst[0].max(check_logit_grad(&g.logits, &p.grad, |l| {
                pretrain_loss(l, x0, masked, g.t).unwrap().value
            }));
            let active = g.state.active_mask();
            let c = consistency_loss(&g.logits, &g.y, active).unwrap();
            worst[1] = worst[1].max(check_logit_grad(&g.logits, &c.grad, |l| {
                consistency_loss(l, &g.y, active).unwrap().value
            }));
            let correct = correct_set(&g.logits, &g.y, active);
            let h = certainty_loss(&g.logits, &correct, g.temperature).unwrap();
            worst[2] = worst[2].max(check_logit_grad(&g.logits, &h.grad, |l| {
                certainty_loss(l, &correct, g.temperature).unwrap().value
            }));
            let (_, grad) = cfd_loss(&g.logits, &g.y, active, g.temperature, g.beta).unwrap();
            worst[3] = worst[3].max(check_logit_grad(&g.logits, &grad, |l| {
                consistency_loss(l, &g.y, active).unwrap().value
                    + g.beta * certainty_loss(l, &correct, g.temperature).unwrap().value
            }));
        }
        worst
    }

    /// Exhaustive structural check of semi-autoregressive masking over every
    /// block index and active pattern for a response of `blocks * block_len`.
    /// Returns the number of states checked, or a description of the first
    /// violation.
    pub fn semi_ar_exhaustive(prompt_len: usize, block_len: usize, blocks: usize) -> Result<usize, String> {
        let response = block_len * blocks;
        let tokens: Vec<u32> = (0..prompt_len + response).map(|i| 3 + (i % 7) as u32).collect();
        let y = TokenSeq::new(tokens, prompt_len).unwrap();
        let mut checked = 0;
        for n in 0..blocks {
            for bits in 0..(1u32 << block_len) {
                let pattern: Vec<bool> = (0..block_len).map(|j| bits >> j & 1 == 1).collect();
                let s = semi_ar_mask_with_pattern(&y, n, block_len, &pattern).map_err(|e| e.to_string())?;
                let start = prompt_len + n * block_len;
                for (i, &tok) in s.tokens.iter().enumerate() {
                    let expect_mask = if i < start {
                        false
                    } else if i < start + block_len {
                        pattern[i - start]
                    } else {
                        true
                    };
                    if (tok == MASK_ID) != expect_mask {
                        return Err(format!("n={n} pattern={bits:04b} position {i}"));
                    }
                    if !expect_mask && tok != y.tokens[i] {
                        return Err(format!("n={n} pattern={bits:04b} clean token changed at {i}"));
                    }
                }
                let active: Vec<usize> = (0..block_len).filter(|&j| pattern[j]).map(|j| start + j).collect();
                if s.active_mask() != active.as_slice() {
                    return Err(format!("n={n} pattern={bits:04b} active set {:?}", s.active_mask()));
                }
                let complement = maskdiff::diffusion::complementary_mask(&s, &y).map_err(|e| e.to_string())?;
                let back = maskdiff::diffusion::complementary_mask(&complement, &y).map_err(|e| e.to_string())?;
                if back != s {
                    return Err(format!("n={n} pattern={bits:04b} complement is not an involution"));
                }
                checked += 1;
            }
        }
        Ok(checked)
    }

    /// Largest deviation, in standard errors, of the per-position and total
    /// masked counts of `forward_mask` from their binomial expectations.
    pub fn forward_mask_sigma(response_len: usize, t: f64, trials: usize, seed: u64) -> f64 {
        let prompt = 3;
        let y = TokenSeq::new((0..prompt + response_len).map(|i| 3 + (i % 5) as u32).collect(), prompt).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut per_position = vec![0usize; response_len];
        let mut total = 0usize;
        for _ in 0..trials {
            let s = forward_mask(&y, MaskLevel::new(t).unwrap(), &mut rng);
            assert!(s.tokens[..prompt].iter().all(|&x| x != MASK_ID), "prompt masked");
            for &i in &s.masked_positions {
                per_position[i - prompt] += 1;
            }
            total += s.masked_positions.len();
        }
        let sd1 = (trials as f64 * t * (1.0 - t)).sqrt();
        let worst_pos = per_position
            .iter()
            .map(|&c| (c as f64 - trials as f64 * t).abs() / sd1)
            .fold(0.0, f64::max);
        let n = (trials * response_len) as f64;
        let total_sigma = (total as f64 - n * t).abs() / (n * t * (1.0 - t)).sqrt();
        worst_pos.max(total_sigma)
    }

    /// Chi-square statistic of the active-block masked-count histogram against
    /// Binomial(block_len, q), with its degrees of freedom.
    pub fn semi_ar_chi_square(block_len: usize, q: f64, trials: usize, seed: u64) -> (f64, usize) {
        let y = TokenSeq::new((0..2 + 2 * block_len).map(|i| 3 + (i % 5) as u32).collect(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut hist = vec![0usize; block_len + 1];
        for _ in 0..trials {
            let s = semi_ar_mask(&y, 0, q, block_len, &mut rng).unwrap();
            hist[s.active_mask().len()] += 1;
        }
        let mut chi = 0.0;
        for (k, &obs) in hist.iter().enumerate() {
            let expected = trials as f64 * binomial_pmf(block_len, k, q);
            chi += (obs as f64 - expected).powi(2) / expected;
        }
        (chi, block_len)
    }

    fn binomial_pmf(n: usize, k: usize, p: f64) -> f64 {
        let mut c = 1.0;
        for i in 0..k {
            c *= (n - i) as f64 / (i + 1) as f64;
        }
        c * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32)
    }

    /// Upper `alpha` quantile of chi-square with `df` degrees of freedom
    /// (Wilson-Hilferty approximation).
    pub fn chi_square_critical(df: usize, z_alpha: f64) -> f64 {
        let k = df as f64;
        let a = 2.0 / (9.0 * k);
        k * (1.0 - a + z_alpha * a.sqrt()).powi(3)
    }

}

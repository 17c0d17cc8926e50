//! Training objectives over a single sequence's logits.
//!
//! Every loss returns its value together with the exact gradient with
//! respect to the logits, which the model's reverse pass consumes. Logs
//! always come from a max-subtracted log-softmax, never from exponentiated
//! probabilities. Entropies are in nats.

use serde::Serialize;

use crate::diffusion::{MaskLevel, MaskedState, TokenSeq};
use crate::error::{Error, Result};
use crate::model::LogitMatrix;
use crate::num::{argmax, entropy_from_log_probs, log_softmax, Float};

pub const DEFAULT_BETA: f64 = 2.0;
pub const DEFAULT_CERTAINTY_TEMPERATURE: f64 = 0.5;

/// A loss value with its gradient with respect to the logits.
#[derive(Debug, Clone)]
pub struct Scored<F> {
    pub value: F,
    pub grad: LogitMatrix<F>,
}

/// Temperature-scaled predictive distribution of one position.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution<F> {
    pub probs: Vec<F>,
    pub temperature: F,
}

impl<F: Float> Distribution<F> {
    pub fn from_logits(row: &[F], temperature: F) -> Result<Self> {
        check_temperature(temperature)?;
        let mut lp = vec![F::zero(); row.len()];
        log_softmax(row, temperature, &mut lp);
        Ok(Distribution {
            probs: lp.into_iter().map(|x| x.exp()).collect(),
            temperature,
        })
    }

    pub fn entropy(&self) -> F {
        let mut h = F::zero();
        for &p in &self.probs {
            if p > F::zero() {
                h -= p * p.ln();
            }
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub consistency: f64,
    pub certainty: f64,
    /// `consistency + beta * certainty`
    pub combined: f64,
    pub correct_count: usize,
    pub active_count: usize,
    pub beta: f64,
}

fn check_temperature<F: Float>(t: F) -> Result<()> {
    if t > F::zero() && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("temperature {t} must be positive and finite")))
    }
}

fn check_shape<F: Float>(logits: &LogitMatrix<F>, len: usize) -> Result<()> {
    if logits.rows != len {
        return Err(Error::Usage(format!(
            "logits have {} rows for a sequence of length {len}",
            logits.rows
        )));
    }
    Ok(())
}

/// Adds `scale * (softmax(row) - onehot(target))` to `grad_row` and returns
/// `-log p(target)`.
fn nll_row<F: Float>(row: &[F], target: usize, scale: F, grad_row: &mut [F], scratch: &mut [F]) -> F {
    log_softmax(row, F::one(), scratch);
    for (v, (g, &lp)) in grad_row.iter_mut().zip(scratch.iter()).enumerate() {
        let onehot = if v == target { F::one() } else { F::zero() };
        *g += scale * (lp.exp() - onehot);
    }
    -scratch[target]
}

/// Masked-token NLL weighted by `1/t`, normalized by the number of response
/// positions (the positions eligible for masking).
pub fn pretrain_loss<F: Float>(
    logits: &LogitMatrix<F>,
    x0: &TokenSeq,
    state: &MaskedState,
    t: MaskLevel,
) -> Result<Scored<F>> {
    check_shape(logits, x0.len())?;
    let mut grad = LogitMatrix::zeros(logits.rows, logits.vocab);
    if state.masked_positions.is_empty() {
        return Ok(Scored { value: F::zero(), grad });
    }
    if t.get() == 0.0 {
        return Err(Error::Domain("mask level 0 with masked positions".into()));
    }
    let scale = F::one() / F::lit(t.get() * x0.response_len() as f64);
    let mut scratch = vec![F::zero(); logits.vocab];
    let mut total = F::zero();
    for &i in &state.masked_positions {
        let target = x0.tokens[i] as usize;
        total += nll_row(logits.row(i), target, scale, grad.row_mut(i), &mut scratch);
    }
    Ok(Scored {
        value: total * scale,
        grad,
    })
}

/// Mean cross-entropy of the trajectory tokens over the active masked set.
pub fn consistency_loss<F: Float>(logits: &LogitMatrix<F>, y: &TokenSeq, active: &[usize]) -> Result<Scored<F>> {
    check_shape(logits, y.len())?;
    if active.is_empty() {
        return Err(Error::Usage("consistency loss over an empty active mask".into()));
    }
    let scale = F::one() / F::lit(active.len() as f64);
    let mut grad = LogitMatrix::zeros(logits.rows, logits.vocab);
    let mut scratch = vec![F::zero(); logits.vocab];
    let mut total = F::zero();
    for &i in active {
        total += nll_row(logits.row(i), y.tokens[i] as usize, scale, grad.row_mut(i), &mut scratch);
    }
    Ok(Scored {
        value: total * scale,
        grad,
    })
}

/// Active positions whose argmax prediction already equals the trajectory
/// token. Ties resolve to the smallest token id.
pub fn correct_set<F: Float>(logits: &LogitMatrix<F>, y: &TokenSeq, active: &[usize]) -> Vec<usize> {
    active
        .iter()
        .copied()
        .filter(|&i| argmax(logits.row(i)) == y.tokens[i] as usize)
        .collect()
}

/// Mean entropy of `softmax(logits / T)` over `correct`; zero when empty.
/// Set membership carries no gradient.
pub fn certainty_loss<F: Float>(logits: &LogitMatrix<F>, correct: &[usize], temperature: F) -> Result<Scored<F>> {
    check_temperature(temperature)?;
    let mut grad = LogitMatrix::zeros(logits.rows, logits.vocab);
    if correct.is_empty() {
        return Ok(Scored { value: F::zero(), grad });
    }
    let scale = F::one() / F::lit(correct.len() as f64);
    let mut lp = vec![F::zero(); logits.vocab];
    let mut total = F::zero();
    for &i in correct {
        log_softmax(logits.row(i), temperature, &mut lp);
        let h = entropy_from_log_probs(&lp);
        total += h;
        // dH/dz_v = -(1/T) p_v (log p_v + H)
        let coef = scale / temperature;
        for (g, &l) in grad.row_mut(i).iter_mut().zip(&lp) {
            *g -= coef * l.exp() * (l + h);
        }
    }
    Ok(Scored {
        value: total * scale,
        grad,
    })
}

/// Both terms of the distillation objective with separate gradients, so
/// ablations can weight them independently.
#[derive(Debug, Clone)]
pub struct CfdTerms<F> {
    pub breakdown: LossBreakdown,
    pub consistency_grad: LogitMatrix<F>,
    pub certainty_grad: LogitMatrix<F>,
}

pub fn cfd_terms<F: Float>(
    logits: &LogitMatrix<F>,
    y: &TokenSeq,
    active: &[usize],
    temperature: F,
    beta: f64,
) -> Result<CfdTerms<F>> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::Domain(format!("beta {beta} must be finite and >= 0")));
    }
    let consistency = consistency_loss(logits, y, active)?;
    let correct = correct_set(logits, y, active);
    let certainty = certainty_loss(logits, &correct, temperature)?;
    let (c, h) = (consistency.value.as_f64(), certainty.value.as_f64());
    Ok(CfdTerms {
        breakdown: LossBreakdown {
            consistency: c,
            certainty: h,
            combined: c + beta * h,
            correct_count: correct.len(),
            active_count: active.len(),
            beta,
        },
        consistency_grad: consistency.grad,
        certainty_grad: certainty.grad,
    })
}

/// `consistency + beta * certainty` and its gradient.
pub fn cfd_loss<F: Float>(
    logits: &LogitMatrix<F>,
    y: &TokenSeq,
    active: &[usize],
    temperature: F,
    beta: f64,
) -> Result<(LossBreakdown, LogitMatrix<F>)> {
    let terms = cfd_terms(logits, y, active, temperature, beta)?;
    let b = F::lit(beta);
    let mut grad = terms.consistency_grad;
    for (g, &h) in grad.data.iter_mut().zip(&terms.certainty_grad.data) {
        *g += b * h;
    }
    Ok((terms.breakdown, grad))
}

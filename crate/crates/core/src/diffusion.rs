//! Forward corruption processes: uniform masking at level `t`, semi-
//! autoregressive structural masking around an active block, and the
//! complementary active-block mask.
//!
//! Prompt positions are never masked. All position sets hold absolute
//! sequence indices.

use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tasks::MASK_ID;

/// A clean token sequence: prompt `tokens[..prompt_len]` followed by the
/// EOS-padded response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
}

impl TokenSeq {
    pub fn new(tokens: Vec<u32>, prompt_len: usize) -> Result<Self> {
        if prompt_len >= tokens.len() {
            return Err(Error::Input {
                position: prompt_len,
                reason: format!("prompt length {prompt_len} leaves no response in {} tokens", tokens.len()),
            });
        }
        if let Some(pos) = tokens.iter().position(|&t| t == MASK_ID) {
            return Err(Error::Input {
                position: pos,
                reason: "clean sequence contains MASK".into(),
            });
        }
        Ok(TokenSeq { tokens, prompt_len })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn prompt(&self) -> &[u32] {
        &self.tokens[..self.prompt_len]
    }

    pub fn response(&self) -> &[u32] {
        &self.tokens[self.prompt_len..]
    }

    pub fn response_len(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }
}

/// Masking level `t` in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct MaskLevel(f64);

impl MaskLevel {
    pub fn new(t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("mask level {t} outside [0, 1]")));
        }
        Ok(MaskLevel(t))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockInfo {
    /// Zero-based index `n` of the active block.
    pub index: usize,
    pub len: usize,
    /// Masked positions inside the active block (`M_a`).
    pub active_mask: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedState {
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
    /// Exactly the indices holding MASK, ascending.
    pub masked_positions: Vec<usize>,
    /// Set by semi-autoregressive masking; `None` for uniform masking.
    pub block: Option<BlockInfo>,
}

impl MaskedState {
    fn from_tokens(tokens: Vec<u32>, prompt_len: usize, block: Option<BlockInfo>) -> Self {
        let masked_positions = tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == MASK_ID)
            .map(|(i, _)| i)
            .collect();
        MaskedState {
            tokens,
            prompt_len,
            masked_positions,
            block,
        }
    }

    /// Absolute index range of the active block.
    pub fn active_range(&self) -> Option<Range<usize>> {
        self.block.as_ref().map(|b| {
            let start = self.prompt_len + b.index * b.len;
            start..start + b.len
        })
    }

    pub fn active_mask(&self) -> &[usize] {
        self.block.as_ref().map(|b| b.active_mask.as_slice()).unwrap_or(&[])
    }
}

/// Masks every response position independently with probability `t`.
pub fn forward_mask<R: Rng + ?Sized>(x0: &TokenSeq, t: MaskLevel, rng: &mut R) -> MaskedState {
    let mut tokens = x0.tokens.clone();
    for tok in tokens[x0.prompt_len..].iter_mut() {
        if rng.random::<f64>() < t.get() {
            *tok = MASK_ID;
        }
    }
    MaskedState::from_tokens(tokens, x0.prompt_len, None)
}

fn check_blocks(y: &TokenSeq, n: usize, block_len: usize) -> Result<usize> {
    let resp = y.response_len();
    if block_len == 0 || resp % block_len != 0 {
        return Err(Error::Domain(format!(
            "response length {resp} is not divisible by block length {block_len}"
        )));
    }
    let blocks = resp / block_len;
    if n >= blocks {
        return Err(Error::Domain(format!("block index {n} outside 0..{blocks}")));
    }
    Ok(blocks)
}

/// Semi-autoregressive structural mask with an explicit active-block pattern
/// (`pattern[j]` masks the `j`-th active position).
pub fn semi_ar_mask_with_pattern(y: &TokenSeq, n: usize, block_len: usize, pattern: &[bool]) -> Result<MaskedState> {
    check_blocks(y, n, block_len)?;
    if pattern.len() != block_len {
        return Err(Error::Domain(format!(
            "pattern of length {} for block length {block_len}",
            pattern.len()
        )));
    }
    let start = y.prompt_len + n * block_len;
    let mut tokens = y.tokens.clone();
    let mut active_mask = Vec::new();
    for (j, &masked) in pattern.iter().enumerate() {
        if masked {
            tokens[start + j] = MASK_ID;
            active_mask.push(start + j);
        }
    }
    for tok in tokens[start + block_len..].iter_mut() {
        *tok = MASK_ID;
    }
    Ok(MaskedState::from_tokens(
        tokens,
        y.prompt_len,
        Some(BlockInfo {
            index: n,
            len: block_len,
            active_mask,
        }),
    ))
}

/// Context blocks before `n` stay clean, block `n` is masked position-wise
/// with probability `q`, and every later block is fully masked.
pub fn semi_ar_mask<R: Rng + ?Sized>(y: &TokenSeq, n: usize, q: f64, block_len: usize, rng: &mut R) -> Result<MaskedState> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Domain(format!("mask probability {q} outside (0, 1]")));
    }
    check_blocks(y, n, block_len)?;
    let pattern: Vec<bool> = (0..block_len).map(|_| rng.random::<f64>() < q).collect();
    semi_ar_mask_with_pattern(y, n, block_len, &pattern)
}

/// Flips the active-block mask: masked active positions become clean tokens
/// from `y` and clean ones become masked. Context and future are unchanged.
pub fn complementary_mask(state: &MaskedState, y: &TokenSeq) -> Result<MaskedState> {
    let range = state
        .active_range()
        .ok_or_else(|| Error::Usage("complementary mask needs a semi-autoregressive state".into()))?;
    let block = state.block.as_ref().expect("range implies block");
    if y.tokens.len() != state.tokens.len() || y.prompt_len != state.prompt_len {
        return Err(Error::Usage("clean sequence does not match the masked state".into()));
    }
    let mut tokens = state.tokens.clone();
    let mut active_mask = Vec::new();
    for i in range {
        if tokens[i] == MASK_ID {
            tokens[i] = y.tokens[i];
        } else {
            tokens[i] = MASK_ID;
            active_mask.push(i);
        }
    }
    Ok(MaskedState::from_tokens(
        tokens,
        state.prompt_len,
        Some(BlockInfo {
            index: block.index,
            len: block.len,
            active_mask,
        }),
    ))
}

/// Uniform draw from `0..num_blocks`.
pub fn sample_block_index<R: Rng + ?Sized>(num_blocks: usize, rng: &mut R) -> Result<usize> {
    if num_blocks < 1 {
        return Err(Error::Domain("block count must be at least 1".into()));
    }
    Ok(rng.random_range(0..num_blocks))
}

//! Synthetic tasks: generators, the tokenizer, and exact answer checkers.
//!
//! Addition responses carry a chain-of-thought-like carry line before the
//! answer: `ADD 347+589=` is answered by `110|936`, where the digits before
//! `|` are the carry out of each column, least significant column first.
//! Checkers only look at the field after the last `|`.

mod vocab;

pub use vocab::{Vocab, EOS_ID, MASK_ID, PAD_ID, VOCAB_VERSION};

use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::TokenSeq;
use crate::error::{Error, Result};

pub const ANSWER_DELIMITER: char = '|';
pub const ADDITION: &str = "addition";
pub const SORT: &str = "sort";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task: String,
    pub prompt: String,
    /// Gold final answer (the checked field).
    pub gold: String,
}

impl TaskInstance {
    /// Full gold response text including any intermediate line.
    pub fn gold_response(&self) -> Result<String> {
        solve(&self.task, &self.prompt)
            .map(|(response, _)| response)
            .ok_or_else(|| Error::Parse(format!("cannot solve {} prompt {:?}", self.task, self.prompt)))
    }
}

/// Task family and difficulty parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    Addition { num_digits: u32 },
    Sort { list_len: usize, max_val: u32 },
}

impl TaskSpec {
    pub fn name(&self) -> &'static str {
        match self {
            TaskSpec::Addition { .. } => ADDITION,
            TaskSpec::Sort { .. } => SORT,
        }
    }

    pub fn generate(&self, count: usize, seed: u64) -> Result<Vec<TaskInstance>> {
        match *self {
            TaskSpec::Addition { num_digits } => gen_addition(num_digits, count, seed),
            TaskSpec::Sort { list_len, max_val } => gen_sort(list_len, max_val, count, seed),
        }
    }

    /// Longest possible prompt in characters.
    pub fn prompt_width(&self) -> usize {
        match *self {
            TaskSpec::Addition { num_digits } => 2 * num_digits as usize + 6,
            TaskSpec::Sort { list_len, max_val } => 5 + list_len * (digits(max_val as u64) + 1) + 1,
        }
    }

    /// Longest possible gold response in characters.
    pub fn max_response_len(&self) -> usize {
        match *self {
            TaskSpec::Addition { num_digits } => 2 * num_digits as usize + 2,
            TaskSpec::Sort { list_len, max_val } => {
                (list_len * (digits(max_val as u64) + 1)).saturating_sub(1)
            }
        }
    }

    /// Token layout of one prompt (left-padded with PAD) plus a response
    /// region of `response_len` positions padded with EOS.
    pub fn encode(&self, inst: &TaskInstance, response_len: usize, vocab: &Vocab) -> Result<TokenSeq> {
        let response = inst.gold_response()?;
        let mut tokens = self.encode_prompt(&inst.prompt, vocab)?;
        let prompt_len = tokens.len();
        let resp = vocab.encode(&response)?;
        if resp.len() > response_len {
            return Err(Error::Input {
                position: prompt_len + response_len,
                reason: format!("response {response:?} longer than {response_len} positions"),
            });
        }
        tokens.extend_from_slice(&resp);
        tokens.resize(prompt_len + response_len, EOS_ID);
        TokenSeq::new(tokens, prompt_len)
    }

    /// Distinct encodings of `inst` in each of `formats`. Tasks without a
    /// carry line yield a single encoding.
    pub fn encode_variants(
        &self,
        inst: &TaskInstance,
        response_len: usize,
        vocab: &Vocab,
        formats: &[ResponseFormat],
    ) -> Result<Vec<TokenSeq>> {
        let canonical = self.encode(inst, response_len, vocab)?;
        let mut out = vec![canonical.clone()];
        if let TaskSpec::Addition { .. } = self {
            let response = inst.gold_response()?;
            for &format in formats {
                let mut tokens = canonical.prompt().to_vec();
                tokens.extend(vocab.encode(&with_format(&response, format))?);
                tokens.resize(canonical.len(), EOS_ID);
                let seq = TokenSeq::new(tokens, canonical.prompt_len)?;
                if !out.contains(&seq) {
                    out.push(seq);
                }
            }
            if !formats.contains(&ResponseFormat::LsbCarries) {
                out.remove(0);
            }
        }
        Ok(out)
    }

    pub fn encode_prompt(&self, prompt: &str, vocab: &Vocab) -> Result<Vec<u32>> {
        let ids = vocab.encode(prompt)?;
        let width = self.prompt_width();
        if ids.len() > width {
            return Err(Error::Input {
                position: width,
                reason: format!("prompt {prompt:?} wider than {width}"),
            });
        }
        let mut out = vec![PAD_ID; width - ids.len()];
        out.extend(ids);
        Ok(out)
    }
}

fn digits(mut x: u64) -> usize {
    let mut n = 1;
    while x >= 10 {
        x /= 10;
        n += 1;
    }
    n
}

fn operand_range(num_digits: u32) -> (u64, u64) {
    let hi = 10u64.pow(num_digits) - 1;
    let lo = if num_digits == 1 { 0 } else { 10u64.pow(num_digits - 1) };
    (lo, hi)
}

/// Carry line and answer for `a + b` over `num_digits` columns.
pub fn addition_response(a: u64, b: u64, num_digits: u32) -> (String, String) {
    let mut carries = String::new();
    let mut carry = 0;
    let (mut x, mut y) = (a, b);
    for _ in 0..num_digits {
        let s = x % 10 + y % 10 + carry;
        carry = s / 10;
        carries.push(char::from(b'0' + carry as u8));
        x /= 10;
        y /= 10;
    }
    let answer = (a + b).to_string();
    (format!("{carries}{ANSWER_DELIMITER}{answer}"), answer)
}

/// Layout of an addition response. The checker reads only the final
/// answer field, so every layout is a correct answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseFormat {
    /// Carry line least-significant column first, then the answer.
    LsbCarries,
    /// Carry line most-significant column first, then the answer.
    MsbCarries,
    /// The answer alone.
    AnswerOnly,
}

/// `response` rewritten in `format`. Responses are produced with
/// least-significant-first carries; responses without a delimiter are
/// returned unchanged.
pub fn with_format(response: &str, format: ResponseFormat) -> String {
    match (format, response.split_once(ANSWER_DELIMITER)) {
        (ResponseFormat::MsbCarries, Some((carries, answer))) => {
            format!("{}{ANSWER_DELIMITER}{answer}", carries.chars().rev().collect::<String>())
        }
        (ResponseFormat::AnswerOnly, Some((_, answer))) => answer.to_string(),
        _ => response.to_string(),
    }
}

/// `prompt "ADD a+b="`, answer `a + b`; operands uniform over `num_digits`-digit numbers.
pub fn gen_addition(num_digits: u32, count: usize, seed: u64) -> Result<Vec<TaskInstance>> {
    if !(1..=5).contains(&num_digits) {
        return Err(Error::Domain(format!("num_digits {num_digits} outside 1..=5")));
    }
    let (lo, hi) = operand_range(num_digits);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let a = rng.random_range(lo..=hi);
            let b = rng.random_range(lo..=hi);
            TaskInstance {
                task: ADDITION.into(),
                prompt: format!("ADD {a}+{b}="),
                gold: (a + b).to_string(),
            }
        })
        .collect())
}

/// `prompt "SORT 5 2 9 1 →"`, answer the ascending list.
pub fn gen_sort(list_len: usize, max_val: u32, count: usize, seed: u64) -> Result<Vec<TaskInstance>> {
    if !(1..=12).contains(&list_len) {
        return Err(Error::Domain(format!("list_len {list_len} outside 1..=12")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let mut xs: Vec<u32> = (0..list_len).map(|_| rng.random_range(0..=max_val)).collect();
            let prompt = format!("SORT {} →", join(&xs));
            xs.sort_unstable();
            TaskInstance {
                task: SORT.into(),
                prompt,
                gold: join(&xs),
            }
        })
        .collect())
}

fn join(xs: &[u32]) -> String {
    xs.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

fn parse_addition(prompt: &str) -> Option<(u64, u64, u32)> {
    let body = prompt.strip_prefix("ADD ")?.strip_suffix('=')?;
    let (a, b) = body.split_once('+')?;
    let num_digits = a.len().max(b.len()) as u32;
    Some((a.parse().ok()?, b.parse().ok()?, num_digits))
}

/// Gold `(response, answer)` for a prompt, or `None` if it does not parse.
pub fn solve(task: &str, prompt: &str) -> Option<(String, String)> {
    match task {
        ADDITION => {
            let (a, b, d) = parse_addition(prompt)?;
            Some(addition_response(a, b, d))
        }
        SORT => {
            let body = prompt.strip_prefix("SORT ")?.strip_suffix(" →")?;
            let mut xs = body
                .split(' ')
                .map(|s| s.parse::<u32>().ok())
                .collect::<Option<Vec<_>>>()?;
            xs.sort_unstable();
            let answer = join(&xs);
            Some((answer.clone(), answer))
        }
        _ => None,
    }
}

/// Final answer field of a response: text before the first EOS, after the
/// last delimiter. `None` if the response holds MASK/PAD or unknown ids.
pub fn extract_answer(response: &[u32], vocab: &Vocab) -> Option<String> {
    let end = response.iter().position(|&t| t == EOS_ID).unwrap_or(response.len());
    let text = response[..end]
        .iter()
        .map(|&id| vocab.char_of(id))
        .collect::<Option<String>>()?;
    let answer = match text.rfind(ANSWER_DELIMITER) {
        Some(i) => &text[i + ANSWER_DELIMITER.len_utf8()..],
        None => &text,
    };
    Some(answer.to_string())
}

/// Whether the generated sequence answers `prompt` correctly. Unparseable
/// output counts as incorrect.
pub fn check_answer(task: &str, prompt: &str, generated: &TokenSeq) -> bool {
    let vocab = Vocab::standard();
    let Some((_, gold)) = solve(task, prompt) else {
        return false;
    };
    match extract_answer(generated.response(), &vocab) {
        Some(answer) => !answer.is_empty() && answer == gold,
        None => false,
    }
}

/// Drops every evaluation instance whose prompt also occurs in `train`.
pub fn remove_leakage(train: &[TaskInstance], eval: Vec<TaskInstance>) -> Vec<TaskInstance> {
    let seen: std::collections::HashSet<&str> = train.iter().map(|t| t.prompt.as_str()).collect();
    eval.into_iter().filter(|e| !seen.contains(e.prompt.as_str())).collect()
}

/// Training and evaluation sets with disjoint prompts. Duplicate prompts
/// inside the evaluation set are removed too.
pub fn train_eval_split(
    spec: &TaskSpec,
    train_count: usize,
    eval_count: usize,
    seed: u64,
) -> Result<(Vec<TaskInstance>, Vec<TaskInstance>)> {
    let train = spec.generate(train_count, seed)?;
    let mut eval = Vec::with_capacity(eval_count);
    let mut seen = std::collections::HashSet::new();
    let mut round = 1u64;
    while eval.len() < eval_count {
        let batch = remove_leakage(&train, spec.generate(eval_count, seed.wrapping_add(round * 0x9e37_79b9))?);
        for inst in batch {
            if eval.len() < eval_count && seen.insert(inst.prompt.clone()) {
                eval.push(inst);
            }
        }
        round += 1;
        if round > 1000 {
            return Err(Error::Dataset("task space too small for a disjoint evaluation set".into()));
        }
    }
    Ok((train, eval))
}

/// Line-delimited JSON: one `{task, prompt, gold}` object per line.
pub fn write_task_file(path: &Path, instances: &[TaskInstance]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for inst in instances {
        serde_json::to_writer(&mut out, inst).map_err(|e| Error::Parse(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_task_file(path: &Path) -> Result<Vec<TaskInstance>> {
    let input = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

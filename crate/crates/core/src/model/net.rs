//! Forward pass with activation recording, and the matching reverse pass.

use super::{Block, Linear, LogitMatrix, ModelParams, Weights};
use crate::error::{Error, Result};
use crate::num::{gemm, matmul, Float, View};

const LN_EPS: f64 = 1e-5;

/// Activations saved by [`ModelParams::forward_recorded`], consumed by
/// [`ModelParams::backward`]. Tied to the parameter version it was made from.
pub struct Recording<F> {
    version: u64,
    batch: usize,
    seq_len: usize,
    tokens: Vec<u32>,
    blocks: Vec<BlockCache<F>>,
    final_norm: NormCache<F>,
    features: Vec<F>,
    pub logits: LogitMatrix<F>,
}

impl<F> Recording<F> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }
}

struct NormCache<F> {
    xhat: Vec<F>,
    rstd: Vec<F>,
}

struct BlockCache<F> {
    norm1: NormCache<F>,
    normed1: Vec<F>,
    query_low: Option<Vec<F>>,
    key_low: Option<Vec<F>>,
    value_low: Option<Vec<F>>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    /// `[batch, heads, seq, seq]`
    probs: Vec<F>,
    attn: Vec<F>,
    output_low: Option<Vec<F>>,
    norm2: NormCache<F>,
    normed2: Vec<F>,
    up_low: Option<Vec<F>>,
    pre_act: Vec<F>,
    act: Vec<F>,
    down_low: Option<Vec<F>>,
}

fn sigmoid<F: Float>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn layer_norm<F: Float>(x: &[F], gain: &[F], bias: &[F], width: usize) -> (Vec<F>, NormCache<F>) {
    let rows = x.len() / width;
    let eps = F::lit(LN_EPS);
    let inv_w = F::one() / F::lit(width as f64);
    let mut y = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = vec![F::zero(); rows];
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().copied().sum::<F>() * inv_w;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_w;
        let rs = F::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..width {
            let xh = (row[c] - mean) * rs;
            xhat[r * width + c] = xh;
            y[r * width + c] = xh * gain[c] + bias[c];
        }
    }
    (y, NormCache { xhat, rstd })
}

/// Accumulates the input gradient into `dx`, parameter gradients into
/// `dgain`/`dbias` when given.
fn layer_norm_backward<F: Float>(
    cache: &NormCache<F>,
    gain: &[F],
    dy: &[F],
    dx: &mut [F],
    mut param_grads: Option<(&mut [F], &mut [F])>,
    width: usize,
) {
    let rows = dy.len() / width;
    let inv_w = F::one() / F::lit(width as f64);
    let mut dxhat = vec![F::zero(); width];
    for r in 0..rows {
        let dy_row = &dy[r * width..(r + 1) * width];
        let xh_row = &cache.xhat[r * width..(r + 1) * width];
        if let Some((dg, db)) = param_grads.as_mut() {
            for c in 0..width {
                dg[c] += dy_row[c] * xh_row[c];
                db[c] += dy_row[c];
            }
        }
        let mut mean_d = F::zero();
        let mut mean_dx = F::zero();
        for c in 0..width {
            dxhat[c] = dy_row[c] * gain[c];
            mean_d += dxhat[c];
            mean_dx += dxhat[c] * xh_row[c];
        }
        mean_d *= inv_w;
        mean_dx *= inv_w;
        let rs = cache.rstd[r];
        for c in 0..width {
            dx[r * width + c] += rs * (dxhat[c] - mean_d - xh_row[c] * mean_dx);
        }
    }
}

fn linear_forward<F: Float>(lin: &Linear<F>, x: &[F], rows: usize) -> (Vec<F>, Option<Vec<F>>) {
    let (din, dout) = (lin.in_dim(), lin.out_dim());
    let mut y = vec![F::zero(); rows * dout];
    matmul(&mut y, x, &lin.weight.data, rows, din, dout, false, false, false);
    let low = lin.adapter.as_ref().map(|ad| {
        let rank = ad.up.shape[0];
        let mut low = vec![F::zero(); rows * rank];
        matmul(&mut low, x, &ad.down.data, rows, din, rank, false, false, false);
        matmul(&mut y, &low, &ad.up.data, rows, rank, dout, false, false, true);
        low
    });
    (y, low)
}

#[allow(clippy::too_many_arguments)]
fn linear_backward<F: Float>(
    lin: &Linear<F>,
    grad: &mut Linear<F>,
    x: &[F],
    low: Option<&Vec<F>>,
    dy: &[F],
    dx: &mut [F],
    rows: usize,
    train_base: bool,
) {
    let (din, dout) = (lin.in_dim(), lin.out_dim());
    if train_base {
        matmul(&mut grad.weight.data, x, dy, din, rows, dout, true, false, true);
    }
    matmul(dx, dy, &lin.weight.data, rows, dout, din, false, true, true);
    if let (Some(ad), Some(gad), Some(low)) = (&lin.adapter, grad.adapter.as_mut(), low) {
        let rank = ad.up.shape[0];
        matmul(&mut gad.up.data, low, dy, rank, rows, dout, true, false, true);
        let mut dlow = vec![F::zero(); rows * rank];
        matmul(&mut dlow, dy, &ad.up.data, rows, dout, rank, false, true, false);
        matmul(&mut gad.down.data, x, &dlow, din, rows, rank, true, false, true);
        matmul(dx, &dlow, &ad.down.data, rows, rank, din, false, true, true);
    }
}

impl<F: Float> ModelParams<F> {
    fn check_tokens(&self, tokens: &[u32], batch: usize) -> Result<usize> {
        if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
            return Err(Error::Input {
                position: 0,
                reason: format!("{} tokens cannot form {batch} equal sequences", tokens.len()),
            });
        }
        let seq_len = tokens.len() / batch;
        if seq_len > self.config.max_len {
            return Err(Error::Input {
                position: self.config.max_len,
                reason: format!("sequence length {seq_len} exceeds max_len {}", self.config.max_len),
            });
        }
        if let Some(pos) = tokens.iter().position(|&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Input {
                position: pos % seq_len,
                reason: format!("token id {} >= vocab_size {}", tokens[pos], self.config.vocab_size),
            });
        }
        Ok(seq_len)
    }

    /// Logits for one sequence.
    pub fn forward(&self, tokens: &[u32]) -> Result<LogitMatrix<F>> {
        Ok(self.forward_recorded(tokens, 1)?.logits)
    }

    /// Logits for `batch` concatenated equal-length sequences, `[batch * seq, vocab]`.
    pub fn forward_batch(&self, tokens: &[u32], batch: usize) -> Result<LogitMatrix<F>> {
        Ok(self.forward_recorded(tokens, batch)?.logits)
    }

    /// Forward pass that keeps every activation needed by [`Self::backward`].
    pub fn forward_recorded(&self, tokens: &[u32], batch: usize) -> Result<Recording<F>> {
        let seq_len = self.check_tokens(tokens, batch)?;
        let cfg = &self.config;
        let w = &self.weights;
        let h = cfg.hidden_dim;
        let rows = tokens.len();

        let mut x = vec![F::zero(); rows * h];
        for (r, &tok) in tokens.iter().enumerate() {
            let dst = &mut x[r * h..(r + 1) * h];
            let emb = &w.token_embedding.data[tok as usize * h..(tok as usize + 1) * h];
            dst.copy_from_slice(emb);
            if cfg.num_layers > 0 {
                let p = r % seq_len;
                let pos = &w.position_embedding.data[p * h..(p + 1) * h];
                dst.iter_mut().zip(pos).for_each(|(d, &pv)| *d += pv);
            }
        }

        let mut caches = Vec::with_capacity(w.blocks.len());
        for block in &w.blocks {
            caches.push(self.block_forward(block, &mut x, batch, seq_len));
        }

        let (features, final_norm) = layer_norm(&x, &w.final_gain.data, &w.final_bias.data, h);
        let v = cfg.vocab_size;
        let mut logits = vec![F::zero(); rows * v];
        for r in 0..rows {
            logits[r * v..(r + 1) * v].copy_from_slice(&w.unembedding_bias.data);
        }
        matmul(&mut logits, &features, &w.unembedding.data, rows, h, v, false, false, true);

        Ok(Recording {
            version: self.version,
            batch,
            seq_len,
            tokens: tokens.to_vec(),
            blocks: caches,
            final_norm,
            features,
            logits: LogitMatrix::new(rows, v, logits),
        })
    }

    fn block_forward(&self, block: &Block<F>, x: &mut [F], batch: usize, seq: usize) -> BlockCache<F> {
        let cfg = &self.config;
        let h = cfg.hidden_dim;
        let heads = cfg.num_heads;
        let dh = cfg.head_dim();
        let rows = batch * seq;
        let scale = F::one() / F::lit(dh as f64).sqrt();

        let (normed1, norm1) = layer_norm(x, &block.ln1_gain.data, &block.ln1_bias.data, h);
        let (q, query_low) = linear_forward(&block.query, &normed1, rows);
        let (k, key_low) = linear_forward(&block.key, &normed1, rows);
        let (v, value_low) = linear_forward(&block.value, &normed1, rows);

        let mut probs = vec![F::zero(); batch * heads * seq * seq];
        let mut attn = vec![F::zero(); rows * h];
        for b in 0..batch {
            for hd in 0..heads {
                let off = b * seq * h + hd * dh;
                let p_off = (b * heads + hd) * seq * seq;
                let qv = View::strided(&q[off..], seq, dh, h, 1);
                let kv = View::strided(&k[off..], seq, dh, h, 1);
                let vv = View::strided(&v[off..], seq, dh, h, 1);
                let p = &mut probs[p_off..p_off + seq * seq];
                gemm(scale, qv, kv.t(), F::zero(), p, seq, 1);
                for row in p.chunks_mut(seq) {
                    let max = row.iter().fold(F::neg_infinity(), |m, &s| m.max(s));
                    let mut sum = F::zero();
                    for s in row.iter_mut() {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    let inv = F::one() / sum;
                    row.iter_mut().for_each(|s| *s *= inv);
                }
                gemm(F::one(), View::new(p, seq, seq), vv, F::zero(), &mut attn[off..], h, 1);
            }
        }

        let (o, output_low) = linear_forward(&block.output, &attn, rows);
        x.iter_mut().zip(&o).for_each(|(xi, &oi)| *xi += oi);

        let (normed2, norm2) = layer_norm(x, &block.ln2_gain.data, &block.ln2_bias.data, h);
        let (pre_act, up_low) = linear_forward(&block.ffn_up, &normed2, rows);
        let act: Vec<F> = pre_act.iter().map(|&u| u * sigmoid(u)).collect();
        let (d, down_low) = linear_forward(&block.ffn_down, &act, rows);
        x.iter_mut().zip(&d).for_each(|(xi, &di)| *xi += di);

        BlockCache {
            norm1,
            normed1,
            query_low,
            key_low,
            value_low,
            q,
            k,
            v,
            probs,
            attn,
            output_low,
            norm2,
            normed2,
            up_low,
            pre_act,
            act,
            down_low,
        }
    }

    /// Reverse pass: gradient of `sum(dlogits ⊙ logits)` with respect to every
    /// tensor. Frozen tensors get zero gradient.
    pub fn backward(&self, rec: &Recording<F>, dlogits: &LogitMatrix<F>) -> Result<Weights<F>> {
        if rec.version != self.version {
            return Err(Error::Usage(format!(
                "recorded graph is stale (recorded at version {}, parameters at {})",
                rec.version, self.version
            )));
        }
        if dlogits.rows != rec.logits.rows || dlogits.vocab != rec.logits.vocab {
            return Err(Error::Usage("logit gradient shape does not match recording".into()));
        }
        let cfg = &self.config;
        let w = &self.weights;
        let h = cfg.hidden_dim;
        let v = cfg.vocab_size;
        let rows = rec.logits.rows;
        let train_base = !self.has_adapters();
        let mut g = w.zeros_like();

        if train_base {
            matmul(&mut g.unembedding.data, &rec.features, &dlogits.data, h, rows, v, true, false, true);
            for r in 0..rows {
                for (gb, &d) in g.unembedding_bias.data.iter_mut().zip(dlogits.row(r)) {
                    *gb += d;
                }
            }
        }
        let mut dfeat = vec![F::zero(); rows * h];
        matmul(&mut dfeat, &dlogits.data, &w.unembedding.data, rows, v, h, false, true, false);
        let mut dx = vec![F::zero(); rows * h];
        let final_grads = train_base.then_some((&mut g.final_gain.data[..], &mut g.final_bias.data[..]));
        layer_norm_backward(&rec.final_norm, &w.final_gain.data, &dfeat, &mut dx, final_grads, h);

        for (l, block) in w.blocks.iter().enumerate().rev() {
            self.block_backward(block, &mut g.blocks[l], &rec.blocks[l], &mut dx, rec.batch, rec.seq_len, train_base);
        }

        if train_base {
            for (r, &tok) in rec.tokens.iter().enumerate() {
                let src = &dx[r * h..(r + 1) * h];
                let dst = &mut g.token_embedding.data[tok as usize * h..(tok as usize + 1) * h];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                if cfg.num_layers > 0 {
                    let p = r % rec.seq_len;
                    let dst = &mut g.position_embedding.data[p * h..(p + 1) * h];
                    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                }
            }
        }
        Ok(g)
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        block: &Block<F>,
        g: &mut Block<F>,
        c: &BlockCache<F>,
        dx: &mut [F],
        batch: usize,
        seq: usize,
        train_base: bool,
    ) {
        let cfg = &self.config;
        let h = cfg.hidden_dim;
        let heads = cfg.num_heads;
        let dh = cfg.head_dim();
        let rows = batch * seq;
        let ffn = cfg.ffn_dim;
        let scale = F::one() / F::lit(dh as f64).sqrt();

        // FFN branch: x_out = x_mid + down(silu(up(norm2(x_mid))))
        let mut dact = vec![F::zero(); rows * ffn];
        linear_backward(&block.ffn_down, &mut g.ffn_down, &c.act, c.down_low.as_ref(), dx, &mut dact, rows, train_base);
        for (d, &u) in dact.iter_mut().zip(&c.pre_act) {
            let s = sigmoid(u);
            *d *= s * (F::one() + u * (F::one() - s));
        }
        let mut dnormed2 = vec![F::zero(); rows * h];
        linear_backward(&block.ffn_up, &mut g.ffn_up, &c.normed2, c.up_low.as_ref(), &dact, &mut dnormed2, rows, train_base);
        let ln2_grads = train_base.then_some((&mut g.ln2_gain.data[..], &mut g.ln2_bias.data[..]));
        layer_norm_backward(&c.norm2, &block.ln2_gain.data, &dnormed2, dx, ln2_grads, h);

        // Attention branch: x_mid = x_in + output(attn(norm1(x_in)))
        let mut dattn = vec![F::zero(); rows * h];
        linear_backward(&block.output, &mut g.output, &c.attn, c.output_low.as_ref(), dx, &mut dattn, rows, train_base);
        let mut dq = vec![F::zero(); rows * h];
        let mut dk = vec![F::zero(); rows * h];
        let mut dv = vec![F::zero(); rows * h];
        let mut dp = vec![F::zero(); seq * seq];
        for b in 0..batch {
            for hd in 0..heads {
                let off = b * seq * h + hd * dh;
                let p_off = (b * heads + hd) * seq * seq;
                let p = View::new(&c.probs[p_off..p_off + seq * seq], seq, seq);
                let qv = View::strided(&c.q[off..], seq, dh, h, 1);
                let kv = View::strided(&c.k[off..], seq, dh, h, 1);
                let vv = View::strided(&c.v[off..], seq, dh, h, 1);
                let dov = View::strided(&dattn[off..], seq, dh, h, 1);
                gemm(F::one(), dov, vv.t(), F::zero(), &mut dp, seq, 1);
                gemm(F::one(), p.t(), dov, F::one(), &mut dv[off..], h, 1);
                // softmax backward, in place: dS = P * (dP - rowsum(dP * P))
                let pr = &c.probs[p_off..p_off + seq * seq];
                for i in 0..seq {
                    let prow = &pr[i * seq..(i + 1) * seq];
                    let drow = &mut dp[i * seq..(i + 1) * seq];
                    let dot: F = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                    for (d, &pv) in drow.iter_mut().zip(prow) {
                        *d = pv * (*d - dot);
                    }
                }
                let ds = View::new(&dp, seq, seq);
                gemm(scale, ds, kv, F::one(), &mut dq[off..], h, 1);
                gemm(scale, ds.t(), qv, F::one(), &mut dk[off..], h, 1);
            }
        }
        let mut dnormed1 = vec![F::zero(); rows * h];
        linear_backward(&block.query, &mut g.query, &c.normed1, c.query_low.as_ref(), &dq, &mut dnormed1, rows, train_base);
        linear_backward(&block.key, &mut g.key, &c.normed1, c.key_low.as_ref(), &dk, &mut dnormed1, rows, train_base);
        linear_backward(&block.value, &mut g.value, &c.normed1, c.value_low.as_ref(), &dv, &mut dnormed1, rows, train_base);
        let ln1_grads = train_base.then_some((&mut g.ln1_gain.data[..], &mut g.ln1_bias.data[..]));
        layer_norm_backward(&c.norm1, &block.ln1_gain.data, &dnormed1, dx, ln1_grads, h);
    }
}

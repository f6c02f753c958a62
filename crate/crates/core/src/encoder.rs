//! Recurrent sequence autoencoder over trajectory tokens.
//!
//! A gated recurrent encoder reads the token sequence; the trajectory
//! embedding is the mean of its per-step hidden states. A teacher-forced
//! decoder starts from that mean and predicts every token from the previous
//! one. Gradients come from hand-written backpropagation through time.
//!
//! Parameters live in one flat vector. Block order: token embedding
//! (vocab x E), encoder Wz Wr Wn (H x E), Uz Ur Un (H x H), bz br bn bun (H),
//! decoder blocks in the same order, output weights (vocab x H), output bias
//! (vocab). Matrices are row-major.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::par::{self, Exec};
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Cell {
    wz: usize,
    wr: usize,
    wn: usize,
    uz: usize,
    ur: usize,
    un: usize,
    bz: usize,
    br: usize,
    bn: usize,
    bun: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Offsets {
    emb: usize,
    enc: Cell,
    dec: Cell,
    out_w: usize,
    out_b: usize,
    total: usize,
}

impl Offsets {
    fn new(vocab: usize, h: usize, e: usize) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let emb = take(vocab * e);
        let cell = |take: &mut dyn FnMut(usize) -> usize| Cell {
            wz: take(h * e),
            wr: take(h * e),
            wn: take(h * e),
            uz: take(h * h),
            ur: take(h * h),
            un: take(h * h),
            bz: take(h),
            br: take(h),
            bn: take(h),
            bun: take(h),
        };
        let enc = cell(&mut take);
        let dec = cell(&mut take);
        let out_w = take(vocab * h);
        let out_b = take(vocab);
        Offsets { emb, enc, dec, out_w, out_b, total: at }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub vocab: usize,
    pub h: usize,
    pub e: usize,
    pub data: Vec<f64>,
    off: Offsets,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub h: usize,
    pub e: usize,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        EncoderTrainConfig { epochs: 100, learning_rate: 0.01, batch_size: 8, h: 16, e: 8, seed: 0, clip_norm: 5.0 }
    }
}

impl EncoderTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.e == 0 {
            return Err(Error::Validation("epochs, batch_size and E must be positive".into()));
        }
        if self.h < 2 {
            return Err(Error::Validation("H must be at least 2".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Validation("learning rate must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Named parameter blocks, in storage order, as `(name, offset, len)`.
pub fn blocks(p: &EncoderParams) -> Vec<(String, usize, usize)> {
    let (v, h, e) = (p.vocab, p.h, p.e);
    let mut out = vec![("emb".to_string(), p.off.emb, v * e)];
    for (tag, c) in [("enc", p.off.enc), ("dec", p.off.dec)] {
        for (n, o, l) in [
            ("wz", c.wz, h * e),
            ("wr", c.wr, h * e),
            ("wn", c.wn, h * e),
            ("uz", c.uz, h * h),
            ("ur", c.ur, h * h),
            ("un", c.un, h * h),
            ("bz", c.bz, h),
            ("br", c.br, h),
            ("bn", c.bn, h),
            ("bun", c.bun, h),
        ] {
            out.push((format!("{tag}.{n}"), o, l));
        }
    }
    out.push(("out.w".into(), p.off.out_w, v * h));
    out.push(("out.b".into(), p.off.out_b, v));
    out
}

/// Uniform in ±1/√fan_in, fan_in being the block's input width. Embedding
/// rows are drawn in ±1.
pub fn init_params(vocab: usize, h: usize, e: usize, seed: u64) -> Result<EncoderParams> {
    if vocab < 2 || h < 2 || e == 0 {
        return Err(Error::Validation("need vocab ≥ 2, H ≥ 2, E ≥ 1".into()));
    }
    let off = Offsets::new(vocab, h, e);
    let mut p = EncoderParams { vocab, h, e, data: vec![0.0; off.total], off };
    let mut r = rng::stream(seed, "encoder-init", 0);
    for (name, o, l) in blocks(&p) {
        let fan_in = match name.as_str() {
            "emb" => 1,
            n if n.ends_with(".wz") || n.ends_with(".wr") || n.ends_with(".wn") => e,
            _ => h,
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        for x in &mut p.data[o..o + l] {
            *x = r.gen_range(-bound..bound);
        }
    }
    Ok(p)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `out += M v` for a row-major `rows x cols` block.
fn matvec(out: &mut [f64], m: &[f64], v: &[f64]) {
    let cols = v.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &m[i * cols..(i + 1) * cols];
        *o += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += Mᵀ v`.
fn matvec_t(out: &mut [f64], m: &[f64], v: &[f64]) {
    let cols = out.len();
    for (i, &vi) in v.iter().enumerate() {
        if vi == 0.0 {
            continue;
        }
        let row = &m[i * cols..(i + 1) * cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * vi;
        }
    }
}

/// `G += u vᵀ`.
fn outer(g: &mut [f64], u: &[f64], v: &[f64]) {
    let cols = v.len();
    for (i, &ui) in u.iter().enumerate() {
        if ui == 0.0 {
            continue;
        }
        for (gj, vj) in g[i * cols..(i + 1) * cols].iter_mut().zip(v) {
            *gj += ui * vj;
        }
    }
}

struct StepCache {
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    /// `Un h + bun`, before gating by r.
    hn: Vec<f64>,
    h: Vec<f64>,
}

fn gru_step(p: &[f64], c: &Cell, h: usize, e: usize, x: &[f64], hp: &[f64]) -> StepCache {
    let blk = |o: usize, l: usize| &p[o..o + l];
    let mut az = blk(c.bz, h).to_vec();
    matvec(&mut az, blk(c.wz, h * e), x);
    matvec(&mut az, blk(c.uz, h * h), hp);
    let mut ar = blk(c.br, h).to_vec();
    matvec(&mut ar, blk(c.wr, h * e), x);
    matvec(&mut ar, blk(c.ur, h * h), hp);
    let mut hn = blk(c.bun, h).to_vec();
    matvec(&mut hn, blk(c.un, h * h), hp);
    let mut an = blk(c.bn, h).to_vec();
    matvec(&mut an, blk(c.wn, h * e), x);
    let z: Vec<f64> = az.into_iter().map(sigmoid).collect();
    let r: Vec<f64> = ar.into_iter().map(sigmoid).collect();
    let n: Vec<f64> = (0..h).map(|i| (an[i] + r[i] * hn[i]).tanh()).collect();
    let hnew = (0..h).map(|i| (1.0 - z[i]) * n[i] + z[i] * hp[i]).collect();
    StepCache { z, r, n, hn, h: hnew }
}

/// Accumulates parameter gradients for one step; returns `(dx, dh_prev)`.
fn gru_back(p: &[f64], g: &mut [f64], c: &Cell, h: usize, e: usize, x: &[f64], hp: &[f64], sc: &StepCache, dh: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; e];
    let mut dhp: Vec<f64> = (0..h).map(|i| dh[i] * sc.z[i]).collect();
    let mut da_n = vec![0.0; h];
    let mut da_z = vec![0.0; h];
    let mut da_r = vec![0.0; h];
    let mut da_hn = vec![0.0; h];
    for i in 0..h {
        let dn = dh[i] * (1.0 - sc.z[i]);
        let dz = dh[i] * (hp[i] - sc.n[i]);
        da_n[i] = dn * (1.0 - sc.n[i] * sc.n[i]);
        da_hn[i] = da_n[i] * sc.r[i];
        let dr = da_n[i] * sc.hn[i];
        da_z[i] = dz * sc.z[i] * (1.0 - sc.z[i]);
        da_r[i] = dr * sc.r[i] * (1.0 - sc.r[i]);
    }
    for (w, u, b, da) in [(c.wz, c.uz, c.bz, &da_z), (c.wr, c.ur, c.br, &da_r)] {
        outer(&mut g[w..w + h * e], da, x);
        outer(&mut g[u..u + h * h], da, hp);
        for i in 0..h {
            g[b + i] += da[i];
        }
        matvec_t(&mut dx, &p[w..w + h * e], da);
        matvec_t(&mut dhp, &p[u..u + h * h], da);
    }
    outer(&mut g[c.wn..c.wn + h * e], &da_n, x);
    for i in 0..h {
        g[c.bn + i] += da_n[i];
        g[c.bun + i] += da_hn[i];
    }
    matvec_t(&mut dx, &p[c.wn..c.wn + h * e], &da_n);
    outer(&mut g[c.un..c.un + h * h], &da_hn, hp);
    matvec_t(&mut dhp, &p[c.un..c.un + h * h], &da_hn);
    (dx, dhp)
}

impl EncoderParams {
    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Validation("empty token sequence".into()));
        }
        match tokens.iter().find(|&&t| t >= self.vocab) {
            Some(&t) => Err(Error::TokenOutOfVocab { token: t, vocab: self.vocab }),
            None => Ok(()),
        }
    }

    fn emb_row(&self, t: usize) -> &[f64] {
        let o = self.off.emb + t * self.e;
        &self.data[o..o + self.e]
    }

    fn encode(&self, tokens: &[usize]) -> Vec<StepCache> {
        let mut hp = vec![0.0; self.h];
        let mut out = Vec::with_capacity(tokens.len());
        for &t in tokens {
            let sc = gru_step(&self.data, &self.off.enc, self.h, self.e, self.emb_row(t), &hp);
            hp.clone_from(&sc.h);
            out.push(sc);
        }
        out
    }

    /// Mean of the encoder's per-step hidden states.
    pub fn embed(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        Ok(mean_hidden(&self.encode(tokens), self.h))
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }
}

fn mean_hidden(steps: &[StepCache], h: usize) -> Vec<f64> {
    let mut m = vec![0.0; h];
    for sc in steps {
        for (a, b) in m.iter_mut().zip(&sc.h) {
            *a += b;
        }
    }
    let n = steps.len() as f64;
    m.iter_mut().for_each(|x| *x /= n);
    m
}

pub fn embed_trajectory(params: &EncoderParams, tokens: &[usize]) -> Result<Vec<f64>> {
    params.embed(tokens)
}

fn log_softmax_at(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs = exps.into_iter().map(|x| x / z).collect();
    (logits[target] - m - z.ln(), probs)
}

/// Per-token mean cross-entropy and, optionally, its gradient.
fn forward_backward(p: &EncoderParams, tokens: &[usize], want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let (h, e, v) = (p.h, p.e, p.vocab);
    let t_len = tokens.len();
    let enc = p.encode(tokens);
    let latent = mean_hidden(&enc, h);
    let zero_in = vec![0.0; e];
    let dec_input = |t: usize| if t == 0 { &zero_in[..] } else { p.emb_row(tokens[t - 1]) };
    let mut dec: Vec<StepCache> = Vec::with_capacity(t_len);
    let mut probs = Vec::with_capacity(t_len);
    let mut loss = 0.0;
    let ow = &p.data[p.off.out_w..p.off.out_w + v * h];
    for t in 0..t_len {
        let prev = if t == 0 { &latent } else { &dec[t - 1].h };
        let sc = gru_step(&p.data, &p.off.dec, h, e, dec_input(t), prev);
        let mut logits = p.data[p.off.out_b..p.off.out_b + v].to_vec();
        matvec(&mut logits, ow, &sc.h);
        let (lp, pr) = log_softmax_at(&logits, tokens[t]);
        loss -= lp;
        dec.push(sc);
        probs.push(pr);
    }
    loss /= t_len as f64;
    if !want_grad {
        return (loss, None);
    }
    let mut g = vec![0.0; p.data.len()];
    let scale = 1.0 / t_len as f64;
    let mut carry = vec![0.0; h];
    for t in (0..t_len).rev() {
        let mut dlogits = probs[t].clone();
        dlogits[tokens[t]] -= 1.0;
        dlogits.iter_mut().for_each(|x| *x *= scale);
        outer(&mut g[p.off.out_w..p.off.out_w + v * h], &dlogits, &dec[t].h);
        for i in 0..v {
            g[p.off.out_b + i] += dlogits[i];
        }
        let mut dh = carry;
        matvec_t(&mut dh, ow, &dlogits);
        let prev = if t == 0 { &latent } else { &dec[t - 1].h };
        let (dx, dhp) = gru_back(&p.data, &mut g, &p.off.dec, h, e, dec_input(t), prev, &dec[t], &dh);
        if t > 0 {
            let o = p.off.emb + tokens[t - 1] * e;
            g[o..o + e].iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
        }
        carry = dhp;
    }
    let dlatent: Vec<f64> = carry.iter().map(|x| x / t_len as f64).collect();
    let mut carry = vec![0.0; h];
    let zero_h = vec![0.0; h];
    for t in (0..t_len).rev() {
        let dh: Vec<f64> = carry.iter().zip(&dlatent).map(|(a, b)| a + b).collect();
        let prev = if t == 0 { &zero_h } else { &enc[t - 1].h };
        let (dx, dhp) = gru_back(&p.data, &mut g, &p.off.enc, h, e, p.emb_row(tokens[t]), prev, &enc[t], &dh);
        let o = p.off.emb + tokens[t] * e;
        g[o..o + e].iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
        carry = dhp;
    }
    (loss, Some(g))
}

/// Teacher-forced cross-entropy, averaged per token.
pub fn reconstruction_loss(params: &EncoderParams, tokens: &[usize]) -> Result<f64> {
    params.check_tokens(tokens)?;
    Ok(forward_backward(params, tokens, false).0)
}

pub fn loss_and_grad(params: &EncoderParams, tokens: &[usize]) -> Result<(f64, Vec<f64>)> {
    params.check_tokens(tokens)?;
    let (l, g) = forward_backward(params, tokens, true);
    Ok((l, g.expect("gradient requested")))
}

/// Adam over mini-batches of whole sequences; gradients are averaged over
/// the sequences in a batch. Returns the mean training loss per epoch.
pub fn train_autoencoder(params: &EncoderParams, sequences: &[Vec<usize>], cfg: &EncoderTrainConfig, exec: Exec) -> Result<(EncoderParams, Vec<f64>)> {
    cfg.validate()?;
    if sequences.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for s in sequences {
        params.check_tokens(s)?;
    }
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut p = params.clone();
    let n = p.data.len();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut step = 0i32;
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..sequences.len()).collect();
        let mut r = rng::stream(cfg.seed, "encoder-shuffle", epoch as u64);
        for i in (1..order.len()).rev() {
            order.swap(i, r.gen_range(0..=i));
        }
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results = par::map(exec, batch, |&i| forward_backward(&p, &sequences[i], true));
            let mut grad = vec![0.0; n];
            for (l, g) in results {
                total += l;
                grad.iter_mut().zip(g.unwrap()).for_each(|(a, b)| *a += b);
            }
            let k = batch.len() as f64;
            grad.iter_mut().for_each(|x| *x /= k);
            if cfg.clip_norm > 0.0 {
                let norm = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > cfg.clip_norm {
                    let s = cfg.clip_norm / norm;
                    grad.iter_mut().for_each(|x| *x *= s);
                }
            }
            step += 1;
            let c1 = 1.0 - b1.powi(step);
            let c2 = 1.0 - b2.powi(step);
            for i in 0..n {
                m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                p.data[i] -= cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        let mean = total / sequences.len() as f64;
        if !mean.is_finite() || p.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteLoss { epoch });
        }
        curve.push(mean);
    }
    Ok((p, curve))
}

const MAGIC: &[u8; 8] = b"TAENC001";

/// Magic, then vocab, H, E as little-endian u64, then every parameter as a
/// little-endian f64 in block order.
pub fn params_to_bytes(p: &EncoderParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + p.data.len() * 8);
    out.extend_from_slice(MAGIC);
    for d in [p.vocab, p.h, p.e] {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for x in &p.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn params_from_bytes(bytes: &[u8]) -> Result<EncoderParams> {
    let bad = |m: &str| Error::Validation(format!("params file: {m}"));
    if bytes.len() < 32 || &bytes[..8] != MAGIC {
        return Err(bad("bad header"));
    }
    let dim = |i: usize| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap()) as usize;
    let (vocab, h, e) = (dim(0), dim(1), dim(2));
    let mut p = init_params(vocab, h, e, 0)?;
    if bytes.len() != 32 + p.data.len() * 8 {
        return Err(bad("length does not match dimensions"));
    }
    for (i, x) in p.data.iter_mut().enumerate() {
        let o = 32 + 8 * i;
        *x = f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    }
    Ok(p)
}

pub fn save_params(p: &EncoderParams, path: &Path) -> Result<()> {
    crate::pipeline::write_atomic(path, &params_to_bytes(p))
}

pub fn load_params(path: &Path) -> Result<EncoderParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    params_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded() {
        let a = init_params(10, 2, 2, 1).unwrap();
        let b = init_params(10, 2, 2, 1).unwrap();
        let c = init_params(10, 2, 2, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.data, c.data);
        let total: usize = blocks(&a).iter().map(|b| b.2).sum();
        assert_eq!(total, a.num_params());
        assert_eq!(a.num_params(), 10 * 2 + 2 * (3 * 4 + 3 * 4 + 4 * 2) + 10 * 2 + 10);
    }

    #[test]
    fn single_token_embedding_is_the_hidden_state() {
        let p = init_params(10, 4, 3, 5).unwrap();
        let e = p.embed(&[7]).unwrap();
        let sc = gru_step(&p.data, &p.off.enc, 4, 3, p.emb_row(7), &[0.0; 4]);
        assert_eq!(e, sc.h);
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut p = init_params(12, 3, 2, 0).unwrap();
        let (o, l) = (p.off.out_w, 12 * 3 + 12);
        p.data[o..o + l].iter_mut().for_each(|x| *x = 0.0);
        let loss = reconstruction_loss(&p, &[1, 5, 7, 2]).unwrap();
        assert!((loss - (12f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn out_of_vocab_token_errors() {
        let p = init_params(10, 2, 2, 0).unwrap();
        assert!(matches!(p.embed(&[10]), Err(Error::TokenOutOfVocab { .. })));
    }

    #[test]
    fn bytes_round_trip() {
        let p = init_params(9, 3, 2, 4).unwrap();
        assert_eq!(params_from_bytes(&params_to_bytes(&p)).unwrap(), p);
        assert!(params_from_bytes(&params_to_bytes(&p)[..40]).is_err());
    }
}

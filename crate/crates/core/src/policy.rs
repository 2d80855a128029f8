//! A small image-conditioned autoregressive policy.
//!
//! Each step computes `h = tanh(W_t e(prev) + W_v pool(x) + b)` and
//! `logits = U h`, where `pool` is the per-channel pixel mean and `prev` is
//! the previous token (the last query token, or `<bos>`, at step 0).
//!
//! Parameters live in one flat vector laid out as
//! `E (V x d) | W_v (d x C) | W_t (d x d) | b (d) | U (V x d)`, row-major.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::ImageTensor;
use crate::text::tokenize;

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Exactly the given tokens, in order. No special tokens are added.
    pub fn new<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.is_empty() {
            return Err(Error::validation("vocabulary is empty"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::validation(format!(
                    "duplicate vocabulary token {t:?}"
                )));
            }
        }
        Ok(Self { tokens, index })
    }

    /// `<unk>`, `<bos>`, `<eos>` followed by the given tokens.
    pub fn with_specials<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Result<Self> {
        let all = [UNK, BOS, EOS]
            .into_iter()
            .map(String::from)
            .chain(tokens.into_iter().map(Into::into));
        Self::new(all)
    }

    /// Sorted unique tokens of the texts, plus specials. Tokenization strips
    /// the angle brackets, so text can never produce a special token.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let set: BTreeSet<String> = texts.into_iter().flat_map(tokenize).collect();
        Self::with_specials(set)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn unk(&self) -> Option<usize> {
        self.id(UNK)
    }

    pub fn bos(&self) -> Option<usize> {
        self.id(BOS)
    }

    pub fn eos(&self) -> Option<usize> {
        self.id(EOS)
    }

    /// Out-of-vocabulary tokens map to `<unk>`, or fail if there is none.
    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| {
                let t = t.as_ref();
                self.id(t).or(self.unk()).ok_or_else(|| {
                    Error::validation(format!("token {t:?} not in vocabulary and no {UNK}"))
                })
            })
            .collect()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        self.encode_tokens(&tokenize(text))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Uniform,
    Zeros,
}

/// A tokenized, pooled model input.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub pooled: Vec<f64>,
    pub prev0: usize,
    pub response: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    vocab: Vocab,
    embed_dim: usize,
    channels: usize,
    seed: u64,
    params: Vec<f64>,
}

struct Layout {
    e: usize,
    wv: usize,
    wt: usize,
    b: usize,
    u: usize,
    end: usize,
}

impl PolicyModel {
    pub fn new(
        vocab: Vocab,
        embed_dim: usize,
        channels: usize,
        seed: u64,
        init: Init,
    ) -> Result<Self> {
        if embed_dim == 0 || channels == 0 {
            return Err(Error::validation("embed_dim and channels must be positive"));
        }
        let mut model = Self {
            vocab,
            embed_dim,
            channels,
            seed,
            params: Vec::new(),
        };
        let n = model.layout().end;
        model.params = match init {
            Init::Zeros => vec![0.0; n],
            Init::Uniform => {
                let mut rng = Rng::new(seed);
                (0..n).map(|_| rng.uniform_range(-0.05, 0.05)).collect()
            }
        };
        Ok(model)
    }

    fn layout(&self) -> Layout {
        let (v, d, c) = (self.vocab.len(), self.embed_dim, self.channels);
        let e = 0;
        let wv = e + v * d;
        let wt = wv + d * c;
        let b = wt + d * d;
        let u = b + d;
        Layout {
            e,
            wv,
            wt,
            b,
            u,
            end: u + v * d,
        }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub fn encode(&self, image: &ImageTensor, query: &str, response: &str) -> Result<Encoded> {
        let response = self.vocab.encode(response)?;
        if response.is_empty() {
            return Err(Error::validation("response is empty"));
        }
        self.encode_ids(image, query, response)
    }

    /// As `encode`, with `<eos>` appended to the response.
    pub fn encode_with_eos(
        &self,
        image: &ImageTensor,
        query: &str,
        response: &str,
    ) -> Result<Encoded> {
        let eos = self
            .vocab
            .eos()
            .ok_or_else(|| Error::validation(format!("vocabulary has no {EOS}")))?;
        let mut ids = self.vocab.encode(response)?;
        ids.push(eos);
        self.encode_ids(image, query, ids)
    }

    /// `encode_with_eos` when the vocabulary has `<eos>`, else `encode`.
    pub fn encode_terminated(
        &self,
        image: &ImageTensor,
        query: &str,
        response: &str,
    ) -> Result<Encoded> {
        let x = self.encode(image, query, response)?;
        match self.vocab.eos() {
            Some(eos) => Ok(Encoded {
                response: x.response.into_iter().chain([eos]).collect(),
                ..x
            }),
            None => Ok(x),
        }
    }

    fn encode_ids(
        &self,
        image: &ImageTensor,
        query: &str,
        response: Vec<usize>,
    ) -> Result<Encoded> {
        Ok(Encoded {
            pooled: self.pool(image)?,
            prev0: self.first_prev(query)?,
            response,
        })
    }

    pub fn pool(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        if image.channels() != self.channels {
            return Err(Error::validation(format!(
                "image has {} channels, model expects {}",
                image.channels(),
                self.channels
            )));
        }
        Ok(image.channel_means())
    }

    fn first_prev(&self, query: &str) -> Result<usize> {
        match tokenize(query).last() {
            Some(t) => Ok(self.vocab.encode_tokens(&[t])?[0]),
            None => self
                .vocab
                .bos()
                .ok_or_else(|| Error::validation(format!("empty query and no {BOS} token"))),
        }
    }

    fn hidden(&self, pooled: &[f64], prev: usize) -> Vec<f64> {
        let l = self.layout();
        let (d, c) = (self.embed_dim, self.channels);
        let p = &self.params;
        let e = &p[l.e + prev * d..l.e + (prev + 1) * d];
        (0..d)
            .map(|i| {
                let mut a = p[l.b + i];
                let wt = &p[l.wt + i * d..l.wt + (i + 1) * d];
                a += wt.iter().zip(e).map(|(w, x)| w * x).sum::<f64>();
                let wv = &p[l.wv + i * c..l.wv + (i + 1) * c];
                a += wv.iter().zip(pooled).map(|(w, x)| w * x).sum::<f64>();
                a.tanh()
            })
            .collect()
    }

    fn logits(&self, h: &[f64]) -> Vec<f64> {
        let l = self.layout();
        let d = self.embed_dim;
        (0..self.vocab.len())
            .map(|v| {
                let u = &self.params[l.u + v * d..l.u + (v + 1) * d];
                u.iter().zip(h).map(|(a, b)| a * b).sum()
            })
            .collect()
    }

    /// Log-softmax of the next-token distribution.
    pub fn next_log_probs(&self, pooled: &[f64], prev: usize) -> Vec<f64> {
        log_softmax(&self.logits(&self.hidden(pooled, prev)))
    }

    pub fn seq_log_prob(&self, x: &Encoded) -> f64 {
        let mut prev = x.prev0;
        let mut total = 0.0;
        for &y in &x.response {
            total += self.next_log_probs(&x.pooled, prev)[y];
            prev = y;
        }
        total
    }

    /// Adds `scale * grad log p(x)` into `grad` and returns `log p(x)`.
    pub fn accumulate_grad(&self, x: &Encoded, scale: f64, grad: &mut [f64]) -> f64 {
        assert_eq!(grad.len(), self.params.len());
        let l = self.layout();
        let (d, c, vn) = (self.embed_dim, self.channels, self.vocab.len());
        let p = &self.params;
        let mut prev = x.prev0;
        let mut total = 0.0;
        let mut dh = vec![0.0; d];
        for &y in &x.response {
            let h = self.hidden(&x.pooled, prev);
            let lp = log_softmax(&self.logits(&h));
            total += lp[y];
            dh.iter_mut().for_each(|v| *v = 0.0);
            for v in 0..vn {
                let dz = scale * (f64::from(u8::from(v == y)) - lp[v].exp());
                let row = l.u + v * d;
                for i in 0..d {
                    grad[row + i] += dz * h[i];
                    dh[i] += dz * p[row + i];
                }
            }
            let e = l.e + prev * d;
            for i in 0..d {
                let da = dh[i] * (1.0 - h[i] * h[i]);
                grad[l.b + i] += da;
                for j in 0..d {
                    grad[l.wt + i * d + j] += da * p[e + j];
                    grad[e + j] += da * p[l.wt + i * d + j];
                }
                for k in 0..c {
                    grad[l.wv + i * c + k] += da * x.pooled[k];
                }
            }
            prev = y;
        }
        total
    }

    /// Greedy decoding. Stops at `<eos>` or after `max_len` tokens;
    /// `<unk>` and `<bos>` are never emitted.
    pub fn greedy_decode(
        &self,
        image: &ImageTensor,
        query: &str,
        max_len: usize,
    ) -> Result<Vec<String>> {
        let pooled = self.pool(image)?;
        let mut prev = self.first_prev(query)?;
        let banned = [self.vocab.unk(), self.vocab.bos()];
        let mut out = Vec::new();
        while out.len() < max_len {
            let lp = self.next_log_probs(&pooled, prev);
            let mut best: Option<usize> = None;
            for (v, &s) in lp.iter().enumerate() {
                if banned.contains(&Some(v)) {
                    continue;
                }
                if best.is_none_or(|b| s > lp[b]) {
                    best = Some(v);
                }
            }
            let Some(tok) = best else { break };
            if Some(tok) == self.vocab.eos() {
                break;
            }
            out.push(self.vocab.token(tok).to_string());
            prev = tok;
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            vocab: self.vocab.tokens.clone(),
            embed_dim: self.embed_dim,
            channels: self.channels,
            seed: self.seed,
            dtype: "f64le".into(),
            num_params: self.params.len(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format("checkpoint has no header line"))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..split])
            .map_err(|e| Error::format(format!("bad checkpoint header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT || header.dtype != "f64le" {
            return Err(Error::format(format!(
                "unsupported checkpoint {} / {}",
                header.format, header.dtype
            )));
        }
        let payload = &bytes[split + 1..];
        let mut model = Self::new(
            Vocab::new(header.vocab)?,
            header.embed_dim,
            header.channels,
            header.seed,
            Init::Zeros,
        )?;
        if header.num_params != model.params.len() || payload.len() != 8 * model.params.len() {
            return Err(Error::format(format!(
                "checkpoint payload has {} bytes, expected {}",
                payload.len(),
                8 * model.params.len()
            )));
        }
        for (p, chunk) in model.params.iter_mut().zip(payload.chunks_exact(8)) {
            *p = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        if !model.is_finite() {
            return Err(Error::format("checkpoint contains non-finite parameters"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

const CHECKPOINT_FORMAT: &str = "medpref-policy-1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    vocab: Vec<String>,
    embed_dim: usize,
    channels: usize,
    seed: u64,
    dtype: String,
    num_params: usize,
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub fn log_prob(
    model: &PolicyModel,
    image: &ImageTensor,
    query: &str,
    response: &str,
) -> Result<f64> {
    Ok(model.seq_log_prob(&model.encode(image, query, response)?))
}

pub fn log_prob_grad(
    model: &PolicyModel,
    image: &ImageTensor,
    query: &str,
    response: &str,
) -> Result<Vec<f64>> {
    let x = model.encode(image, query, response)?;
    let mut grad = vec![0.0; model.num_params()];
    model.accumulate_grad(&x, 1.0, &mut grad);
    Ok(grad)
}

/// Independent copy used as the frozen reference.
pub fn freeze_reference(model: &PolicyModel) -> PolicyModel {
    model.clone()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(c: usize, seed: u64) -> ImageTensor {
        let mut rng = Rng::new(seed);
        let data = (0..2 * 3 * c)
            .map(|_| rng.uniform_range(-1.0, 1.0) as f32)
            .collect();
        ImageTensor::new(2, 3, c, data).unwrap()
    }

    fn model(tokens: &[&str], d: usize, c: usize, seed: u64) -> PolicyModel {
        PolicyModel::new(
            Vocab::with_specials(tokens.iter().copied()).unwrap(),
            d,
            c,
            seed,
            Init::Uniform,
        )
        .unwrap()
    }

    #[test]
    fn zero_model_is_uniform() {
        let m =
            PolicyModel::new(Vocab::new(["a", "b", "c"]).unwrap(), 4, 2, 0, Init::Zeros).unwrap();
        let lp = log_prob(&m, &image(2, 1), "a", "b c a b").unwrap();
        assert!((lp - 4.0 * (1.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_three_token_vocab() {
        // d = 1, C = 1: h = tanh(wt * E[prev] + wv * pool + b), logits = U * h
        let mut m =
            PolicyModel::new(Vocab::new(["a", "b", "c"]).unwrap(), 1, 1, 0, Init::Zeros).unwrap();
        // layout: E[a], E[b], E[c], wv, wt, b, U[a], U[b], U[c]
        m.params_mut()
            .copy_from_slice(&[0.5, -1.0, 2.0, 0.3, 0.8, 0.1, 1.0, -2.0, 0.5]);
        let img = ImageTensor::new(1, 2, 1, vec![1.0, 3.0]).unwrap(); // pool = 2
                                                                      // step 0: prev = a, step 1: prev = b
        let step = |e: f64, y: usize| {
            let h = (0.8 * e + 0.3 * 2.0 + 0.1f64).tanh();
            let z = [h, -2.0 * h, 0.5 * h];
            let norm: f64 = z.iter().map(|v| v.exp()).sum();
            (z[y].exp() / norm).ln()
        };
        let expect = step(0.5, 1) + step(-1.0, 2);
        let lp = log_prob(&m, &img, "a", "b c").unwrap();
        assert!((lp - expect).abs() < 1e-12, "{lp} vs {expect}");
    }

    #[test]
    fn log_prob_nonpositive_and_normalized() {
        let m = model(&["yes", "no", "left", "right"], 6, 3, 5);
        let img = image(3, 2);
        assert!(log_prob(&m, &img, "is it", "yes left").unwrap() <= 0.0);
        let pooled = m.pool(&img).unwrap();
        for prev in 0..m.vocab().len() {
            let total: f64 = m
                .next_log_probs(&pooled, prev)
                .iter()
                .map(|v| v.exp())
                .sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_response_and_oov() {
        let m = model(&["yes", "no"], 4, 3, 0);
        let img = image(3, 0);
        assert!(log_prob(&m, &img, "q", "").is_err());
        assert!(log_prob(&m, &img, "q", "...").is_err());
        // OOV maps to <unk>
        let a = log_prob(&m, &img, "q", "zebra").unwrap();
        let b = log_prob(&m, &img, "q", "giraffe").unwrap();
        assert_eq!(a, b);
        let plain = PolicyModel::new(Vocab::new(["a"]).unwrap(), 2, 3, 0, Init::Zeros).unwrap();
        assert!(log_prob(&plain, &img, "a", "b").is_err());
        assert!(log_prob(&plain, &img, "", "a").is_err());
        assert!(log_prob(&m, &image(2, 0), "q", "yes").is_err());
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        let scale = a.abs().max(b.abs());
        if scale < 1e-7 {
            0.0
        } else {
            (a - b).abs() / scale
        }
    }

    fn finite_diff(m: &PolicyModel, x: &Encoded, h: f64) -> Vec<f64> {
        let mut probe = m.clone();
        (0..m.num_params())
            .map(|i| {
                let orig = probe.params[i];
                probe.params[i] = orig + h;
                let up = probe.seq_log_prob(x);
                probe.params[i] = orig - h;
                let down = probe.seq_log_prob(x);
                probe.params[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences_five_tokens() {
        let m = PolicyModel::new(
            Vocab::new(["a", "b", "c", "d", "e"]).unwrap(),
            4,
            3,
            9,
            Init::Uniform,
        )
        .unwrap();
        let x = m.encode(&image(3, 4), "a c", "b e a d").unwrap();
        let mut g = vec![0.0; m.num_params()];
        m.accumulate_grad(&x, 1.0, &mut g);
        let fd = finite_diff(&m, &x, 1e-5);
        for (i, (a, n)) in g.iter().zip(&fd).enumerate() {
            assert!(rel_err(*a, *n) < 1e-4, "param {i}: {a} vs {n}");
        }
    }

    #[test]
    fn gradient_check_random_points() {
        let base = PolicyModel::new(
            Vocab::with_specials(["a", "b", "c", "d", "e"]).unwrap(),
            3,
            2,
            0,
            Init::Zeros,
        )
        .unwrap();
        let mut rng = Rng::new(17);
        for point in 0..100 {
            let mut m = base.clone();
            for p in m.params_mut() {
                *p = rng.uniform_range(-1.0, 1.0);
            }
            let query = if point % 10 == 0 { "" } else { "a" };
            let x = m.encode(&image(2, point), query, "b c e").unwrap();
            let mut g = vec![0.0; m.num_params()];
            m.accumulate_grad(&x, 1.0, &mut g);
            let fd = finite_diff(&m, &x, 1e-5);
            let worst = g
                .iter()
                .zip(&fd)
                .map(|(a, n)| rel_err(*a, *n))
                .fold(0.0, f64::max);
            assert!(worst < 1e-4, "point {point}: {worst}");
        }
    }

    #[test]
    fn empty_query_uses_bos() {
        let m = model(&["yes"], 4, 3, 1);
        let g = log_prob_grad(&m, &image(3, 0), "", "yes").unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
        let bos = m.vocab().bos().unwrap();
        let x = m.encode(&image(3, 0), "", "yes").unwrap();
        assert_eq!(x.prev0, bos);
    }

    #[test]
    fn gradient_scale_is_linear() {
        let m = model(&["yes", "no"], 4, 3, 1);
        let x = m.encode(&image(3, 0), "q", "yes no").unwrap();
        let mut g1 = vec![0.0; m.num_params()];
        let mut g2 = vec![0.0; m.num_params()];
        m.accumulate_grad(&x, 1.0, &mut g1);
        m.accumulate_grad(&x, -2.5, &mut g2);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((b + 2.5 * a).abs() < 1e-12);
        }
    }

    #[test]
    fn reference_is_independent() {
        let mut m = model(&["yes", "no"], 4, 3, 3);
        let reference = freeze_reference(&m);
        let img = image(3, 0);
        let before = log_prob(&reference, &img, "q", "no").unwrap();
        assert_eq!(before, log_prob(&m, &img, "q", "no").unwrap());
        for _ in 0..10 {
            let g = log_prob_grad(&m, &img, "q", "no").unwrap();
            for (p, d) in m.params_mut().iter_mut().zip(g) {
                *p += 0.1 * d;
            }
        }
        assert_ne!(log_prob(&m, &img, "q", "no").unwrap(), before);
        assert_eq!(
            log_prob(&reference, &img, "q", "no").unwrap().to_bits(),
            before.to_bits()
        );
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = model(&["yes", "no", "left"], 5, 3, 8);
        let back = PolicyModel::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back, m);
        let img = image(3, 1);
        let a = log_prob(&m, &img, "q", "left no").unwrap();
        let b = log_prob(&back, &img, "q", "left no").unwrap();
        assert!((a - b).abs() <= 1e-12);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        assert_eq!(PolicyModel::load(&path).unwrap(), m);

        let mut bytes = m.to_bytes();
        bytes.pop();
        assert!(matches!(
            PolicyModel::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
        assert!(PolicyModel::from_bytes(b"{}").is_err());
    }

    #[test]
    fn greedy_decode_learns_to_stop() {
        let mut m = model(&["yes", "no"], 8, 3, 2);
        let img = image(3, 0);
        let x = m.encode_with_eos(&img, "is it", "no").unwrap();
        assert_eq!(x.response.len(), 2);
        for _ in 0..300 {
            let mut g = vec![0.0; m.num_params()];
            m.accumulate_grad(&x, 1.0, &mut g);
            for (p, d) in m.params_mut().iter_mut().zip(g) {
                *p += 0.5 * d;
            }
        }
        assert_eq!(m.greedy_decode(&img, "is it", 64).unwrap(), ["no"]);
        assert!(m.greedy_decode(&img, "is it", 0).unwrap().is_empty());
    }

    #[test]
    fn vocab_from_texts() {
        let v = Vocab::from_texts(["Yes, it is.", "no <eos>"]).unwrap();
        assert_eq!(v.tokens(), [UNK, BOS, EOS, "eos", "is", "it", "no", "yes"]);
        assert!(Vocab::new(["a", "a"]).is_err());
        assert!(Vocab::new(Vec::<String>::new()).is_err());
    }
}

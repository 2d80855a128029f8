//! Evaluation metrics and greedy-decoding evaluation.
//!
//! All text metrics work on tokens from [`crate::text::tokenize`].

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::dataset::{MedicalSample, Task};
use crate::error::{Error, Result};
use crate::policy::PolicyModel;
use crate::text::tokenize;

pub const BLEU_EPS: f64 = 1e-9;
pub const ROUGE_BETA: f64 = 1.2;
pub const MAX_DECODE_LEN: usize = 64;

/// Correct iff the prediction has the reference polarity and not the other one.
pub fn closed_correct(prediction: &str, reference: &str) -> Result<bool> {
    let want = match tokenize(reference).as_slice() {
        [t] if t == "yes" => "yes",
        [t] if t == "no" => "no",
        _ => {
            return Err(Error::validation(format!(
                "closed reference must be yes or no, got {reference:?}"
            )))
        }
    };
    let other = if want == "yes" { "no" } else { "yes" };
    let toks = tokenize(prediction);
    Ok(toks.iter().any(|t| t == want) && !toks.iter().any(|t| t == other))
}

pub fn closed_accuracy<S: AsRef<str>>(predictions: &[S], references: &[S]) -> Result<f64> {
    if predictions.len() != references.len() {
        return Err(Error::validation(format!(
            "{} predictions for {} references",
            predictions.len(),
            references.len()
        )));
    }
    if references.is_empty() {
        return Err(Error::validation("no references"));
    }
    let mut correct = 0;
    for (p, r) in predictions.iter().zip(references) {
        correct += usize::from(closed_correct(p.as_ref(), r.as_ref())?);
    }
    Ok(correct as f64 / references.len() as f64)
}

/// Share of unique reference tokens present in the prediction.
pub fn open_recall(prediction: &str, reference: &str) -> Result<f64> {
    let mut reference = tokenize(reference);
    reference.sort();
    reference.dedup();
    if reference.is_empty() {
        return Err(Error::validation("open reference is empty"));
    }
    let pred = tokenize(prediction);
    let hits = reference.iter().filter(|t| pred.contains(t)).count();
    Ok(hits as f64 / reference.len() as f64)
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Clipped n-gram precision, with zero matches smoothed to `eps / total`.
pub fn modified_precision(pred: &[String], reference: &[String], n: usize) -> f64 {
    let total = pred.len().saturating_sub(n - 1);
    if total == 0 {
        return BLEU_EPS;
    }
    let rc = ngram_counts(reference, n);
    let matches: usize = ngram_counts(pred, n)
        .into_iter()
        .map(|(g, c)| c.min(rc.get(g).copied().unwrap_or(0)))
        .sum();
    if matches == 0 {
        BLEU_EPS / total as f64
    } else {
        matches as f64 / total as f64
    }
}

pub fn brevity_penalty(pred_len: usize, ref_len: usize) -> f64 {
    if pred_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / pred_len as f64).exp()
    }
}

/// Cumulative BLEU-n: geometric mean of precisions 1..=n times the brevity penalty.
pub fn bleu_n(prediction: &str, reference: &str, n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(Error::validation(format!(
            "BLEU order must be 1..=4, got {n}"
        )));
    }
    let pred = tokenize(prediction);
    let reference = tokenize(reference);
    if pred.is_empty() || reference.is_empty() {
        return Ok(0.0);
    }
    let log_mean = (1..=n)
        .map(|k| modified_precision(&pred, &reference, k).ln())
        .sum::<f64>()
        / n as f64;
    Ok(brevity_penalty(pred.len(), reference.len()) * log_mean.exp())
}

pub fn bleu_avg(prediction: &str, reference: &str) -> Result<f64> {
    let mut total = 0.0;
    for n in 1..=4 {
        total += bleu_n(prediction, reference, n)?;
    }
    Ok(total / 4.0)
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_tokens(pred: &[String], reference: &[String]) -> f64 {
    let lcs = lcs_len(pred, reference);
    if lcs == 0 {
        return 0.0;
    }
    let r = lcs as f64 / reference.len() as f64;
    let p = lcs as f64 / pred.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * r * p / (r + b2 * p)
}

pub fn rouge_l(prediction: &str, reference: &str) -> f64 {
    rouge_l_tokens(&tokenize(prediction), &tokenize(reference))
}

/// Number of chunks in an alignment given as `(pred, ref)` pairs sorted by `pred`.
pub fn count_chunks(alignment: &[(usize, usize)]) -> usize {
    if alignment.is_empty() {
        return 0;
    }
    1 + alignment
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
}

/// Exact-match alignment: maximum matches, then fewest chunks.
/// Returns `(matches, chunks)`.
pub fn meteor_alignment(pred: &[String], reference: &[String]) -> (usize, usize) {
    Aligner::new(pred, reference).solve()
}

const SEARCH_BUDGET: usize = 200_000;

struct Aligner<'a> {
    pred: &'a [String],
    candidates: Vec<Vec<usize>>,
    /// word id per pred position
    word: Vec<usize>,
    /// matches still required per word
    need: Vec<usize>,
    /// pred occurrences of each word at positions >= i, per i
    remaining: Vec<Vec<usize>>,
    memo: HashMap<(usize, Vec<u64>, usize), usize>,
    nodes: usize,
}

const NONE: usize = usize::MAX;

impl<'a> Aligner<'a> {
    fn new(pred: &'a [String], reference: &'a [String]) -> Self {
        let mut ids: HashMap<&str, usize> = HashMap::new();
        let word: Vec<usize> = pred
            .iter()
            .map(|t| {
                let n = ids.len();
                *ids.entry(t.as_str()).or_insert(n)
            })
            .collect();
        let nw = ids.len();
        let mut pred_count = vec![0; nw];
        word.iter().for_each(|&w| pred_count[w] += 1);
        let mut ref_count = vec![0; nw];
        for t in reference {
            if let Some(&w) = ids.get(t.as_str()) {
                ref_count[w] += 1;
            }
        }
        let need = (0..nw).map(|w| pred_count[w].min(ref_count[w])).collect();
        let candidates = pred
            .iter()
            .map(|t| {
                (0..reference.len())
                    .filter(|&j| &reference[j] == t)
                    .collect()
            })
            .collect();
        let mut remaining = vec![vec![0; nw]; pred.len() + 1];
        for i in (0..pred.len()).rev() {
            remaining[i] = remaining[i + 1].clone();
            remaining[i][word[i]] += 1;
        }
        Self {
            pred,
            candidates,
            word,
            need,
            remaining,
            memo: HashMap::new(),
            nodes: 0,
        }
    }

    fn solve(mut self) -> (usize, usize) {
        let m: usize = self.need.iter().sum();
        if m == 0 {
            return (0, 0);
        }
        let words = (self.candidates.iter().flatten().max().unwrap() / 64) + 1;
        let mut used = vec![0u64; words];
        let mut need = self.need.clone();
        match self.search(0, &mut used, NONE, &mut need) {
            Some(chunks) => (m, chunks),
            None => (m, self.greedy()),
        }
    }

    /// Fewest chunks for positions `i..`, or `None` once the budget is spent.
    fn search(
        &mut self,
        i: usize,
        used: &mut Vec<u64>,
        prev: usize,
        need: &mut Vec<usize>,
    ) -> Option<usize> {
        if i == self.pred.len() {
            return Some(0);
        }
        self.nodes += 1;
        if self.nodes > SEARCH_BUDGET {
            return None;
        }
        let key = (i, used.clone(), prev);
        if let Some(&v) = self.memo.get(&key) {
            return Some(v);
        }
        let w = self.word[i];
        let mut best = usize::MAX;
        if need[w] > 0 {
            for k in 0..self.candidates[i].len() {
                let j = self.candidates[i][k];
                if used[j / 64] >> (j % 64) & 1 == 1 {
                    continue;
                }
                let cost = usize::from(!(prev != NONE && j == prev + 1));
                used[j / 64] |= 1 << (j % 64);
                need[w] -= 1;
                let rest = self.search(i + 1, used, j, need);
                need[w] += 1;
                used[j / 64] &= !(1 << (j % 64));
                best = best.min(cost + rest?);
            }
        }
        // skipping is allowed only if later occurrences can still cover the need
        if self.remaining[i + 1][w] >= need[w] {
            best = best.min(self.search(i + 1, used, NONE, need)?);
        }
        self.memo.insert(key, best);
        Some(best)
    }

    /// Left to right, preferring the slot that extends the current chunk.
    fn greedy(&self) -> usize {
        let mut used = vec![false; self.candidates.iter().flatten().max().map_or(0, |m| m + 1)];
        let mut alignment = Vec::new();
        let mut prev = NONE;
        for (i, cands) in self.candidates.iter().enumerate() {
            let free: Vec<usize> = cands.iter().copied().filter(|&j| !used[j]).collect();
            let pick = free
                .iter()
                .copied()
                .find(|&j| prev != NONE && j == prev + 1)
                .or(free.first().copied());
            prev = NONE;
            if let Some(j) = pick {
                used[j] = true;
                alignment.push((i, j));
                prev = j;
            }
        }
        count_chunks(&alignment)
    }
}

pub fn meteor_from_counts(matches: usize, chunks: usize, pred_len: usize, ref_len: usize) -> f64 {
    if matches == 0 {
        return 0.0;
    }
    let m = matches as f64;
    let p = m / pred_len as f64;
    let r = m / ref_len as f64;
    let f = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m).powi(3);
    f * (1.0 - penalty)
}

pub fn meteor_tokens(pred: &[String], reference: &[String]) -> f64 {
    if pred.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let (m, chunks) = meteor_alignment(pred, reference);
    meteor_from_counts(m, chunks, pred.len(), reference.len())
}

pub fn meteor(prediction: &str, reference: &str) -> f64 {
    meteor_tokens(&tokenize(prediction), &tokenize(reference))
}

/// Anything that can answer a sample's query.
pub trait Responder {
    fn respond(&self, sample: &MedicalSample, max_len: usize) -> Result<String>;
}

impl Responder for PolicyModel {
    fn respond(&self, sample: &MedicalSample, max_len: usize) -> Result<String> {
        Ok(self
            .greedy_decode(&sample.image, &sample.query, max_len)?
            .join(" "))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub id: String,
    pub prediction: String,
    pub reference: String,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: Task,
    pub samples: usize,
    /// Corpus means, scaled by 100.
    pub means: BTreeMap<String, f64>,
    pub rows: Vec<SampleRow>,
}

fn sample_metrics(task: Task, pred: &str, reference: &str) -> Result<BTreeMap<String, f64>> {
    let mut m = BTreeMap::new();
    match task {
        Task::ClosedQa => {
            m.insert(
                "closed_accuracy".into(),
                f64::from(u8::from(closed_correct(pred, reference)?)),
            );
        }
        Task::OpenQa => {
            m.insert("open_recall".into(), open_recall(pred, reference)?);
        }
        Task::Report => {
            for n in 1..=4 {
                m.insert(format!("bleu{n}"), bleu_n(pred, reference, n)?);
            }
            m.insert("bleu_avg".into(), bleu_avg(pred, reference)?);
            m.insert("rouge_l".into(), rouge_l(pred, reference));
            m.insert("meteor".into(), meteor(pred, reference));
        }
    }
    Ok(m)
}

/// Decode every sample and score it with the task's metrics.
pub fn evaluate(
    policy: &dyn Responder,
    dataset: &[MedicalSample],
    task: Task,
) -> Result<MetricReport> {
    if dataset.is_empty() {
        return Err(Error::validation("evaluation dataset is empty"));
    }
    if let Some(s) = dataset.iter().find(|s| s.task != task) {
        return Err(Error::validation(format!(
            "sample {} has task {}, expected {task}",
            s.id, s.task
        )));
    }
    let mut rows = Vec::with_capacity(dataset.len());
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    for s in dataset {
        let prediction = policy
            .respond(s, MAX_DECODE_LEN)
            .map_err(|e| e.for_sample(&s.id))?;
        let metrics =
            sample_metrics(task, &prediction, &s.answer).map_err(|e| e.for_sample(&s.id))?;
        for (k, v) in &metrics {
            *sums.entry(k.clone()).or_insert(0.0) += v;
        }
        rows.push(SampleRow {
            id: s.id.clone(),
            prediction,
            reference: s.answer.clone(),
            metrics,
        });
    }
    let n = dataset.len() as f64;
    Ok(MetricReport {
        task,
        samples: dataset.len(),
        means: sums.into_iter().map(|(k, v)| (k, 100.0 * v / n)).collect(),
        rows,
    })
}

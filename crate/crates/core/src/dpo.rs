//! Preference losses and the SGD trainer.
//!
//! For a pair with preferred response `y_w` on image `x` and dispreferred
//! response `y_l` on image `x*`, the margin is
//! `d = alpha * (log pi(y_w|x) - log ref(y_w|x)) - alpha * (log pi(y_l|x*) - log ref(y_l|x*))`.
//! Text pairs use `x* = x`; lesion pairs use the noised image and `y_l = y_w`.
//! The weighted loss is the batch mean of `-s' log sigmoid(d)`. Responses are
//! scored with a trailing `<eos>` when the vocabulary has one, so training
//! also shapes where generation stops.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::MedicalSample;
use crate::error::{Error, Result};
use crate::pair::PreferencePair;
use crate::policy::{Encoded, PolicyModel};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weighted: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            learning_rate: 1.0,
            epochs: 20,
            batch_size: 8,
            seed: 0,
            weighted: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::validation(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        // zero is allowed: it makes training a no-op
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::validation("epochs and batch_size must be positive"));
        }
        Ok(())
    }
}

/// `-log sigmoid(d)`, stable for large `|d|`.
pub fn neg_log_sigmoid(d: f64) -> f64 {
    if d >= 0.0 {
        (-d).exp().ln_1p()
    } else {
        -d + d.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Margin from four sequence log-probabilities.
pub fn margin(alpha: f64, policy_w: f64, ref_w: f64, policy_l: f64, ref_l: f64) -> f64 {
    alpha * (policy_w - ref_w) - alpha * (policy_l - ref_l)
}

/// A pair tokenized against a policy, with reference log-probs cached.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub chosen: Encoded,
    pub rejected: Encoded,
    pub ref_chosen: f64,
    pub ref_rejected: f64,
    pub weight: f64,
}

impl PreparedPair {
    pub fn margin(&self, policy: &PolicyModel, alpha: f64) -> f64 {
        margin(
            alpha,
            policy.seq_log_prob(&self.chosen),
            self.ref_chosen,
            policy.seq_log_prob(&self.rejected),
            self.ref_rejected,
        )
    }
}

pub fn prepare(
    policy: &PolicyModel,
    reference: &PolicyModel,
    pair: &PreferencePair,
    weighted: bool,
) -> Result<PreparedPair> {
    let weight = if weighted {
        pair.weight
            .ok_or_else(|| Error::validation(format!("pair {} has no weight", pair.sample_id)))?
    } else {
        1.0
    };
    if !weight.is_finite() {
        return Err(Error::validation(format!(
            "pair {} has a non-finite weight",
            pair.sample_id
        )));
    }
    let chosen = policy.encode_terminated(&pair.input_image, &pair.query, &pair.preferred)?;
    let rejected =
        policy.encode_terminated(pair.dispreferred_input(), &pair.query, &pair.dispreferred)?;
    Ok(PreparedPair {
        ref_chosen: reference.seq_log_prob(&chosen),
        ref_rejected: reference.seq_log_prob(&rejected),
        chosen,
        rejected,
        weight,
    })
}

pub fn prepare_all(
    policy: &PolicyModel,
    reference: &PolicyModel,
    pairs: &[PreferencePair],
    weighted: bool,
) -> Result<Vec<PreparedPair>> {
    pairs
        .iter()
        .map(|p| prepare(policy, reference, p, weighted).map_err(|e| e.for_sample(&p.sample_id)))
        .collect()
}

pub fn pair_margin(
    policy: &PolicyModel,
    reference: &PolicyModel,
    pair: &PreferencePair,
    config: &TrainConfig,
) -> Result<f64> {
    Ok(prepare(policy, reference, pair, config.weighted)?.margin(policy, config.alpha))
}

fn mean_loss(policy: &PolicyModel, batch: &[PreparedPair], alpha: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::validation("batch is empty"));
    }
    let total: f64 = batch
        .iter()
        .map(|p| p.weight * neg_log_sigmoid(p.margin(policy, alpha)))
        .sum();
    Ok(total / batch.len() as f64)
}

/// Unweighted loss: mean of `-log sigmoid(d)`.
pub fn dpo_loss(
    policy: &PolicyModel,
    reference: &PolicyModel,
    batch: &[PreferencePair],
    config: &TrainConfig,
) -> Result<f64> {
    mean_loss(
        policy,
        &prepare_all(policy, reference, batch, false)?,
        config.alpha,
    )
}

/// Weighted loss: mean of `-s' log sigmoid(d)`. Every pair needs a weight.
pub fn mmedpo_loss(
    policy: &PolicyModel,
    reference: &PolicyModel,
    batch: &[PreferencePair],
    config: &TrainConfig,
) -> Result<f64> {
    mean_loss(
        policy,
        &prepare_all(policy, reference, batch, true)?,
        config.alpha,
    )
}

/// Gradient of the batch loss; returns the loss alongside.
pub fn prepared_grad(policy: &PolicyModel, batch: &[PreparedPair], alpha: f64) -> (f64, Vec<f64>) {
    let n = batch.len() as f64;
    let mut grad = vec![0.0; policy.num_params()];
    let mut loss = 0.0;
    for p in batch {
        let d = p.margin(policy, alpha);
        loss += p.weight * neg_log_sigmoid(d);
        let c = -p.weight * alpha * sigmoid(-d) / n;
        policy.accumulate_grad(&p.chosen, c, &mut grad);
        policy.accumulate_grad(&p.rejected, -c, &mut grad);
    }
    (loss / n, grad)
}

/// Gradient of the weighted loss (or the plain one when `config.weighted`
/// is false) with respect to the policy parameters.
pub fn loss_grad(
    policy: &PolicyModel,
    reference: &PolicyModel,
    batch: &[PreferencePair],
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::validation("batch is empty"));
    }
    let prepared = prepare_all(policy, reference, batch, config.weighted)?;
    Ok(prepared_grad(policy, &prepared, config.alpha).1)
}

/// Fraction of pairs with a strictly positive margin.
pub fn preference_accuracy(policy: &PolicyModel, prepared: &[PreparedPair], alpha: f64) -> f64 {
    if prepared.is_empty() {
        return 0.0;
    }
    let wins = prepared
        .iter()
        .filter(|p| p.margin(policy, alpha) > 0.0)
        .count();
    wins as f64 / prepared.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub mean_margin: Option<f64>,
}

pub fn trace_csv(trace: &[EpochStats]) -> String {
    let mut out = String::from("epoch,loss,mean_margin\n");
    for s in trace {
        let m = s.mean_margin.map(|m| m.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{}", s.epoch, s.loss, m).unwrap();
    }
    out
}

fn sgd_loop<G, S>(
    policy: &mut PolicyModel,
    n: usize,
    config: &TrainConfig,
    rng: &mut Rng,
    mut batch_grad: G,
    mut stats: S,
) -> Result<Vec<EpochStats>>
where
    G: FnMut(&PolicyModel, &[usize]) -> (f64, Vec<f64>),
    S: FnMut(&PolicyModel, usize) -> EpochStats,
{
    config.validate()?;
    if n == 0 {
        return Err(Error::validation("no training examples"));
    }
    let mut trace = vec![stats(policy, 0)];
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=config.epochs {
        rng.shuffle(&mut order);
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let (loss, grad) = batch_grad(policy, idx);
            let diverged = |message: String| Error::Training {
                epoch,
                batch: b + 1,
                message,
            };
            if !loss.is_finite() {
                return Err(diverged(format!("loss is {loss}")));
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(diverged("non-finite gradient".into()));
            }
            for (p, g) in policy.params_mut().iter_mut().zip(&grad) {
                *p -= config.learning_rate * g;
            }
            if !policy.is_finite() {
                return Err(diverged("non-finite parameters after update".into()));
            }
        }
        let s = stats(policy, epoch);
        if !s.loss.is_finite() {
            return Err(Error::Training {
                epoch,
                batch: 0,
                message: format!("epoch loss is {}", s.loss),
            });
        }
        log::debug!("epoch {epoch}: loss {:.6}", s.loss);
        trace.push(s);
    }
    Ok(trace)
}

/// SGD on the (weighted) preference loss. The trace has one row per epoch,
/// with row 0 taken before any update; losses are over the full pair set.
pub fn train(
    policy: &PolicyModel,
    reference: &PolicyModel,
    pairs: &[PreferencePair],
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<(PolicyModel, Vec<EpochStats>)> {
    let prepared = prepare_all(policy, reference, pairs, config.weighted)?;
    let mut model = policy.clone();
    let alpha = config.alpha;
    let trace = sgd_loop(
        &mut model,
        prepared.len(),
        config,
        rng,
        |m, idx| {
            let batch: Vec<PreparedPair> = idx.iter().map(|&i| prepared[i].clone()).collect();
            prepared_grad(m, &batch, alpha)
        },
        |m, epoch| {
            let margins: Vec<f64> = prepared.iter().map(|p| p.margin(m, alpha)).collect();
            let n = margins.len() as f64;
            let loss = prepared
                .iter()
                .zip(&margins)
                .map(|(p, &d)| p.weight * neg_log_sigmoid(d))
                .sum::<f64>()
                / n;
            EpochStats {
                epoch,
                loss,
                mean_margin: Some(margins.iter().sum::<f64>() / n),
            }
        },
    )?;
    Ok((model, trace))
}

/// Maximum likelihood on the ground-truth answers, each followed by `<eos>`.
pub fn train_sft(
    policy: &PolicyModel,
    samples: &[MedicalSample],
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<(PolicyModel, Vec<EpochStats>)> {
    let encoded: Vec<Encoded> = samples
        .iter()
        .map(|s| {
            policy
                .encode_with_eos(&s.image, &s.query, &s.answer)
                .map_err(|e| e.for_sample(&s.id))
        })
        .collect::<Result<_>>()?;
    let mut model = policy.clone();
    let trace = sgd_loop(
        &mut model,
        encoded.len(),
        config,
        rng,
        |m, idx| {
            let n = idx.len() as f64;
            let mut grad = vec![0.0; m.num_params()];
            let mut loss = 0.0;
            for &i in idx {
                loss -= m.accumulate_grad(&encoded[i], -1.0 / n, &mut grad);
            }
            (loss / n, grad)
        },
        |m, epoch| EpochStats {
            epoch,
            loss: -encoded.iter().map(|x| m.seq_log_prob(x)).sum::<f64>() / encoded.len() as f64,
            mean_margin: None,
        },
    )?;
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Task;
    use crate::pair::Source;
    use crate::policy::{Init, Vocab};
    use crate::tensor::ImageTensor;
    use std::f64::consts::LN_2;

    fn img(seed: u64, shift: f32) -> ImageTensor {
        let mut rng = Rng::new(seed);
        let data = (0..2 * 2 * 3)
            .map(|_| rng.uniform_range(0.0, 1.0) as f32 + shift)
            .collect();
        ImageTensor::new(2, 2, 3, data).unwrap()
    }

    fn model(seed: u64) -> PolicyModel {
        let vocab = Vocab::with_specials(["yes", "no", "left", "right", "mass"]).unwrap();
        PolicyModel::new(vocab, 6, 3, seed, Init::Uniform).unwrap()
    }

    fn text_pair(i: u64, w: &str, l: &str, weight: Option<f64>) -> PreferencePair {
        PreferencePair {
            sample_id: format!("t{i}"),
            input_image: img(i, 0.0),
            dispreferred_image: None,
            query: "is it".into(),
            preferred: w.into(),
            dispreferred: l.into(),
            raw_score: None,
            weight,
            source: Source::TextHallucination,
        }
    }

    fn lesion_pair(i: u64, weight: Option<f64>) -> PreferencePair {
        PreferencePair {
            sample_id: format!("v{i}"),
            input_image: img(i, 0.0),
            dispreferred_image: Some(img(i + 100, 1.0)),
            query: "where".into(),
            preferred: "left mass".into(),
            dispreferred: "left mass".into(),
            raw_score: None,
            weight,
            source: Source::LesionNoise,
        }
    }

    fn batch(weights: &[f64]) -> Vec<PreferencePair> {
        let answers = [
            ("yes", "no"),
            ("no", "yes"),
            ("left", "right"),
            ("right mass", "left"),
        ];
        weights
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                if i % 3 == 2 {
                    lesion_pair(i as u64, Some(w))
                } else {
                    let (a, b) = answers[i % answers.len()];
                    text_pair(i as u64, a, b, Some(w))
                }
            })
            .collect()
    }

    fn cfg(weighted: bool) -> TrainConfig {
        TrainConfig {
            weighted,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn scalar_values() {
        assert!((margin(1.0, -1.0, -1.2, -2.0, -1.5) - 0.7).abs() < 1e-12);
        assert!((margin(2.0, -1.0, -1.2, -2.0, -1.5) - 1.4).abs() < 1e-12);
        assert!((neg_log_sigmoid(0.7) - 0.403186).abs() < 1e-6);
        assert!((0.75 * neg_log_sigmoid(0.7) - 0.302390).abs() < 1e-6);
        assert_eq!(neg_log_sigmoid(0.0), LN_2);
        assert!(neg_log_sigmoid(800.0) >= 0.0 && neg_log_sigmoid(-800.0) == 800.0);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) == 1.0);
    }

    #[test]
    fn identical_policy_anchors() {
        let m = model(1);
        let r = m.clone();
        let pairs = batch(&[0.75, 1.25, 1.0, 0.9, 1.1]);
        for p in &pairs {
            assert_eq!(pair_margin(&m, &r, p, &cfg(true)).unwrap(), 0.0);
        }
        assert_eq!(dpo_loss(&m, &r, &pairs, &cfg(false)).unwrap(), LN_2);
        let two = batch(&[0.75, 1.25]);
        assert!((mmedpo_loss(&m, &r, &two, &cfg(true)).unwrap() - LN_2).abs() < 1e-15);
    }

    #[test]
    fn unit_weights_reduce_to_dpo() {
        let r = model(1);
        let m = model(2);
        let pairs = batch(&[1.0; 6]);
        let a = dpo_loss(&m, &r, &pairs, &cfg(false)).unwrap();
        let b = mmedpo_loss(&m, &r, &pairs, &cfg(true)).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(a > 0.0);
    }

    #[test]
    fn missing_weight_errors() {
        let r = model(1);
        let pairs = vec![text_pair(0, "yes", "no", None)];
        assert!(pair_margin(&r, &r, &pairs[0], &cfg(true)).is_err());
        assert!(pair_margin(&r, &r, &pairs[0], &cfg(false)).is_ok());
        assert!(mmedpo_loss(&r, &r, &pairs, &cfg(true)).is_err());
        assert!(dpo_loss(&r, &r, &pairs, &cfg(true)).is_ok());
        assert!(dpo_loss(&r, &r, &[], &cfg(true)).is_err());
        assert!(loss_grad(&r, &r, &pairs, &cfg(true)).is_err());
    }

    #[test]
    fn loss_linear_in_weight() {
        let r = model(1);
        let m = model(2);
        let at = |w: f64| {
            let mut pairs = batch(&[1.0, 1.0, 1.0]);
            pairs[1].weight = Some(w);
            mmedpo_loss(&m, &r, &pairs, &cfg(true)).unwrap()
        };
        let d = pair_margin(&m, &r, &batch(&[1.0, 1.0, 1.0])[1], &cfg(true)).unwrap();
        let slope = (at(1.25) - at(0.75)) / 0.5;
        assert!((slope - neg_log_sigmoid(d) / 3.0).abs() < 1e-12);
        assert!(slope > 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let r = model(1);
        let mut m = model(2);
        let mut rng = Rng::new(4);
        for p in m.params_mut() {
            *p += rng.uniform_range(-0.5, 0.5);
        }
        let pairs = batch(&[0.8, 1.2, 1.0, 0.75, 1.25]);
        let c = TrainConfig {
            alpha: 0.7,
            ..cfg(true)
        };
        let g = loss_grad(&m, &r, &pairs, &c).unwrap();
        let mut probe = m.clone();
        for i in 0..m.num_params() {
            let orig = probe.params()[i];
            probe.params_mut()[i] = orig + 1e-5;
            let up = mmedpo_loss(&probe, &r, &pairs, &c).unwrap();
            probe.params_mut()[i] = orig - 1e-5;
            let down = mmedpo_loss(&probe, &r, &pairs, &c).unwrap();
            probe.params_mut()[i] = orig;
            let fd = (up - down) / 2e-5;
            let scale = g[i].abs().max(fd.abs());
            if scale > 1e-7 {
                assert!(
                    (g[i] - fd).abs() / scale < 1e-4,
                    "param {i}: {} vs {fd}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn gradient_at_reference_and_weight_scaling() {
        let m = model(3);
        let r = m.clone();
        let pair = text_pair(0, "yes", "no", Some(0.8));
        let c = cfg(true);
        let g = loss_grad(&m, &r, std::slice::from_ref(&pair), &c).unwrap();
        let seq_grad = |resp: &str| {
            let x = m
                .encode_terminated(&pair.input_image, &pair.query, resp)
                .unwrap();
            let mut g = vec![0.0; m.num_params()];
            m.accumulate_grad(&x, 1.0, &mut g);
            g
        };
        let (gw, gl) = (seq_grad("yes"), seq_grad("no"));
        for i in 0..g.len() {
            let expect = -0.8 * c.alpha * 0.5 * (gw[i] - gl[i]);
            assert!((g[i] - expect).abs() < 1e-14);
        }
        let doubled = text_pair(0, "yes", "no", Some(1.6));
        let g2 = loss_grad(&m, &r, &[doubled], &c).unwrap();
        for (a, b) in g.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_learning_rate_is_noop() {
        let m = model(1);
        let r = m.clone();
        let pairs = batch(&[1.0, 0.8, 1.2, 1.1]);
        let c = TrainConfig {
            learning_rate: 0.0,
            epochs: 4,
            ..cfg(true)
        };
        let (out, trace) = train(&m, &r, &pairs, &c, &mut Rng::new(0)).unwrap();
        assert_eq!(out.params(), m.params());
        assert_eq!(trace.len(), 5);
        assert!(trace.iter().all(|s| s.loss == trace[0].loss));
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let r = model(1);
        let pairs = batch(&[1.0, 0.8, 1.2, 1.1, 0.9, 1.25, 0.75, 1.0]);
        let c = TrainConfig {
            epochs: 50,
            batch_size: 3,
            ..cfg(true)
        };
        let (a, trace) = train(&r, &r, &pairs, &c, &mut Rng::new(5)).unwrap();
        assert!(trace.last().unwrap().loss < trace[0].loss);
        let (b, _) = train(&r, &r, &pairs, &c, &mut Rng::new(5)).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let csv = trace_csv(&trace);
        assert!(csv.starts_with("epoch,loss,mean_margin\n0,"));
        assert_eq!(csv.lines().count(), 52);
    }

    #[test]
    fn margin_grows_across_seeds() {
        for seed in 0..10 {
            let r = model(seed);
            let pairs = batch(&[1.0, 0.8, 1.2, 1.1, 0.9, 1.25]);
            let c = TrainConfig {
                epochs: 5,
                seed,
                ..cfg(true)
            };
            let prepared = prepare_all(&r, &r, &pairs, true).unwrap();
            let before: f64 = prepared.iter().map(|p| p.margin(&r, c.alpha)).sum();
            let (m, _) = train(&r, &r, &pairs, &c, &mut Rng::new(seed)).unwrap();
            let after: f64 = prepared.iter().map(|p| p.margin(&m, c.alpha)).sum();
            assert!(after > before, "seed {seed}: {after} <= {before}");
        }
    }

    #[test]
    fn divergence_is_a_training_error() {
        let r = model(1);
        let pairs = batch(&[1.0, 1.0]);
        let c = TrainConfig {
            learning_rate: 1e308,
            ..cfg(true)
        };
        let err = train(&r, &r, &pairs, &c, &mut Rng::new(0)).unwrap_err();
        assert!(matches!(err, Error::Training { epoch: 1, .. }), "{err}");
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn sft_fits_answers() {
        let r = model(1);
        let samples: Vec<MedicalSample> = (0..4)
            .map(|i| MedicalSample {
                id: format!("s{i}"),
                image: img(i, 0.0),
                heatmap: None,
                query: "is it".into(),
                answer: "yes".into(),
                task: Task::ClosedQa,
            })
            .collect();
        let c = TrainConfig {
            epochs: 200,
            learning_rate: 1.0,
            ..cfg(false)
        };
        let (m, trace) = train_sft(&r, &samples, &c, &mut Rng::new(0)).unwrap();
        assert!(trace.last().unwrap().loss < trace[0].loss);
        assert_eq!(trace[0].mean_margin, None);
        assert_eq!(
            m.greedy_decode(&samples[0].image, "is it", 8).unwrap(),
            ["yes"]
        );
    }
}

//! Seeded desk-scale comparisons on the synthetic dataset.
//!
//! [`relevance_weighting`] trains weighted and unweighted preference models on
//! stub-curated text pairs and measures held-out preference accuracy.
//! [`noise_locality`] trains on lesion-noise pairs built with local or global
//! noise and measures held-out closed-QA accuracy.

use serde::{Deserialize, Serialize};

use crate::agents::{AgentClient, AgentSpec};
use crate::curation::{build_text_pairs, build_visual_pairs, merge};
use crate::dataset::{MedicalSample, Task};
use crate::dpo::{preference_accuracy, prepare_all, train, train_sft, TrainConfig};
use crate::error::Result;
use crate::metrics::evaluate;
use crate::noising::{NoiseConfig, NoiseMode};
use crate::normalize::{attach_weights, NormalizationConfig};
use crate::pair::PreferencePair;
use crate::policy::{Init, PolicyModel, Vocab};
use crate::relevance::{score_pairs, ConsensusConfig};
use crate::rng::Rng;
use crate::synth::{split, synth_dataset, SynthConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub train_fraction: f64,
    pub embed_dim: usize,
    pub candidates: usize,
    pub generator: String,
    pub judge: String,
    pub agents: Vec<String>,
    pub round_cap: usize,
    /// Warm-up that produces the reference for the noise comparison.
    pub sft: TrainConfig,
    /// Preference stage of the weighting comparison (from a random init).
    pub weighting: TrainConfig,
    /// Preference stage of the noise comparison (from the warm-up).
    pub locality: TrainConfig,
    pub noise: NoiseConfig,
    pub norm: NormalizationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig {
                n: 500,
                ..SynthConfig::default()
            },
            train_fraction: 0.5,
            embed_dim: 8,
            candidates: 3,
            generator: "mutate".into(),
            judge: "hash-pick".into(),
            agents: vec![
                "edit-score:1..5".into(),
                "deferential:1..5".into(),
                "edit-score:1..5".into(),
            ],
            round_cap: 5,
            sft: TrainConfig {
                learning_rate: 0.5,
                epochs: 15,
                batch_size: 16,
                weighted: false,
                ..TrainConfig::default()
            },
            weighting: TrainConfig {
                alpha: 1.0,
                learning_rate: 1.0,
                epochs: 10,
                batch_size: 16,
                ..TrainConfig::default()
            },
            locality: TrainConfig {
                alpha: 1.0,
                learning_rate: 0.1,
                epochs: 3,
                batch_size: 16,
                ..TrainConfig::default()
            },
            noise: NoiseConfig::default(),
            norm: NormalizationConfig::default(),
        }
    }
}

fn stub_agents(config: &ExperimentConfig) -> (AgentSpec, AgentSpec, ConsensusConfig) {
    let generator = AgentSpec::stub("generator", &config.generator);
    let judge = AgentSpec::stub("judge", &config.judge);
    let agents = config
        .agents
        .iter()
        .enumerate()
        .map(|(i, b)| AgentSpec::stub(format!("agent{}", i + 1), b))
        .collect();
    let consensus = ConsensusConfig {
        agents,
        round_cap: config.round_cap,
        scale: (1.0, 5.0),
        include_ground_truth: true,
    };
    (generator, judge, consensus)
}

fn vocab_for(samples: &[MedicalSample], pairs: &[&[PreferencePair]]) -> Result<Vocab> {
    let texts = samples
        .iter()
        .flat_map(|s| [s.query.as_str(), s.answer.as_str()])
        .chain(
            pairs
                .iter()
                .flat_map(|ps| ps.iter().map(|p| p.dispreferred.as_str())),
        );
    Vocab::from_texts(texts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightingOutcome {
    pub seed: u64,
    pub weighted: f64,
    pub unweighted: f64,
}

/// Held-out preference accuracy of weighted and unweighted training from the
/// same initial policy on the same curated pairs.
pub fn relevance_weighting(config: &ExperimentConfig, seed: u64) -> Result<WeightingOutcome> {
    let client = AgentClient::default();
    let (generator, judge, consensus) = stub_agents(config);
    let mut rng = Rng::new(seed);
    let data = synth_dataset(&config.synth, &mut rng)?;
    let (train_set, test_set) = split(data, config.train_fraction);
    let (train_pairs, _) = build_text_pairs(
        &client,
        &train_set,
        &generator,
        &judge,
        config.candidates,
        &mut rng,
    )?;
    let (test_pairs, _) = build_text_pairs(
        &client,
        &test_set,
        &generator,
        &judge,
        config.candidates,
        &mut rng,
    )?;
    let (scored, _, _) = score_pairs(&client, train_pairs, &consensus, &mut rng)?;
    let weighted_pairs = attach_weights(scored, &config.norm)?;

    let vocab = vocab_for(&train_set, &[&weighted_pairs, &test_pairs])?;
    let init = PolicyModel::new(
        vocab,
        config.embed_dim,
        config.synth.channels,
        seed,
        Init::Uniform,
    )?;
    let reference = init.clone();
    let test = prepare_all(&init, &reference, &test_pairs, false)?;

    let arm = |weighted: bool| -> Result<f64> {
        let cfg = TrainConfig {
            weighted,
            seed,
            ..config.weighting.clone()
        };
        let (model, _) = train(
            &init,
            &reference,
            &weighted_pairs,
            &cfg,
            &mut Rng::new(seed ^ 0x5eed),
        )?;
        Ok(preference_accuracy(&model, &test, cfg.alpha))
    };
    Ok(WeightingOutcome {
        seed,
        weighted: arm(true)?,
        unweighted: arm(false)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseOutcome {
    pub seed: u64,
    pub reference: f64,
    pub local: f64,
    pub global: f64,
}

/// Held-out closed-QA accuracy (in [0, 1]) after weighted preference
/// training on text pairs merged with lesion-noise pairs built with local
/// or with global noise. Both arms share the text pairs and the reference.
pub fn noise_locality(config: &ExperimentConfig, seed: u64) -> Result<NoiseOutcome> {
    let synth = SynthConfig {
        task: Task::ClosedQa,
        ..config.synth.clone()
    };
    let client = AgentClient::default();
    let (generator, judge, consensus) = stub_agents(config);
    let mut rng = Rng::new(seed);
    let data = synth_dataset(&synth, &mut rng)?;
    let (train_set, test_set) = split(data, config.train_fraction);
    let (text_pairs, _) = build_text_pairs(
        &client,
        &train_set,
        &generator,
        &judge,
        config.candidates,
        &mut rng,
    )?;
    let (text_pairs, _, _) = score_pairs(&client, text_pairs, &consensus, &mut rng)?;

    let vocab = vocab_for(&train_set, &[&text_pairs])?;
    let init = PolicyModel::new(vocab, config.embed_dim, synth.channels, seed, Init::Uniform)?;
    let (reference, _) = train_sft(&init, &train_set, &config.sft, &mut Rng::new(seed ^ 0x5f7))?;
    let accuracy = |m: &PolicyModel| -> Result<f64> {
        Ok(evaluate(m, &test_set, Task::ClosedQa)?.means["closed_accuracy"] / 100.0)
    };
    let schedule = config.noise.schedule()?;
    let visual_seed = rng.next_u64();
    let arm = |mode: NoiseMode| -> Result<f64> {
        let (visual, _) = build_visual_pairs(
            &train_set,
            &schedule,
            config.noise.k,
            mode,
            &mut Rng::new(visual_seed),
        )?;
        let pairs = attach_weights(merge(text_pairs.clone(), visual), &config.norm)?;
        let cfg = TrainConfig {
            weighted: true,
            seed,
            ..config.locality.clone()
        };
        let (model, _) = train(
            &reference,
            &reference,
            &pairs,
            &cfg,
            &mut Rng::new(seed ^ 0x5eed),
        )?;
        accuracy(&model)
    };
    Ok(NoiseOutcome {
        seed,
        reference: accuracy(&reference)?,
        local: arm(NoiseMode::Local)?,
        global: arm(NoiseMode::Global)?,
    })
}

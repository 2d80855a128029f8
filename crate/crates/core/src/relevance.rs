//! Clinical-relevance scoring.
//!
//! Text pairs are scored by a sequential consensus protocol over `g` agents:
//! the first agent rates the dispreferred answer, and every following agent
//! sees the most recent score and either repeats it (agree) or gives its own
//! (revise). Agents are visited in configured order, one full pass per
//! round. The protocol converges once the last `g` recorded scores are equal
//! and otherwise stops after `g * round_cap` evaluations, returning the mean
//! of every recorded score. Lesion pairs keep their detector confidence.

use serde::{Deserialize, Serialize};

use crate::agents::{parse_score, AgentClient, AgentSpec, PromptVars, Purpose};
use crate::curation::SampleFailure;
use crate::error::{Error, Result};
use crate::pair::{PreferencePair, Source};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusConfig {
    pub agents: Vec<AgentSpec>,
    pub round_cap: usize,
    pub scale: (f64, f64),
    pub include_ground_truth: bool,
}

impl ConsensusConfig {
    pub fn new(agents: Vec<AgentSpec>, round_cap: usize) -> Result<Self> {
        let cfg = Self {
            agents,
            round_cap,
            scale: (1.0, 5.0),
            include_ground_truth: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// One agent, one evaluation.
    pub fn single(agent: AgentSpec) -> Self {
        Self {
            agents: vec![agent],
            round_cap: 1,
            scale: (1.0, 5.0),
            include_ground_truth: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.agents.is_empty() {
            return Err(Error::validation("consensus needs at least one agent"));
        }
        if self.round_cap == 0 {
            return Err(Error::validation("round cap must be at least 1"));
        }
        if !(self.scale.0 < self.scale.1) {
            return Err(Error::validation(format!(
                "score scale [{}, {}] is empty",
                self.scale.0, self.scale.1
            )));
        }
        self.agents.iter().try_for_each(AgentSpec::validate)
    }

    pub fn max_evaluations(&self) -> usize {
        self.agents.len() * self.round_cap
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Decision {
    Initial,
    Agree,
    Revise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub agent: String,
    pub score: f64,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedCall {
    pub round: usize,
    pub agent: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusTranscript {
    pub history: Vec<ScoreEntry>,
    #[serde(rename = "final")]
    pub final_score: f64,
    pub converged: bool,
    /// Agent calls attempted, including skipped ones.
    pub evaluations: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<SkippedCall>,
}

impl ConsensusTranscript {
    pub fn scores(&self) -> Vec<f64> {
        self.history.iter().map(|e| e.score).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoringContext {
    pub query: String,
    pub ground_truth: String,
}

fn tail_agrees(history: &[ScoreEntry], g: usize) -> bool {
    history.len() >= g && {
        let tail = &history[history.len() - g..];
        tail.iter().all(|e| e.score == tail[0].score)
    }
}

fn score_vars(
    config: &ConsensusConfig,
    dispreferred: &str,
    context: &ScoringContext,
    prior: Option<f64>,
) -> PromptVars {
    let mut vars = PromptVars::new(Purpose::Score, &context.query, &context.ground_truth);
    vars.candidate = dispreferred.to_string();
    vars.prior_score = prior;
    vars.include_ground_truth = config.include_ground_truth;
    vars
}

pub fn consensus_score(
    client: &AgentClient,
    config: &ConsensusConfig,
    dispreferred: &str,
    context: &ScoringContext,
    rng: &mut Rng,
) -> Result<ConsensusTranscript> {
    config.validate()?;
    if dispreferred.trim().is_empty() {
        return Err(Error::validation(
            "cannot score an empty dispreferred response",
        ));
    }
    let g = config.agents.len();
    let (low, high) = config.scale;
    let mut history: Vec<ScoreEntry> = Vec::new();
    let mut skipped = Vec::new();
    let mut evaluations = 0;
    for round in 0..config.round_cap {
        let mut answered = 0;
        for agent in &config.agents {
            evaluations += 1;
            let prior = history.last().map(|e| e.score);
            let prompt = agent.fill(&score_vars(config, dispreferred, context, prior));
            let score = client
                .call(agent, &prompt, rng)
                .and_then(|reply| parse_score(&reply.text, low, high));
            let score = match score {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("agent {} skipped in round {}: {e}", agent.name, round + 1);
                    skipped.push(SkippedCall {
                        round: round + 1,
                        agent: agent.name.clone(),
                        error: e.to_string(),
                    });
                    continue;
                }
            };
            answered += 1;
            let decision = match prior {
                None => Decision::Initial,
                Some(p) if p == score => Decision::Agree,
                Some(_) => Decision::Revise,
            };
            history.push(ScoreEntry {
                agent: agent.name.clone(),
                score,
                decision,
            });
            if tail_agrees(&history, g) {
                return Ok(ConsensusTranscript {
                    history,
                    final_score: score,
                    converged: true,
                    evaluations,
                    skipped,
                });
            }
        }
        if answered == 0 {
            return Err(Error::Consensus(format!(
                "all {g} agents failed in round {}",
                round + 1
            )));
        }
    }
    let final_score = history.iter().map(|e| e.score).sum::<f64>() / history.len() as f64;
    Ok(ConsensusTranscript {
        history,
        final_score,
        converged: false,
        evaluations,
        skipped,
    })
}

/// One call to one agent, returning its parsed score.
pub fn single_agent_score(
    client: &AgentClient,
    agent: &AgentSpec,
    dispreferred: &str,
    context: &ScoringContext,
    scale: (f64, f64),
    rng: &mut Rng,
) -> Result<f64> {
    let mut config = ConsensusConfig::single(agent.clone());
    config.scale = scale;
    let prompt = agent.fill(&score_vars(&config, dispreferred, context, None));
    let reply = client.call(agent, &prompt, rng)?;
    parse_score(&reply.text, scale.0, scale.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTranscript {
    pub sample_id: String,
    pub index: usize,
    pub transcript: ConsensusTranscript,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoringReport {
    pub failures: Vec<SampleFailure>,
}

/// Score every text pair by consensus; lesion pairs pass through unchanged.
/// Pairs whose consensus fails keep `raw_score = None`.
pub fn score_pairs(
    client: &AgentClient,
    pairs: Vec<PreferencePair>,
    config: &ConsensusConfig,
    rng: &mut Rng,
) -> Result<(Vec<PreferencePair>, Vec<PairTranscript>, ScoringReport)> {
    config.validate()?;
    let base = rng.next_u64();
    let mut transcripts = Vec::new();
    let mut report = ScoringReport::default();
    let mut out = Vec::with_capacity(pairs.len());
    for (index, mut pair) in pairs.into_iter().enumerate() {
        if pair.source == Source::TextHallucination {
            let mut prng = Rng::derived(base, &format!("{}#{index}", pair.sample_id));
            let context = ScoringContext {
                query: pair.query.clone(),
                ground_truth: pair.preferred.clone(),
            };
            match consensus_score(client, config, &pair.dispreferred, &context, &mut prng) {
                Ok(t) => {
                    pair.raw_score = Some(t.final_score);
                    transcripts.push(PairTranscript {
                        sample_id: pair.sample_id.clone(),
                        index,
                        transcript: t,
                    });
                }
                Err(e) => {
                    pair.raw_score = None;
                    report.failures.push(SampleFailure {
                        id: pair.sample_id.clone(),
                        error: e.to_string(),
                    });
                }
            }
        }
        out.push(pair);
    }
    Ok((out, transcripts, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ImageTensor;

    fn ctx() -> ScoringContext {
        ScoringContext {
            query: "is there effusion".into(),
            ground_truth: "yes".into(),
        }
    }

    fn echo_agents(scores: &[f64]) -> Vec<AgentSpec> {
        scores
            .iter()
            .enumerate()
            .map(|(i, s)| AgentSpec::stub(format!("a{i}"), &format!("echo-score:{s}")))
            .collect()
    }

    fn run(agents: Vec<AgentSpec>, cap: usize) -> Result<ConsensusTranscript> {
        let cfg = ConsensusConfig::new(agents, cap)?;
        consensus_score(
            &AgentClient::default(),
            &cfg,
            "no",
            &ctx(),
            &mut Rng::new(0),
        )
    }

    #[test]
    fn unanimity_converges_in_g_evaluations() {
        let t = run(echo_agents(&[4.0, 4.0, 4.0]), 5).unwrap();
        assert!(t.converged);
        assert_eq!(t.history.len(), 3);
        assert_eq!(t.evaluations, 3);
        assert_eq!(t.final_score, 4.0);
        let decisions: Vec<_> = t.history.iter().map(|e| e.decision).collect();
        assert_eq!(
            decisions,
            [Decision::Initial, Decision::Agree, Decision::Agree]
        );
    }

    #[test]
    fn two_agents_at_cap_average() {
        let t = run(echo_agents(&[3.0, 5.0]), 1).unwrap();
        assert!(!t.converged);
        assert_eq!(t.scores(), [3.0, 5.0]);
        assert_eq!(t.final_score, 4.0);
    }

    #[test]
    fn cycling_scores_hit_cap() {
        // hand simulation: 2,3,4 | 2,3,4 never has three equal in a row
        let t = run(echo_agents(&[2.0, 3.0, 4.0]), 2).unwrap();
        assert!(!t.converged);
        assert_eq!(t.history.len(), 6);
        assert_eq!(t.final_score, 3.0);
    }

    #[test]
    fn late_agreement_converges() {
        // a0 says 2, a1 defers, a2 defers: converged on 2
        let agents = vec![
            AgentSpec::stub("a0", "echo-score:2"),
            AgentSpec::stub("a1", "deferential:1..5"),
            AgentSpec::stub("a2", "deferential:1..5"),
        ];
        let t = run(agents, 5).unwrap();
        assert!(t.converged);
        assert_eq!(t.final_score, 2.0);

        // a0 says 5, a1 says 3, a2 defers (3), a0 says 5 again ... a1 3, a2 3
        let agents = vec![
            AgentSpec::stub("a0", "echo-score:5"),
            AgentSpec::stub("a1", "echo-score:3"),
            AgentSpec::stub("a2", "deferential:1..5"),
        ];
        let t = run(agents, 2).unwrap();
        assert_eq!(t.scores(), [5.0, 3.0, 3.0, 5.0, 3.0, 3.0]);
        assert!(!t.converged);
        assert!((t.final_score - 22.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn single_agent_mode() {
        let t = run(echo_agents(&[5.0]), 1).unwrap();
        assert!(t.converged);
        assert_eq!(t.final_score, 5.0);
        let agent = AgentSpec::stub("a", "echo-score:5");
        let s = single_agent_score(
            &AgentClient::default(),
            &agent,
            "no",
            &ctx(),
            (1.0, 5.0),
            &mut Rng::new(0),
        )
        .unwrap();
        assert_eq!(s, 5.0);
        let failing = AgentSpec::stub("f", "fail");
        assert!(single_agent_score(
            &AgentClient::default(),
            &failing,
            "no",
            &ctx(),
            (1.0, 5.0),
            &mut Rng::new(0)
        )
        .is_err());
    }

    #[test]
    fn single_agent_equals_g1_consensus() {
        for behavior in ["hash-score:1..5", "edit-score:1..5", "echo-score:2"] {
            let agent = AgentSpec::stub("a", behavior);
            let single = single_agent_score(
                &AgentClient::default(),
                &agent,
                "no way",
                &ctx(),
                (1.0, 5.0),
                &mut Rng::new(3),
            )
            .unwrap();
            let t = consensus_score(
                &AgentClient::default(),
                &ConsensusConfig::single(agent),
                "no way",
                &ctx(),
                &mut Rng::new(3),
            )
            .unwrap();
            assert_eq!(t.final_score, single, "{behavior}");
        }
    }

    #[test]
    fn failing_agent_is_skipped() {
        let agents = vec![
            AgentSpec::stub("bad", "fail"),
            AgentSpec::stub("a", "echo-score:4"),
            AgentSpec::stub("b", "echo-score:4"),
        ];
        let t = run(agents, 3).unwrap();
        // round 1: a (INITIAL 4), b (AGREE 4); round 2: bad skipped, a 4 -> three equal
        assert!(t.converged);
        assert_eq!(t.history[0].decision, Decision::Initial);
        assert_eq!(t.skipped.len(), 2);
        assert_eq!(t.history.len(), 3);
    }

    #[test]
    fn all_agents_failing_is_protocol_error() {
        let agents = vec![AgentSpec::stub("x", "fail"), AgentSpec::stub("y", "fail")];
        assert!(matches!(run(agents, 2), Err(Error::Consensus(_))));
    }

    #[test]
    fn config_validation() {
        assert!(ConsensusConfig::new(vec![], 5).is_err());
        assert!(ConsensusConfig::new(echo_agents(&[1.0]), 0).is_err());
        let empty = ConsensusConfig::new(echo_agents(&[1.0]), 1).unwrap();
        assert!(consensus_score(
            &AgentClient::default(),
            &empty,
            " ",
            &ctx(),
            &mut Rng::new(0)
        )
        .is_err());
    }

    fn pair(id: &str, source: Source) -> PreferencePair {
        let img = ImageTensor::zeros(1, 1, 1).unwrap();
        PreferencePair {
            sample_id: id.into(),
            input_image: img.clone(),
            dispreferred_image: (source == Source::LesionNoise)
                .then(|| ImageTensor::new(1, 1, 1, vec![1.0]).unwrap()),
            query: "q".into(),
            preferred: "yes".into(),
            dispreferred: if source == Source::LesionNoise {
                "yes"
            } else {
                "no"
            }
            .into(),
            raw_score: (source == Source::LesionNoise).then_some(0.7),
            weight: None,
            source,
        }
    }

    #[test]
    fn score_pairs_only_touches_text_pairs() {
        let cfg = ConsensusConfig::new(echo_agents(&[3.0, 3.0]), 5).unwrap();
        let pairs = vec![
            pair("t1", Source::TextHallucination),
            pair("v1", Source::LesionNoise),
            pair("t2", Source::TextHallucination),
        ];
        let (scored, transcripts, report) =
            score_pairs(&AgentClient::default(), pairs, &cfg, &mut Rng::new(0)).unwrap();
        assert_eq!(scored[0].raw_score, Some(3.0));
        assert_eq!(scored[1].raw_score, Some(0.7));
        assert_eq!(scored[2].raw_score, Some(3.0));
        assert_eq!(transcripts.len(), 2);
        assert!(report.failures.is_empty());
        let (empty, t, _) =
            score_pairs(&AgentClient::default(), vec![], &cfg, &mut Rng::new(0)).unwrap();
        assert!(empty.is_empty() && t.is_empty());
    }

    #[test]
    fn score_pairs_reports_failures() {
        let cfg = ConsensusConfig::new(vec![AgentSpec::stub("x", "fail")], 2).unwrap();
        let (scored, _, report) = score_pairs(
            &AgentClient::default(),
            vec![
                pair("t1", Source::TextHallucination),
                pair("v1", Source::LesionNoise),
            ],
            &cfg,
            &mut Rng::new(0),
        )
        .unwrap();
        assert_eq!(scored[0].raw_score, None);
        assert_eq!(scored[1].raw_score, Some(0.7));
        assert_eq!(report.failures.len(), 1);
        assert_eq!(report.failures[0].id, "t1");
    }
}

//! Preference-pair curation.
//!
//! Text pairs keep the ground truth as the preferred answer and take a judged
//! hallucination as the dispreferred one. Visual pairs keep the same answer
//! on both sides and pair the clean image with a lesion-noised copy.

use serde::{Deserialize, Serialize};

use crate::agents::{AgentClient, AgentSpec, PromptVars, Purpose};
use crate::dataset::MedicalSample;
use crate::error::{Error, Result};
use crate::noising::{noise_image, noise_image_global, NoiseMode, NoiseSchedule};
use crate::pair::{PreferencePair, Source};
use crate::rng::Rng;
use crate::text::tokenize;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CurationReport {
    /// Samples that produced no pair, with the reason.
    pub failures: Vec<SampleFailure>,
    /// Samples whose pair was dropped as degenerate (empty lesion mask).
    pub dropped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub id: String,
    pub error: String,
}

impl CurationReport {
    pub fn failed_ids(&self) -> Vec<&str> {
        self.failures.iter().map(|f| f.id.as_str()).collect()
    }

    pub fn extend(&mut self, other: CurationReport) {
        self.failures.extend(other.failures);
        self.dropped.extend(other.dropped);
    }
}

/// Sample `n` candidate answers from the generator, in request order.
pub fn sample_candidates(
    client: &AgentClient,
    generator: &AgentSpec,
    sample: &MedicalSample,
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<String>> {
    if n == 0 {
        return Err(Error::validation("candidate count must be at least 1"));
    }
    (0..n)
        .map(|i| {
            let mut vars = PromptVars::new(Purpose::Generate, &sample.query, &sample.answer);
            vars.sample_index = i;
            let prompt = generator.fill(&vars);
            client
                .call(generator, &prompt, rng)
                .map(|r| r.text.trim().to_string())
                .map_err(|e| e.for_sample(&sample.id))
        })
        .collect()
}

/// Ask the judge for the most hallucinated candidate; when it reports that
/// none conflicts with the ground truth, ask it to write a new one.
pub fn select_dispreferred(
    client: &AgentClient,
    judge: &AgentSpec,
    query: &str,
    candidates: &[String],
    ground_truth: &str,
    rng: &mut Rng,
) -> Result<String> {
    if candidates.is_empty() {
        return Err(Error::validation(
            "select_dispreferred needs at least one candidate",
        ));
    }
    let mut vars = PromptVars::new(Purpose::Select, query, ground_truth);
    vars.candidates = candidates.to_vec();
    let reply = client.call(judge, &judge.fill(&vars), rng)?;
    let chosen = match parse_selection(&reply.text, candidates.len())? {
        Some(i) => candidates[i].clone(),
        None => {
            let vars = PromptVars::new(Purpose::Hallucinate, query, ground_truth);
            client
                .call(judge, &judge.fill(&vars), rng)?
                .text
                .trim()
                .to_string()
        }
    };
    if tokenize(&chosen) == tokenize(ground_truth) {
        return Err(Error::validation(
            "judge returned a response identical to the ground truth",
        ));
    }
    if tokenize(&chosen).is_empty() {
        return Err(Error::validation("judge returned an empty response"));
    }
    Ok(chosen)
}

/// `Ok(None)` for the `NONE` sentinel, otherwise the 0-based candidate index.
fn parse_selection(text: &str, count: usize) -> Result<Option<usize>> {
    let first_int = text
        .split(|c: char| !c.is_ascii_digit())
        .find(|s| !s.is_empty())
        .and_then(|s| s.parse::<usize>().ok());
    match first_int {
        Some(i) if (1..=count).contains(&i) => Ok(Some(i - 1)),
        Some(i) => Err(Error::format(format!(
            "judge selected candidate {i} but only {count} exist"
        ))),
        None if text.to_ascii_uppercase().contains("NONE") => Ok(None),
        None => Err(Error::format(format!(
            "cannot read judge selection from {text:?}"
        ))),
    }
}

fn require_non_empty(dataset: &[MedicalSample]) -> Result<()> {
    if dataset.is_empty() {
        Err(Error::validation(
            "cannot curate pairs from an empty dataset",
        ))
    } else {
        Ok(())
    }
}

/// One hallucinated-response pair per sample. Per-sample failures are
/// reported, not fatal.
pub fn build_text_pairs(
    client: &AgentClient,
    dataset: &[MedicalSample],
    generator: &AgentSpec,
    judge: &AgentSpec,
    n: usize,
    rng: &mut Rng,
) -> Result<(Vec<PreferencePair>, CurationReport)> {
    require_non_empty(dataset)?;
    let base = rng.next_u64();
    let mut pairs = Vec::with_capacity(dataset.len());
    let mut report = CurationReport::default();
    for sample in dataset {
        let mut srng = Rng::derived(base, &sample.id);
        let outcome =
            sample_candidates(client, generator, sample, n, &mut srng).and_then(|cands| {
                select_dispreferred(
                    client,
                    judge,
                    &sample.query,
                    &cands,
                    &sample.answer,
                    &mut srng,
                )
                .map_err(|e| e.for_sample(&sample.id))
            });
        match outcome {
            Ok(dispreferred) => pairs.push(PreferencePair {
                sample_id: sample.id.clone(),
                input_image: sample.image.clone(),
                dispreferred_image: None,
                query: sample.query.clone(),
                preferred: sample.answer.clone(),
                dispreferred,
                raw_score: None,
                weight: None,
                source: Source::TextHallucination,
            }),
            Err(e) => {
                log::warn!("text curation failed: {e}");
                report.failures.push(SampleFailure {
                    id: sample.id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    Ok((pairs, report))
}

/// One lesion-noise pair per sample. Local mode requires a heatmap and
/// scores the pair with its confidence; global mode scores every pair 1.0.
/// Pairs from all-zero masks are dropped.
pub fn build_visual_pairs(
    dataset: &[MedicalSample],
    schedule: &NoiseSchedule,
    k: usize,
    mode: NoiseMode,
    rng: &mut Rng,
) -> Result<(Vec<PreferencePair>, CurationReport)> {
    require_non_empty(dataset)?;
    let base = rng.next_u64();
    let mut pairs = Vec::with_capacity(dataset.len());
    let mut report = CurationReport::default();
    for sample in dataset {
        let mut srng = Rng::derived(base, &sample.id);
        let noised = match mode {
            NoiseMode::Local => match &sample.heatmap {
                None => Err(Error::validation("local noise mode needs a lesion heatmap")),
                Some(h) if h.is_empty_mask() => {
                    report.dropped.push(sample.id.clone());
                    continue;
                }
                Some(h) => noise_image(&sample.image, h, schedule, k, &mut srng)
                    .map(|img| (img, f64::from(h.confidence()))),
            },
            NoiseMode::Global => {
                noise_image_global(&sample.image, schedule, k, &mut srng).map(|img| (img, 1.0))
            }
        };
        match noised {
            Ok((img, score)) => {
                let pair = PreferencePair {
                    sample_id: sample.id.clone(),
                    input_image: sample.image.clone(),
                    dispreferred_image: Some(img),
                    query: sample.query.clone(),
                    preferred: sample.answer.clone(),
                    dispreferred: sample.answer.clone(),
                    raw_score: Some(score),
                    weight: None,
                    source: Source::LesionNoise,
                };
                if pair.is_degenerate() {
                    report.dropped.push(sample.id.clone());
                } else {
                    pairs.push(pair);
                }
            }
            Err(e) => report.failures.push(SampleFailure {
                id: sample.id.clone(),
                error: e.to_string(),
            }),
        }
    }
    Ok((pairs, report))
}

/// Text pairs followed by visual pairs.
pub fn merge(d_t: Vec<PreferencePair>, d_v: Vec<PreferencePair>) -> Vec<PreferencePair> {
    let mut out = d_t;
    out.extend(d_v);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Task;
    use crate::tensor::{ImageTensor, LesionHeatmap};

    fn sample(id: &str, answer: &str) -> MedicalSample {
        let image = ImageTensor::new(2, 2, 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let mut mask = vec![0.0; 4];
        mask[3] = 1.0;
        MedicalSample {
            id: id.into(),
            heatmap: Some(LesionHeatmap::new(2, 2, mask, 0.83).unwrap()),
            image,
            query: "is there a lesion in the left lung".into(),
            answer: answer.into(),
            task: Task::ClosedQa,
        }
    }

    fn client() -> AgentClient {
        AgentClient::default()
    }

    #[test]
    fn stub_generator_candidates() {
        let generator = AgentSpec::stub("m", "mutate");
        let s = sample("a", "yes, left lung");
        let c = sample_candidates(&client(), &generator, &s, 3, &mut Rng::new(1)).unwrap();
        assert_eq!(c.len(), 3);
        assert!(c[0] != c[1] && c[1] != c[2] && c[0] != c[2]);
        let one = sample_candidates(&client(), &generator, &s, 1, &mut Rng::new(1)).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn generator_failure_names_sample() {
        let generator = AgentSpec::stub("m", "fail");
        let err = sample_candidates(
            &client(),
            &generator,
            &sample("case-9", "yes"),
            2,
            &mut Rng::new(1),
        )
        .unwrap_err();
        assert!(err.to_string().contains("case-9"));
        assert!(matches!(err.root(), Error::Transport { .. }));
    }

    #[test]
    fn judge_picks_mutated_candidate() {
        let judge = AgentSpec::stub("j", "max-edit");
        let cands = vec!["yes".to_string(), "no".to_string()];
        let out =
            select_dispreferred(&client(), &judge, "q", &cands, "yes", &mut Rng::new(0)).unwrap();
        assert_eq!(out, "no");
    }

    #[test]
    fn judge_fallback_generates_new_hallucination() {
        let judge = AgentSpec::stub("j", "max-edit");
        let cands = vec!["yes".to_string(), "Yes.".to_string()];
        let out =
            select_dispreferred(&client(), &judge, "q", &cands, "yes", &mut Rng::new(0)).unwrap();
        assert_ne!(tokenize(&out), tokenize("yes"));
    }

    #[test]
    fn empty_candidates_rejected() {
        let judge = AgentSpec::stub("j", "max-edit");
        assert!(matches!(
            select_dispreferred(&client(), &judge, "q", &[], "yes", &mut Rng::new(0)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn judge_returning_ground_truth_is_rejected() {
        // echo-score answers "Score: 1" which selects candidate 1 (the ground truth)
        let judge = AgentSpec::stub("j", "echo-score:1");
        let cands = vec!["yes".to_string(), "no".to_string()];
        assert!(matches!(
            select_dispreferred(&client(), &judge, "q", &cands, "yes", &mut Rng::new(0)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn selection_parsing() {
        assert_eq!(parse_selection("Selected: 2", 3).unwrap(), Some(1));
        assert_eq!(parse_selection("NONE", 3).unwrap(), None);
        assert!(parse_selection("Selected: 4", 3).is_err());
        assert!(parse_selection("hmm", 3).is_err());
    }

    #[test]
    fn text_pairs_one_per_sample() {
        let data: Vec<_> = (0..10).map(|i| sample(&format!("s{i}"), "yes")).collect();
        let (pairs, report) = build_text_pairs(
            &client(),
            &data,
            &AgentSpec::stub("m", "mutate"),
            &AgentSpec::stub("j", "max-edit"),
            5,
            &mut Rng::new(3),
        )
        .unwrap();
        assert_eq!(pairs.len(), 10);
        assert!(report.failures.is_empty());
        for p in &pairs {
            assert_eq!(p.preferred, "yes");
            assert!(p.raw_score.is_none());
            p.validate().unwrap();
        }
    }

    #[test]
    fn text_pairs_collect_failures() {
        let mut data: Vec<_> = (0..10).map(|i| sample(&format!("s{i}"), "yes")).collect();
        // empty queries cannot be prompted
        data[2].query = " ".into();
        data[7].query = "".into();
        let (pairs, report) = build_text_pairs(
            &client(),
            &data,
            &AgentSpec::stub("m", "mutate"),
            &AgentSpec::stub("j", "max-edit"),
            2,
            &mut Rng::new(3),
        )
        .unwrap();
        assert_eq!(pairs.len(), 10, "template text keeps prompts non-empty");
        assert!(report.failures.is_empty());

        let data: Vec<_> = (0..10).map(|i| sample(&format!("s{i}"), "yes")).collect();
        let mut generator = AgentSpec::stub("m", "mutate");
        generator.prompt_template = Some("{query}".into());
        let mut data = data;
        data[2].query = " ".into();
        data[7].query = "".into();
        let (pairs, report) = build_text_pairs(
            &client(),
            &data,
            &generator,
            &AgentSpec::stub("j", "max-edit"),
            2,
            &mut Rng::new(3),
        )
        .unwrap();
        assert_eq!(pairs.len(), 8);
        assert_eq!(report.failed_ids(), ["s2", "s7"]);
    }

    #[test]
    fn empty_dataset_rejected() {
        let r = build_text_pairs(
            &client(),
            &[],
            &AgentSpec::stub("m", "mutate"),
            &AgentSpec::stub("j", "max-edit"),
            2,
            &mut Rng::new(0),
        );
        assert!(matches!(r, Err(Error::Validation(_))));
        let s = NoiseSchedule::build(3, 0.9, 0.8).unwrap();
        assert!(build_visual_pairs(&[], &s, 0, NoiseMode::Local, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn visual_pairs_local_and_global() {
        let schedule = NoiseSchedule::build(10, 0.9, 0.5).unwrap();
        let data = vec![sample("a", "yes"), sample("b", "no")];
        let (local, report) =
            build_visual_pairs(&data, &schedule, 9, NoiseMode::Local, &mut Rng::new(4)).unwrap();
        assert!(report.failures.is_empty());
        assert_eq!(local.len(), 2);
        for (p, s) in local.iter().zip(&data) {
            assert_eq!(p.raw_score.map(|v| v as f32), Some(0.83f32));
            assert_eq!(p.preferred, p.dispreferred);
            let noised = p.dispreferred_image.as_ref().unwrap();
            // unmasked pixels 0..3 preserved bit-exactly
            assert_eq!(&noised.data()[..3], &s.image.data()[..3]);
            assert_ne!(noised.data()[3], s.image.data()[3]);
        }
        let (global, _) =
            build_visual_pairs(&data, &schedule, 9, NoiseMode::Global, &mut Rng::new(4)).unwrap();
        assert!(global.iter().all(|p| p.raw_score == Some(1.0)));
    }

    #[test]
    fn degenerate_and_missing_heatmaps() {
        let schedule = NoiseSchedule::build(10, 0.9, 0.5).unwrap();
        let mut zero = sample("zero", "yes");
        zero.heatmap = Some(LesionHeatmap::filled(2, 2, 0.0, 0.4).unwrap());
        let mut missing = sample("missing", "yes");
        missing.heatmap = None;
        let data = vec![zero, missing, sample("ok", "no")];
        let (pairs, report) =
            build_visual_pairs(&data, &schedule, 3, NoiseMode::Local, &mut Rng::new(4)).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(report.dropped, ["zero"]);
        assert_eq!(report.failed_ids(), ["missing"]);
    }

    #[test]
    fn merge_keeps_order_and_duplicates() {
        let schedule = NoiseSchedule::build(10, 0.9, 0.5).unwrap();
        let data: Vec<_> = (0..3).map(|i| sample(&format!("s{i}"), "yes")).collect();
        let (t, _) = build_text_pairs(
            &client(),
            &data,
            &AgentSpec::stub("m", "mutate"),
            &AgentSpec::stub("j", "max-edit"),
            2,
            &mut Rng::new(0),
        )
        .unwrap();
        let (v, _) =
            build_visual_pairs(&data[..2], &schedule, 1, NoiseMode::Local, &mut Rng::new(0))
                .unwrap();
        let all = merge(t, v);
        assert_eq!(all.len(), 5);
        assert!(all[..3]
            .iter()
            .all(|p| p.source == Source::TextHallucination));
        assert_eq!(all.iter().filter(|p| p.sample_id == "s0").count(), 2);
        assert!(merge(vec![], vec![]).is_empty());
    }

    #[test]
    fn curation_is_deterministic() {
        let data: Vec<_> = (0..4)
            .map(|i| sample(&format!("s{i}"), "no, right lung"))
            .collect();
        let run = || {
            build_text_pairs(
                &client(),
                &data,
                &AgentSpec::stub("m", "mutate"),
                &AgentSpec::stub("j", "hash-pick"),
                5,
                &mut Rng::new(8),
            )
            .unwrap()
            .0
        };
        assert_eq!(run(), run());
    }
}

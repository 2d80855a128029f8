//! Deterministic offline agents.
//!
//! A stub's reply is a pure function of its behavior, the prompt, and the
//! caller's [`Rng`]. Stubs never touch the network.
//!
//! | behavior                    | reply                                                        |
//! |-----------------------------|--------------------------------------------------------------|
//! | `echo-score:<v>`            | `Score: <v>`                                                 |
//! | `hash-score:<lo>..<hi>`     | integer score from the prompt hash mixed with one rng draw   |
//! | `edit-score:<lo>..<hi>[:b]` | `hi - (d - 1) + b` clamped, `d` = token edit distance to GT  |
//! | `deferential:<lo>..<hi>`    | adopts the prior score if any, otherwise `edit-score`        |
//! | `mutate`                    | entity-swapped or fabricated answer (generator)              |
//! | `echo`                      | the ground truth verbatim (generator)                        |
//! | `max-edit`                  | judge: candidate farthest from the ground truth              |
//! | `hash-pick`                 | judge: a pseudo-random conflicting candidate                 |
//! | `fail`                      | simulated transport failure on every attempt                 |
//!
//! Judge stubs answer `NONE` when every candidate equals the ground truth,
//! and every stub answers a `Hallucinate` request with [`mutate_answer`].

use std::str::FromStr;

use super::{format_score, AgentReply, AgentSpec, Prompt, Purpose};
use crate::error::{Error, Result};
use crate::rng::{stable_hash, Rng};
use crate::text::{edit_distance, tokenize};

#[derive(Debug, Clone, PartialEq)]
pub enum StubBehavior {
    EchoScore(f64),
    HashScore { low: i64, high: i64 },
    EditScore { low: i64, high: i64, bias: i64 },
    Deferential { low: i64, high: i64 },
    Mutate,
    Echo,
    MaxEdit,
    HashPick,
    Fail,
}

fn need<'a>(name: &str, arg: Option<&'a str>) -> Result<&'a str> {
    arg.ok_or_else(|| Error::validation(format!("stub behavior '{name}' needs an argument")))
}

fn parse_range(s: &str) -> Result<(i64, i64)> {
    let bad = || Error::validation(format!("stub score range '{s}' must look like <lo>..<hi>"));
    let (lo, hi) = s.split_once("..").ok_or_else(bad)?;
    let lo: i64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: i64 = hi.trim().parse().map_err(|_| bad())?;
    if lo >= hi {
        return Err(bad());
    }
    Ok((lo, hi))
}

impl FromStr for StubBehavior {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        Ok(match name {
            "echo-score" => {
                let a = need(name, arg)?;
                let v: f64 = a
                    .parse()
                    .map_err(|_| Error::validation(format!("bad echo-score value '{a}'")))?;
                if !v.is_finite() {
                    return Err(Error::validation("echo-score value must be finite"));
                }
                StubBehavior::EchoScore(v)
            }
            "hash-score" => {
                let (low, high) = parse_range(need(name, arg)?)?;
                StubBehavior::HashScore { low, high }
            }
            "edit-score" => {
                let a = need(name, arg)?;
                let (range, bias) = match a.split_once(':') {
                    Some((r, b)) => (
                        r,
                        b.trim_start_matches('+')
                            .parse()
                            .map_err(|_| Error::validation(format!("bad edit-score bias '{b}'")))?,
                    ),
                    None => (a, 0),
                };
                let (low, high) = parse_range(range)?;
                StubBehavior::EditScore { low, high, bias }
            }
            "deferential" => {
                let (low, high) = parse_range(need(name, arg)?)?;
                StubBehavior::Deferential { low, high }
            }
            "mutate" => StubBehavior::Mutate,
            "echo" => StubBehavior::Echo,
            "max-edit" => StubBehavior::MaxEdit,
            "hash-pick" => StubBehavior::HashPick,
            "fail" => StubBehavior::Fail,
            other => {
                return Err(Error::validation(format!(
                    "unknown stub behavior '{other}'"
                )))
            }
        })
    }
}

impl StubBehavior {
    pub(crate) fn reply(
        &self,
        spec: &AgentSpec,
        prompt: &Prompt,
        rng: &mut Rng,
    ) -> Result<AgentReply> {
        let vars = &prompt.vars;
        if let StubBehavior::Fail = self {
            return Err(Error::Transport {
                attempts: spec.max_rounds_per_call.max(1),
                message: format!("stub agent {} is configured to fail", spec.name),
            });
        }
        if vars.purpose == Purpose::Hallucinate {
            let h = stable_hash(vars.ground_truth.as_bytes());
            return Ok(AgentReply::new(mutate_answer(&vars.ground_truth, 0, h)));
        }
        let text = match self {
            StubBehavior::EchoScore(v) => score_text(*v),
            StubBehavior::HashScore { low, high } => {
                let span = (high - low + 1) as u64;
                let mixed = stable_hash(prompt.text.as_bytes()) ^ rng.next_u64();
                score_text((low + (mixed % span) as i64) as f64)
            }
            StubBehavior::EditScore { low, high, bias } => score_text(edit_score(
                &vars.candidate,
                &vars.ground_truth,
                *low,
                *high,
                *bias,
            )),
            StubBehavior::Deferential { low, high } => match vars.prior_score {
                Some(prior) => score_text(prior),
                None => score_text(edit_score(
                    &vars.candidate,
                    &vars.ground_truth,
                    *low,
                    *high,
                    0,
                )),
            },
            StubBehavior::Mutate => {
                let h = stable_hash(vars.ground_truth.as_bytes());
                mutate_answer(&vars.ground_truth, vars.sample_index, h)
            }
            StubBehavior::Echo => vars.ground_truth.clone(),
            StubBehavior::MaxEdit => {
                let gt = tokenize(&vars.ground_truth);
                let best = vars
                    .candidates
                    .iter()
                    .enumerate()
                    .map(|(i, c)| (i, edit_distance(&tokenize(c), &gt)))
                    .fold(None, |best: Option<(usize, usize)>, (i, d)| match best {
                        Some((_, bd)) if bd >= d => best,
                        _ => Some((i, d)),
                    });
                match best {
                    Some((i, d)) if d > 0 => format!("Selected: {}", i + 1),
                    _ => "NONE".to_string(),
                }
            }
            StubBehavior::HashPick => {
                let gt = tokenize(&vars.ground_truth);
                let conflicting: Vec<usize> = (0..vars.candidates.len())
                    .filter(|&i| tokenize(&vars.candidates[i]) != gt)
                    .collect();
                if conflicting.is_empty() {
                    "NONE".to_string()
                } else {
                    let mixed = stable_hash(prompt.text.as_bytes()) ^ rng.next_u64();
                    let pick = conflicting[(mixed % conflicting.len() as u64) as usize];
                    format!("Selected: {}", pick + 1)
                }
            }
            StubBehavior::Fail => unreachable!("handled above"),
        };
        Ok(AgentReply::new(text))
    }
}

fn score_text(v: f64) -> String {
    format!("Score: {}", format_score(v))
}

fn edit_score(candidate: &str, ground_truth: &str, low: i64, high: i64, bias: i64) -> f64 {
    let d = edit_distance(&tokenize(candidate), &tokenize(ground_truth)) as i64;
    if d == 0 {
        return low as f64;
    }
    (high - (d - 1) + bias).clamp(low, high) as f64
}

/// Entity pairs swapped by the mutating generator (both directions).
const SWAPS: &[(&str, &str)] = &[
    ("yes", "no"),
    ("left", "right"),
    ("upper", "lower"),
    ("normal", "abnormal"),
    ("present", "absent"),
    ("increased", "decreased"),
    ("benign", "malignant"),
    ("mild", "severe"),
    ("acute", "chronic"),
    ("small", "large"),
    ("cyst", "tumor"),
    ("nodule", "mass"),
    ("effusion", "pneumothorax"),
    ("consolidation", "atelectasis"),
    ("opacity", "lucency"),
    ("lung", "liver"),
    ("heart", "kidney"),
];

/// Findings appended to produce additional plausible hallucinations.
const FINDINGS: &[&str] = &[
    "with pleural effusion",
    "with cardiomegaly",
    "with a small pneumothorax",
    "with rib fractures",
    "with pulmonary edema",
    "with hilar lymphadenopathy",
    "with a calcified granuloma",
    "with mediastinal widening",
];

/// Fabrications unrelated to the question.
const FABRICATIONS: &[&str] = &[
    "a fractured femur with hip dislocation",
    "dental caries in the upper molars",
    "a cataract clouding the left eye",
    "an ovarian cyst located in the brain stem",
    "kidney stones visible in the sinus cavity",
    "a torn meniscus in the right knee",
    "tonsillitis spreading to the spleen",
    "a broken wrist with ligament damage",
];

fn swap_terms(tokens: &[String]) -> Vec<String> {
    tokens
        .iter()
        .map(|t| {
            SWAPS
                .iter()
                .find_map(|&(a, b)| {
                    if t == a {
                        Some(b)
                    } else if t == b {
                        Some(a)
                    } else {
                        None
                    }
                })
                .map(str::to_string)
                .unwrap_or_else(|| t.clone())
        })
        .collect()
}

/// Deterministic hallucination of `ground_truth`.
///
/// Index 0 is the entity-swapped answer (or a fabrication when no term can be
/// swapped). Odd indices are fabrications; even indices append a finding to
/// the swapped answer. Outputs for distinct indices below 15 are distinct
/// and always differ from the ground truth.
pub fn mutate_answer(ground_truth: &str, index: usize, offset: u64) -> String {
    let gt = tokenize(ground_truth);
    let swapped = swap_terms(&gt);
    let changed = swapped != gt;
    let fabrication =
        |i: usize| FABRICATIONS[(offset as usize).wrapping_add(i) % FABRICATIONS.len()];
    let finding = |i: usize| FINDINGS[(offset as usize).wrapping_add(i) % FINDINGS.len()];
    if index == 0 {
        return if changed {
            swapped.join(" ")
        } else {
            fabrication(0).to_string()
        };
    }
    if index % 2 == 1 {
        // indices 1, 3, 5, ... map to distinct fabrications other than slot 0
        fabrication(1 + index / 2).to_string()
    } else {
        let mut out = swapped;
        out.extend(tokenize(finding(index / 2 - 1)));
        out.join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{AgentClient, PromptVars};

    fn call(spec: &AgentSpec, vars: PromptVars, seed: u64) -> Result<AgentReply> {
        let prompt = spec.fill(&vars);
        AgentClient::default().call(spec, &prompt, &mut Rng::new(seed))
    }

    fn score_vars(candidate: &str, gt: &str) -> PromptVars {
        let mut v = PromptVars::new(Purpose::Score, "is there effusion", gt);
        v.candidate = candidate.into();
        v
    }

    #[test]
    fn echo_score() {
        let spec = AgentSpec::stub("a", "echo-score:4");
        assert_eq!(
            call(&spec, score_vars("no", "yes"), 1)
                .unwrap()
                .parsed_score,
            Some(4.0)
        );
    }

    #[test]
    fn hash_score_is_deterministic_and_in_range() {
        let spec = AgentSpec::stub("a", "hash-score:1..5");
        let a = call(&spec, score_vars("no", "yes"), 9).unwrap();
        let b = call(&spec, score_vars("no", "yes"), 9).unwrap();
        assert_eq!(a, b);
        for seed in 0..50 {
            let s = call(&spec, score_vars("no", "yes"), seed)
                .unwrap()
                .parsed_score
                .unwrap();
            assert!((1.0..=5.0).contains(&s) && s.fract() == 0.0);
        }
    }

    #[test]
    fn edit_score_prefers_targeted_hallucinations() {
        let spec = AgentSpec::stub("a", "edit-score:1..5");
        let s = |c: &str| {
            call(&spec, score_vars(c, "yes"), 0)
                .unwrap()
                .parsed_score
                .unwrap()
        };
        assert_eq!(s("no"), 5.0);
        assert_eq!(s("no with pleural effusion"), 2.0);
        assert_eq!(s("a fractured femur with hip dislocation"), 1.0);
        assert_eq!(s("yes"), 1.0);
        let biased = AgentSpec::stub("b", "edit-score:1..5:-1");
        assert_eq!(
            call(&biased, score_vars("no", "yes"), 0)
                .unwrap()
                .parsed_score,
            Some(4.0)
        );
    }

    #[test]
    fn deferential_adopts_prior() {
        let spec = AgentSpec::stub("a", "deferential:1..5");
        let mut v = score_vars("no", "yes");
        assert_eq!(call(&spec, v.clone(), 0).unwrap().parsed_score, Some(5.0));
        v.prior_score = Some(3.0);
        assert_eq!(call(&spec, v, 0).unwrap().parsed_score, Some(3.0));
    }

    #[test]
    fn mutations_are_distinct_and_differ_from_truth() {
        for gt in ["yes", "Left lung cyst.", "the quick brown fox"] {
            let gt_tokens = tokenize(gt);
            let outs: Vec<String> = (0..15).map(|i| mutate_answer(gt, i, 12345)).collect();
            for (i, o) in outs.iter().enumerate() {
                assert_ne!(tokenize(o), gt_tokens, "{gt} index {i}");
                for o2 in &outs[..i] {
                    assert_ne!(o, o2, "{gt}: duplicate candidate");
                }
            }
        }
        assert_eq!(mutate_answer("Left lung cyst", 0, 0), "right liver tumor");
    }

    #[test]
    fn judges() {
        let gt = "yes";
        let mut v = PromptVars::new(Purpose::Select, "q", gt);
        v.candidates = vec!["yes".into(), "no with cardiomegaly".into(), "no".into()];
        let max_edit = AgentSpec::stub("j", "max-edit");
        assert_eq!(call(&max_edit, v.clone(), 0).unwrap().text, "Selected: 2");
        let pick = AgentSpec::stub("j", "hash-pick");
        let t = call(&pick, v.clone(), 3).unwrap().text;
        assert!(t == "Selected: 2" || t == "Selected: 3", "{t}");
        v.candidates = vec!["Yes.".into(), "yes".into()];
        assert_eq!(call(&max_edit, v.clone(), 0).unwrap().text, "NONE");
        assert_eq!(call(&pick, v, 0).unwrap().text, "NONE");
    }

    #[test]
    fn hallucinate_request_differs_from_truth() {
        let v = PromptVars::new(Purpose::Hallucinate, "q", "no acute findings");
        let r = call(&AgentSpec::stub("j", "max-edit"), v, 0).unwrap();
        assert_ne!(tokenize(&r.text), tokenize("no acute findings"));
    }

    #[test]
    fn fail_is_transport_error() {
        let err = call(&AgentSpec::stub("x", "fail"), score_vars("no", "yes"), 0).unwrap_err();
        assert!(matches!(err, Error::Transport { attempts: 4, .. }));
    }

    #[test]
    fn behavior_parsing() {
        assert!("edit-score:1..5:+2".parse::<StubBehavior>().is_ok());
        assert!("hash-score:5..1".parse::<StubBehavior>().is_err());
        assert!("echo-score".parse::<StubBehavior>().is_err());
        assert!("echo-score:nan".parse::<StubBehavior>().is_err());
    }
}

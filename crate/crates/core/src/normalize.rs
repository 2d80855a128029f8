//! Raw relevance scores to bounded sample weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pair::PreferencePair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// Standardize by the batch, then remap to the target mean and variance.
    #[default]
    Remap,
    /// `(s - mu) / sqrt(var)`, clipped.
    Literal,
}

impl std::str::FromStr for NormMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "remap" => Ok(Self::Remap),
            "literal" => Ok(Self::Literal),
            other => Err(Error::validation(format!("unknown norm mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormalizationConfig {
    pub mode: NormMode,
    #[serde(rename = "mu")]
    pub target_mean: f64,
    #[serde(rename = "var")]
    pub target_var: f64,
    pub clip_low: f64,
    pub clip_high: f64,
}

impl Default for NormalizationConfig {
    fn default() -> Self {
        Self {
            mode: NormMode::Remap,
            target_mean: 1.0,
            target_var: 0.1,
            clip_low: 0.75,
            clip_high: 1.25,
        }
    }
}

impl NormalizationConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.target_mean,
            self.target_var,
            self.clip_low,
            self.clip_high,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("normalization parameters must be finite"));
        }
        if !(self.clip_low < self.clip_high) {
            return Err(Error::validation(format!(
                "clip_low {} must be below clip_high {}",
                self.clip_low, self.clip_high
            )));
        }
        if !(self.target_var > 0.0) {
            return Err(Error::validation("target variance must be positive"));
        }
        if self.target_mean < self.clip_low || self.target_mean > self.clip_high {
            return Err(Error::validation(format!(
                "target mean {} outside clip window [{}, {}]",
                self.target_mean, self.clip_low, self.clip_high
            )));
        }
        Ok(())
    }
}

/// Weights before clipping. Population statistics.
pub fn pre_clip(raw: &[f64], config: &NormalizationConfig) -> Result<Vec<f64>> {
    config.validate()?;
    if raw.is_empty() {
        return Err(Error::validation("cannot normalize an empty score list"));
    }
    if let Some(i) = raw.iter().position(|s| !s.is_finite()) {
        return Err(Error::validation(format!(
            "score at index {i} is not finite ({})",
            raw[i]
        )));
    }
    let sd_target = config.target_var.sqrt();
    Ok(match config.mode {
        NormMode::Literal => raw
            .iter()
            .map(|s| (s - config.target_mean) / sd_target)
            .collect(),
        NormMode::Remap => {
            let n = raw.len() as f64;
            let mean = raw.iter().sum::<f64>() / n;
            let var = raw.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            raw.iter()
                .map(|s| {
                    let z = if sd > 0.0 { (s - mean) / sd } else { 0.0 };
                    config.target_mean + sd_target * z
                })
                .collect()
        }
    })
}

pub fn normalize_scores(raw: &[f64], config: &NormalizationConfig) -> Result<Vec<f64>> {
    Ok(pre_clip(raw, config)?
        .into_iter()
        .map(|w| w.clamp(config.clip_low, config.clip_high))
        .collect())
}

/// One normalization over the whole pair set; every pair must carry a raw score.
pub fn attach_weights(
    mut pairs: Vec<PreferencePair>,
    config: &NormalizationConfig,
) -> Result<Vec<PreferencePair>> {
    let missing: Vec<&str> = pairs
        .iter()
        .filter(|p| p.raw_score.is_none())
        .map(|p| p.sample_id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::validation(format!(
            "pairs without raw_score: {}",
            missing.join(", ")
        )));
    }
    if pairs.is_empty() {
        return Ok(pairs);
    }
    let raw: Vec<f64> = pairs.iter().map(|p| p.raw_score.unwrap()).collect();
    let weights = normalize_scores(&raw, config)?;
    for (p, w) in pairs.iter_mut().zip(weights) {
        p.weight = Some(w);
    }
    Ok(pairs)
}

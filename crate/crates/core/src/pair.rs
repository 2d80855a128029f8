//! Preference pairs and their JSONL serialization.
//!
//! Pair files reference image tensors stored content-addressed under a
//! `tensors/` directory next to the JSONL file (`tensors/<sha256>.bin`).

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, ImageTensor};
use crate::text::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    TextHallucination,
    LesionNoise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub sample_id: String,
    pub input_image: ImageTensor,
    pub dispreferred_image: Option<ImageTensor>,
    pub query: String,
    pub preferred: String,
    pub dispreferred: String,
    pub raw_score: Option<f64>,
    pub weight: Option<f64>,
    pub source: Source,
}

impl PreferencePair {
    /// The image the dispreferred response is conditioned on (`x*`, or `x`
    /// for text pairs).
    pub fn dispreferred_input(&self) -> &ImageTensor {
        self.dispreferred_image
            .as_ref()
            .unwrap_or(&self.input_image)
    }

    /// A lesion pair whose noised image equals the clean one.
    pub fn is_degenerate(&self) -> bool {
        self.source == Source::LesionNoise
            && self.dispreferred_image.as_ref() == Some(&self.input_image)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::validation(format!("pair {}: {msg}", self.sample_id)));
        match self.source {
            Source::TextHallucination => {
                if self.dispreferred_image.is_some() {
                    return fail("text pair must not carry a dispreferred image");
                }
                if tokenize(&self.preferred) == tokenize(&self.dispreferred) {
                    return fail("preferred and dispreferred responses are identical");
                }
            }
            Source::LesionNoise => {
                let Some(noised) = &self.dispreferred_image else {
                    return fail("lesion pair is missing its noised image");
                };
                if noised.height() != self.input_image.height()
                    || noised.width() != self.input_image.width()
                    || noised.channels() != self.input_image.channels()
                {
                    return fail("noised image shape differs from the input image");
                }
                if self.preferred != self.dispreferred {
                    return fail("lesion pair responses must be the same text");
                }
            }
        }
        if let Some(s) = self.raw_score {
            if !s.is_finite() {
                return fail("raw score is not finite");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PairRecord {
    sample_id: String,
    source: Source,
    query: String,
    preferred: String,
    dispreferred: String,
    image: String,
    dispreferred_image: Option<String>,
    raw_score: Option<f64>,
    weight: Option<f64>,
}

fn store_tensor(dir: &Path, image: &ImageTensor) -> Result<String> {
    let bytes = image.to_bytes();
    let name = format!("tensors/{}.bin", hex::encode(Sha256::digest(&bytes)));
    let path = dir.join(&name);
    if !path.exists() {
        std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(name)
}

/// Serialize pairs to JSONL text, storing their tensors under `dir/tensors`.
pub fn pairs_to_jsonl(pairs: &[PreferencePair], dir: &Path) -> Result<Vec<u8>> {
    let tensors = dir.join("tensors");
    std::fs::create_dir_all(&tensors).map_err(|e| Error::io(&tensors, e))?;
    let mut out = Vec::new();
    for p in pairs {
        let record = PairRecord {
            sample_id: p.sample_id.clone(),
            source: p.source,
            query: p.query.clone(),
            preferred: p.preferred.clone(),
            dispreferred: p.dispreferred.clone(),
            image: store_tensor(dir, &p.input_image)?,
            dispreferred_image: p
                .dispreferred_image
                .as_ref()
                .map(|img| store_tensor(dir, img))
                .transpose()?,
            raw_score: p.raw_score,
            weight: p.weight,
        };
        serde_json::to_writer(&mut out, &record).expect("pair record serializes");
        out.push(b'\n');
    }
    Ok(out)
}

pub fn save_pairs(pairs: &[PreferencePair], path: &Path) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let body = pairs_to_jsonl(pairs, dir)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&body).map_err(|e| Error::io(path, e))
}

pub fn load_pairs(path: &Path) -> Result<Vec<PreferencePair>> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: PairRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        let pair = PreferencePair {
            input_image: read_tensor(&dir.join(&r.image))
                .map_err(|e| e.for_sample(&r.sample_id))?,
            dispreferred_image: r
                .dispreferred_image
                .as_ref()
                .map(|p| read_tensor(&dir.join(p)))
                .transpose()
                .map_err(|e| e.for_sample(&r.sample_id))?,
            sample_id: r.sample_id,
            query: r.query,
            preferred: r.preferred,
            dispreferred: r.dispreferred,
            raw_score: r.raw_score,
            weight: r.weight,
            source: r.source,
        };
        pair.validate()?;
        pairs.push(pair);
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn text_pair() -> PreferencePair {
        PreferencePair {
            sample_id: "s".into(),
            input_image: ImageTensor::zeros(1, 1, 1).unwrap(),
            dispreferred_image: None,
            query: "is there effusion".into(),
            preferred: "yes".into(),
            dispreferred: "no".into(),
            raw_score: Some(4.0),
            weight: None,
            source: Source::TextHallucination,
        }
    }

    #[test]
    fn text_pair_invariants() {
        assert!(text_pair().validate().is_ok());
        let mut same = text_pair();
        same.dispreferred = "Yes.".into();
        assert!(same.validate().is_err());
        let mut with_image = text_pair();
        with_image.dispreferred_image = Some(ImageTensor::zeros(1, 1, 1).unwrap());
        assert!(with_image.validate().is_err());
    }

    #[test]
    fn lesion_pair_invariants() {
        let mut p = text_pair();
        p.source = Source::LesionNoise;
        p.dispreferred = p.preferred.clone();
        assert!(p.validate().is_err(), "missing noised image");
        p.dispreferred_image = Some(ImageTensor::new(1, 1, 1, vec![0.5]).unwrap());
        assert!(p.validate().is_ok());
        assert!(!p.is_degenerate());
        p.dispreferred_image = Some(p.input_image.clone());
        assert!(p.is_degenerate());
    }

    #[test]
    fn save_load_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let mut lesion = text_pair();
        lesion.source = Source::LesionNoise;
        lesion.dispreferred = lesion.preferred.clone();
        lesion.dispreferred_image = Some(ImageTensor::new(1, 1, 1, vec![0.5]).unwrap());
        lesion.weight = Some(1.1);
        let pairs = vec![text_pair(), lesion];
        let path = tmp.path().join("pairs.jsonl");
        save_pairs(&pairs, &path).unwrap();
        assert_eq!(load_pairs(&path).unwrap(), pairs);
        // identical input images share one tensor file
        let n = std::fs::read_dir(tmp.path().join("tensors"))
            .unwrap()
            .count();
        assert_eq!(n, 2);
    }
}

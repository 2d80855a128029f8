//! Planted-lesion synthetic dataset.
//!
//! Each image is low-amplitude texture over a flat background. A square
//! lesion patch is added at a random position to the channel that encodes
//! the sample's class, and the class determines the answer. Because the
//! class lives in a channel (not a position), the per-channel mean carries
//! the signal and the answer cannot be read from the query alone. The
//! heatmap covers exactly the patch; its confidence tracks the lesion
//! amplitude.

use serde::{Deserialize, Serialize};

use crate::dataset::{MedicalSample, Task};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ImageTensor, LesionHeatmap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub background: f32,
    pub texture: f32,
    pub amplitude_low: f32,
    pub amplitude_high: f32,
    pub task: Task,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 200,
            height: 8,
            width: 8,
            channels: 4,
            patch: 3,
            background: 0.2,
            texture: 0.05,
            amplitude_low: 0.5,
            amplitude_high: 2.0,
            task: Task::ClosedQa,
        }
    }
}

/// Query and per-class answers for each task.
pub fn task_text(task: Task) -> (&'static str, [&'static str; 2]) {
    match task {
        Task::ClosedQa => ("is the lesion malignant", ["yes", "no"]),
        Task::OpenQa => (
            "what abnormality is seen",
            ["malignant mass", "benign cyst"],
        ),
        Task::Report => (
            "describe the findings",
            [
                "a malignant mass is present in the left lung",
                "a small benign cyst is seen with normal surrounding tissue",
            ],
        ),
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::validation("synthetic dataset needs n >= 1"));
        }
        if self.channels < 2 {
            return Err(Error::validation(
                "synthetic images need at least 2 channels",
            ));
        }
        if self.patch == 0 || self.patch > self.height || self.patch > self.width {
            return Err(Error::validation("lesion patch must fit inside the image"));
        }
        if !(0.0 < self.amplitude_low && self.amplitude_low <= self.amplitude_high) {
            return Err(Error::validation(
                "amplitude range must be positive and ordered",
            ));
        }
        Ok(())
    }
}

/// Class of a synthetic sample: index of its answer in [`task_text`].
pub fn class_of(sample: &MedicalSample) -> Option<usize> {
    let (_, answers) = task_text(sample.task);
    answers.iter().position(|a| *a == sample.answer)
}

/// `n` samples with exactly balanced classes in random order.
pub fn synth_dataset(config: &SynthConfig, rng: &mut Rng) -> Result<Vec<MedicalSample>> {
    config.validate()?;
    let (h, w, c, p) = (config.height, config.width, config.channels, config.patch);
    let (query, answers) = task_text(config.task);
    let mut classes: Vec<usize> = (0..config.n).map(|i| i % 2).collect();
    rng.shuffle(&mut classes);
    classes
        .into_iter()
        .enumerate()
        .map(|(i, class)| {
            let mut data: Vec<f32> = (0..h * w * c)
                .map(|_| config.background + config.texture * rng.gaussian() as f32)
                .collect();
            let row = rng.below(h - p + 1);
            let col = rng.below(w - p + 1);
            let amp =
                rng.uniform_range(config.amplitude_low.into(), config.amplitude_high.into()) as f32;
            let mut mask = vec![0.0f32; h * w];
            for r in row..row + p {
                for q in col..col + p {
                    data[(r * w + q) * c + class] += amp;
                    mask[r * w + q] = 1.0;
                }
            }
            let confidence = amp / config.amplitude_high;
            Ok(MedicalSample {
                id: format!("synth-{i:05}"),
                image: ImageTensor::new(h, w, c, data)?,
                heatmap: Some(LesionHeatmap::new(h, w, mask, confidence)?),
                query: query.to_string(),
                answer: answers[class].to_string(),
                task: config.task,
            })
        })
        .collect()
}

/// First `train_fraction` of the samples for training, the rest held out.
pub fn split(
    samples: Vec<MedicalSample>,
    train_fraction: f64,
) -> (Vec<MedicalSample>, Vec<MedicalSample>) {
    let cut = ((samples.len() as f64) * train_fraction).round() as usize;
    let cut = cut.min(samples.len());
    let mut train = samples;
    let test = train.split_off(cut);
    (train, test)
}

//! Localized lesion noising.
//!
//! The forward corruption blends the masked region toward Gaussian noise:
//!
//! ```text
//! x* = sqrt(cum_k) * (x ⊙ h) + sqrt(1 - cum_k) * (ε ⊙ h) + x ⊙ (1 - h)
//! ```
//!
//! where `cum_k` is the cumulative product of the per-step retention factors
//! up to step `k` and `h` is the lesion mask broadcast over channels. Noise is
//! drawn only for elements with `h > 0`, in row-major order (channel fastest),
//! so an all-zero mask consumes no randomness.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ImageTensor, LesionHeatmap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    #[default]
    Local,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub steps: usize,
    pub xi_start: f64,
    pub xi_end: f64,
    pub k: usize,
    pub mode: NoiseMode,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            xi_start: 0.9999,
            xi_end: 0.98,
            k: 400,
            mode: NoiseMode::Local,
        }
    }
}

impl NoiseConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let s = NoiseSchedule::build(self.steps, self.xi_start, self.xi_end)?;
        s.check_step(self.k)?;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    xi: Vec<f64>,
    cumulative: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear interpolation of the retention factor from `xi_start` to
    /// `xi_end` over `steps` entries.
    pub fn build(steps: usize, xi_start: f64, xi_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::validation("noise schedule needs at least one step"));
        }
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !open_unit(xi_start) || !open_unit(xi_end) {
            return Err(Error::validation(format!(
                "schedule endpoints must lie in (0, 1), got {xi_start} and {xi_end}"
            )));
        }
        if xi_end > xi_start {
            return Err(Error::validation(format!(
                "xi_end ({xi_end}) must not exceed xi_start ({xi_start})"
            )));
        }
        let xi: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    xi_start
                } else {
                    xi_start + (xi_end - xi_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let cumulative = xi
            .iter()
            .scan(1.0, |acc, &v| {
                *acc *= v;
                Some(*acc)
            })
            .collect();
        Ok(Self { xi, cumulative })
    }

    pub fn xi(&self) -> &[f64] {
        &self.xi
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    pub fn len(&self) -> usize {
        self.xi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xi.is_empty()
    }

    fn check_step(&self, k: usize) -> Result<f64> {
        self.cumulative.get(k).copied().ok_or_else(|| {
            Error::validation(format!(
                "noise step {k} out of range for a {}-step schedule",
                self.len()
            ))
        })
    }
}

/// Noise the masked region of `image` to step `k`.
pub fn noise_image(
    image: &ImageTensor,
    heatmap: &LesionHeatmap,
    schedule: &NoiseSchedule,
    k: usize,
    rng: &mut Rng,
) -> Result<ImageTensor> {
    if !heatmap.matches(image) {
        return Err(Error::validation(format!(
            "heatmap is {}x{} but image is {}x{}",
            heatmap.height(),
            heatmap.width(),
            image.height(),
            image.width()
        )));
    }
    let cum = schedule.check_step(k)?;
    let keep = cum.sqrt();
    let blend = (1.0 - cum).sqrt();
    let channels = image.channels();
    let mut out = Vec::with_capacity(image.data().len());
    for (pixel, &h) in image.data().chunks_exact(channels).zip(heatmap.mask()) {
        if h == 0.0 {
            out.extend_from_slice(pixel);
            continue;
        }
        let h = f64::from(h);
        for &x in pixel {
            let x = f64::from(x);
            let eps = rng.gaussian();
            out.push((keep * (x * h) + blend * (eps * h) + x * (1.0 - h)) as f32);
        }
    }
    ImageTensor::new(image.height(), image.width(), channels, out)
}

/// Noise the whole image (mask ≡ 1).
pub fn noise_image_global(
    image: &ImageTensor,
    schedule: &NoiseSchedule,
    k: usize,
    rng: &mut Rng,
) -> Result<ImageTensor> {
    let ones = LesionHeatmap::filled(image.height(), image.width(), 1.0, 1.0)?;
    noise_image(image, &ones, schedule, k, rng)
}

/// Hard-disk heatmap: 1 for pixels whose centre lies within `radius` of
/// `center` (row, col in pixel units), 0 elsewhere.
pub fn synth_heatmap(
    image: &ImageTensor,
    center: (f64, f64),
    radius: f64,
    confidence: f64,
) -> Result<LesionHeatmap> {
    let (h, w) = (image.height(), image.width());
    let (cr, cc) = center;
    if !(cr >= 0.0 && cr < h as f64 && cc >= 0.0 && cc < w as f64) {
        return Err(Error::validation(format!(
            "heatmap centre ({cr}, {cc}) lies outside a {h}x{w} image"
        )));
    }
    if !(radius > 0.0) {
        return Err(Error::validation(format!(
            "heatmap radius must be positive, got {radius}"
        )));
    }
    if !(0.0..=1.0).contains(&confidence) {
        return Err(Error::validation(format!(
            "confidence {confidence} is outside [0, 1]"
        )));
    }
    let mask = (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .map(|(r, c)| {
            let d2 = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
            if d2 <= radius * radius {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    LesionHeatmap::new(h, w, mask, confidence as f32)
}

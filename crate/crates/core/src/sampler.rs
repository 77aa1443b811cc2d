//! Observation-ratio sampling: picks the observed prefix clip and the
//! unobserved continuation clip around the split point `floor(rho * T_d)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, Result};
use crate::video::{Clip, FrameSource, VideoTensor};

/// Fraction of the video visible to the model, in `(0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct ObservationRatio(f64);

impl ObservationRatio {
    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 && value <= 1.0 + 1e-12 {
            Ok(Self(value.min(1.0)))
        } else {
            Err(config_err(format!("observation ratio {value} outside (0, 1]")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Number of visible frames `floor(rho * frames)`, clamped to `[1, frames]`.
    pub fn visible_frames(self, frames: usize) -> usize {
        let m = (self.0 * frames as f64 + 1e-9).floor() as usize;
        m.clamp(1, frames.max(1))
    }
}

/// The standard grid `{0.1, 0.2, ..., 0.9}`.
pub fn standard_rho_grid() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SamplingMode {
    Randomized,
    Fixed(ObservationRatio),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    /// Frames per half-clip.
    pub clip_len: usize,
    pub mode: SamplingMode,
    pub rho_grid: Vec<f64>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { clip_len: 8, mode: SamplingMode::Randomized, rho_grid: standard_rho_grid() }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_len == 0 {
            return Err(config_err("clip length must be at least 1"));
        }
        if self.rho_grid.is_empty() {
            return Err(config_err("rho grid must not be empty"));
        }
        if let Some(r) = self.rho_grid.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
            return Err(config_err(format!("training rho {r} outside (0, 1)")));
        }
        Ok(())
    }

    /// The ratio for the next training sample.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> ObservationRatio {
        match self.mode {
            SamplingMode::Fixed(rho) => rho,
            SamplingMode::Randomized => sample_rho(rng, self),
        }
    }
}

/// Uniform draw from the training grid.
pub fn sample_rho<R: Rng + ?Sized>(rng: &mut R, cfg: &SamplingConfig) -> ObservationRatio {
    let i = rng.random_range(0..cfg.rho_grid.len());
    ObservationRatio(cfg.rho_grid[i])
}

/// `clip_len` indices spread over `[0, m)`, ending at `m - 1`.
pub fn index_present(frames: usize, rho: ObservationRatio, clip_len: usize) -> Vec<usize> {
    let m = rho.visible_frames(frames);
    (0..clip_len).map(|j| ((j + 1) * m).div_ceil(clip_len) - 1).collect()
}

/// `clip_len` indices spread over `[m, frames)`, starting at `m`.
pub fn index_future(frames: usize, rho: ObservationRatio, clip_len: usize) -> Result<Vec<usize>> {
    let m = rho.visible_frames(frames);
    if m >= frames {
        return Err(contract_err(format!(
            "no unobserved frames: rho {} leaves {m} of {frames} visible",
            rho.value()
        )));
    }
    Ok((0..clip_len).map(|j| m + j * (frames - m) / clip_len).collect())
}

/// Observed clip `V^o` and unobserved clip `V^u` for one training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipPair {
    pub observed: Clip,
    pub unobserved: Clip,
    pub observed_indices: Vec<usize>,
    pub unobserved_indices: Vec<usize>,
    pub rho: ObservationRatio,
}

fn gather<S: FrameSource + ?Sized>(source: &S, indices: &[usize]) -> Result<Clip> {
    let (h, w, c) = source.frame_shape();
    let frames = indices.iter().map(|&t| source.read_frame(t)).collect::<Result<Vec<_>>>()?;
    VideoTensor::from_frames(h, w, c, frames)
}

pub fn build_clip_pair(
    video: &VideoTensor,
    rho: ObservationRatio,
    cfg: &SamplingConfig,
) -> Result<ClipPair> {
    let observed_indices = index_present(video.frames(), rho, cfg.clip_len);
    let unobserved_indices = index_future(video.frames(), rho, cfg.clip_len)?;
    Ok(ClipPair {
        observed: gather(video, &observed_indices)?,
        unobserved: gather(video, &unobserved_indices)?,
        observed_indices,
        unobserved_indices,
        rho,
    })
}

/// The observed clip alone, reading nothing at or past the split point.
pub fn build_inference_clip<S: FrameSource + ?Sized>(
    source: &S,
    rho: ObservationRatio,
    cfg: &SamplingConfig,
) -> Result<Clip> {
    let indices = index_present(source.num_frames(), rho, cfg.clip_len);
    gather(source, &indices)
}

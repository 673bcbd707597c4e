use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    UniformCenter,
    Jittered,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSpec {
    #[serde(default = "default_frames")]
    pub frames: usize,
    pub mode: SamplingMode,
    #[serde(default)]
    pub seed: u64,
}

fn default_frames() -> usize {
    16
}

impl SamplingSpec {
    pub fn uniform(frames: usize) -> Self {
        Self {
            frames,
            mode: SamplingMode::UniformCenter,
            seed: 0,
        }
    }

    pub fn jittered(frames: usize, seed: u64) -> Self {
        Self {
            frames,
            mode: SamplingMode::Jittered,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Config("sampling: frames must be at least 1".into()));
        }
        Ok(())
    }

    /// Frame indices for a video of `len` frames.
    pub fn indices(&self, len: usize) -> Result<Vec<usize>> {
        match self.mode {
            SamplingMode::UniformCenter => uniform_sample(len, self.frames),
            SamplingMode::Jittered => temporal_jitter(len, self.frames, self.seed),
        }
    }
}

fn check(len: usize, n: usize) -> Result<()> {
    if len == 0 {
        return Err(Error::invalid("sampling: video has no frames"));
    }
    if n == 0 {
        return Err(Error::invalid("sampling: need at least one frame"));
    }
    Ok(())
}

/// `floor((i + 0.5)·L / n)` for each of the `n` slots.
pub fn uniform_sample(len: usize, n: usize) -> Result<Vec<usize>> {
    check(len, n)?;
    Ok((0..n)
        .map(|i| ((2 * i + 1) * len / (2 * n)).min(len - 1))
        .collect())
}

/// Segment `i` of `n` over a video of `len` frames: `[⌊iL/n⌋, ⌊(i+1)L/n⌋)`.
pub fn segment(len: usize, n: usize, i: usize) -> (usize, usize) {
    (i * len / n, (i + 1) * len / n)
}

/// One uniformly drawn index per segment. When `n > len` some segments
/// are empty and take the nearest valid frame, their start clamped to
/// `len − 1`.
pub fn temporal_jitter(len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    check(len, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|i| {
            let (lo, hi) = segment(len, n, i);
            if hi > lo {
                rng.gen_range(lo..hi)
            } else {
                lo.min(len - 1)
            }
        })
        .collect())
}

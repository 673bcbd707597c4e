//! Synthetic action clips. The noun is the texture of a small sprite and
//! the verb is the order in which it visits a fixed track, so nouns can be
//! read from any single frame while verbs need frame order.
//!
//! The track has eight horizontal positions and every verb visits each of
//! them exactly once per half video, so the multiset of frames seen by a
//! clip is the same for all verbs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{ActionVocab, Annotation, TaskLabels};
use crate::tensor::Tensor;

pub const TRACK: usize = 8;
pub const SPRITE: usize = 4;
const TRACK_X0: usize = 4;
const NOISE: f64 = 0.3;
const AMPLITUDE: f64 = 3.0;
const CHANNELS: usize = 3;

/// Track position of the sprite in every frame of one period.
const MOTIONS: [[usize; TRACK]; 3] = [
    [0, 1, 2, 3, 4, 5, 6, 7],
    [7, 6, 5, 4, 3, 2, 1, 0],
    [0, 2, 4, 6, 7, 5, 3, 1],
];

pub const VERB_NAMES: [&str; 3] = ["move-right", "move-left", "oscillate"];
pub const NOUN_NAMES: [&str; 3] = ["block", "checker", "ring"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(default = "three")]
    pub verbs: usize,
    #[serde(default = "three")]
    pub nouns: usize,
    pub samples_per_class: usize,
    #[serde(default = "default_length")]
    pub frames: usize,
    #[serde(default = "default_height")]
    pub height: usize,
    #[serde(default = "default_width")]
    pub width: usize,
}

fn three() -> usize {
    3
}

fn default_length() -> usize {
    2 * TRACK
}

fn default_height() -> usize {
    16
}

fn default_width() -> usize {
    20
}

impl SynthSpec {
    pub fn new(samples_per_class: usize) -> Self {
        Self {
            verbs: 3,
            nouns: 3,
            samples_per_class,
            frames: default_length(),
            height: default_height(),
            width: default_width(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synth: {m}")));
        if self.verbs != 3 || self.nouns != 3 {
            return bad(format!(
                "only 3 verbs × 3 nouns exist, got {} × {}",
                self.verbs, self.nouns
            ));
        }
        if self.samples_per_class == 0 {
            return bad("samples_per_class must be positive".into());
        }
        if self.frames == 0 || !self.frames.is_multiple_of(TRACK) {
            return bad(format!("frames must be a positive multiple of {TRACK}"));
        }
        if self.height < SPRITE + 2 || self.width < TRACK_X0 + TRACK + SPRITE {
            return bad(format!(
                "{}x{} frame is too small for the track",
                self.height, self.width
            ));
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.verbs * self.nouns
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthVideo {
    pub id: String,
    pub verb: usize,
    pub noun: usize,
    /// `[L, 3, H, W]`.
    pub frames: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub videos: Vec<SynthVideo>,
    pub vocab: ActionVocab,
}

impl SynthDataset {
    pub fn labels(&self) -> Vec<TaskLabels> {
        self.videos.iter().map(|v| self.label_of(v)).collect()
    }

    pub fn label_of(&self, v: &SynthVideo) -> TaskLabels {
        TaskLabels {
            verb: v.verb,
            noun: v.noun,
            action: self.vocab.compose(v.verb, v.noun).ok().flatten(),
        }
    }

    pub fn annotations(&self) -> Vec<Annotation> {
        self.videos
            .iter()
            .map(|v| Annotation {
                segment_id: v.id.clone(),
                verb: v.verb,
                noun: v.noun,
            })
            .collect()
    }

    /// The same dataset with the frames of every video in a seeded random
    /// order. Appearance is untouched; motion is destroyed.
    pub fn shuffled_frames(&self, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let videos = self
            .videos
            .iter()
            .map(|v| {
                let mut order: Vec<usize> = (0..v.frames.shape()[0]).collect();
                order.shuffle(&mut rng);
                Ok(SynthVideo {
                    frames: super::views::select_frames(&v.frames, &order)?,
                    ..v.clone()
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            videos,
            vocab: self.vocab.clone(),
        })
    }
}

fn sprite(noun: usize, r: usize, c: usize) -> f64 {
    let edge = r == 0 || c == 0 || r == SPRITE - 1 || c == SPRITE - 1;
    match noun {
        0 => 1.0,
        1 => (r + c).is_multiple_of(2) as u8 as f64,
        _ => edge as u8 as f64,
    }
}

fn render(spec: &SynthSpec, verb: usize, noun: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (h, w) = (spec.height, spec.width);
    let top = rng.gen_range(1..=h - SPRITE - 1);
    let plane = h * w;
    let mut data = vec![0.0; spec.frames * CHANNELS * plane];
    for (f, frame) in data.chunks_mut(CHANNELS * plane).enumerate() {
        for x in frame.iter_mut() {
            *x = rng.gen_range(-NOISE..NOISE);
        }
        let left = TRACK_X0 + MOTIONS[verb][f % TRACK];
        for ch in 0..CHANNELS {
            for r in 0..SPRITE {
                for c in 0..SPRITE {
                    let px = &mut frame[ch * plane + (top + r) * w + left + c];
                    *px = (*px).max(AMPLITUDE * sprite(noun, r, c));
                }
            }
        }
    }
    Tensor::new(vec![spec.frames, CHANNELS, h, w], data)
}

/// `samples_per_class` videos for every (verb, noun) pair, ordered by
/// sample, then verb, then noun. Identical seeds give identical datasets.
pub fn synth_videos(spec: &SynthSpec, seed: u64) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut videos = Vec::with_capacity(spec.samples_per_class * spec.classes());
    for i in 0..spec.samples_per_class {
        for verb in 0..spec.verbs {
            for noun in 0..spec.nouns {
                videos.push(SynthVideo {
                    id: format!("synth_{i:04}_v{verb}_n{noun}"),
                    verb,
                    noun,
                    frames: render(spec, verb, noun, &mut rng)?,
                });
            }
        }
    }
    let pairs: Vec<(usize, usize)> = videos.iter().map(|v| (v.verb, v.noun)).collect();
    let vocab = ActionVocab::build(spec.verbs, spec.nouns, &pairs)?;
    Ok(SynthDataset { videos, vocab })
}

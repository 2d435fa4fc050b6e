//! Procedural two-person clips with exact masks, for tests and demos.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusError, InteractionRecord, Manifest, UnifiedVocabulary};
use crate::video_io::{FrameSequence, MaskSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    /// Both people walk to the middle and stay in contact.
    Approach,
    /// Person 1 lunges; person 2 is pushed back.
    Strike,
    /// Person 2 walks away while person 1 follows.
    Follow,
    /// Both people stay apart and bob up and down.
    Wave,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthClass {
    pub name: String,
    pub motion: Motion,
    /// Caption template; `{color}` is replaced by the scene color name.
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub classes: Vec<SynthClass>,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: vec![
                SynthClass {
                    name: "hugging".into(),
                    motion: Motion::Approach,
                    caption: "two people walk together and hug in the {color} room.".into(),
                },
                SynthClass {
                    name: "punching".into(),
                    motion: Motion::Strike,
                    caption: "one person punches the other person in the {color} room.".into(),
                },
            ],
            per_class: 4,
            height: 16,
            width: 16,
            frames: 24,
            seed: 7,
        }
    }
}

pub const PALETTE: [(&str, [u8; 3]); 6] = [
    ("red", [200, 40, 40]),
    ("blue", [40, 60, 210]),
    ("green", [40, 180, 60]),
    ("yellow", [220, 200, 40]),
    ("purple", [140, 50, 170]),
    ("orange", [230, 120, 30]),
];

#[derive(Clone, Debug)]
pub struct SynthSample {
    pub id: String,
    pub class_name: String,
    pub caption: String,
    pub clip: FrameSequence,
    pub masks: MaskSet,
}

struct Body {
    x: f64,
    y: f64,
    w: usize,
    h: usize,
}

fn bodies(motion: Motion, t: f64, width: usize, height: usize) -> (Body, Body) {
    let (w, h) = ((width / 5).max(1), (height / 2).max(1));
    let span = (width - w) as f64;
    let base_y = (height - h) as f64;
    let (x1, x2, y1, y2) = match motion {
        Motion::Approach => {
            let k = t.min(0.7) / 0.7;
            let x1 = k * (span / 2.0 - w as f64 / 2.0);
            let x2 = span - k * (span / 2.0 - w as f64 / 2.0);
            (x1, x2, base_y, base_y)
        }
        Motion::Strike => {
            let lunge = if t < 0.5 { t / 0.5 } else { 1.0 - (t - 0.5) };
            let x1 = lunge * (span * 0.55);
            let push = ((t - 0.45).max(0.0) / 0.55).min(1.0);
            let x2 = span * 0.65 + push * span * 0.35;
            (x1, x2.min(span), base_y, base_y - push * 2.0)
        }
        Motion::Follow => (t * span * 0.6, span * 0.3 + t * span * 0.7, base_y, base_y),
        Motion::Wave => {
            let bob = (t * std::f64::consts::TAU * 2.0).sin().abs() * base_y;
            (
                0.0,
                span,
                base_y - bob,
                base_y - (1.0 - bob / base_y.max(1.0)) * base_y,
            )
        }
    };
    (Body { x: x1, y: y1, w, h }, Body { x: x2, y: y2, w, h })
}

fn render(
    cfg: &SynthConfig,
    motion: Motion,
    scene: [u8; 3],
    colors: [[u8; 3]; 2],
    rng: &mut ChaCha8Rng,
) -> (FrameSequence, MaskSet) {
    let (hgt, wid) = (cfg.height, cfg.width);
    let texture: Vec<i16> = (0..hgt * wid).map(|_| rng.random_range(-12..=12)).collect();
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut m1 = Vec::with_capacity(cfg.frames);
    let mut m2 = Vec::with_capacity(cfg.frames);
    for f in 0..cfg.frames {
        let t = if cfg.frames > 1 {
            f as f64 / (cfg.frames - 1) as f64
        } else {
            0.0
        };
        let (b1, b2) = bodies(motion, t, wid, hgt);
        let mut rgb = vec![0u8; hgt * wid * 3];
        let mut p1 = vec![false; hgt * wid];
        let mut p2 = vec![false; hgt * wid];
        for y in 0..hgt {
            for x in 0..wid {
                let i = y * wid + x;
                let inside = |b: &Body| {
                    let (bx, by) = (b.x.round() as usize, b.y.round() as usize);
                    x >= bx && x < bx + b.w && y >= by && y < by + b.h
                };
                let color = if inside(&b1) {
                    p1[i] = true;
                    colors[0]
                } else if inside(&b2) {
                    p2[i] = true;
                    colors[1]
                } else {
                    scene.map(|c| (c as i16 + texture[i]).clamp(0, 255) as u8)
                };
                rgb[i * 3..i * 3 + 3].copy_from_slice(&color);
            }
        }
        frames.push(rgb);
        m1.push(p1);
        m2.push(p2);
    }
    (
        FrameSequence::new(hgt, wid, 25.0, frames).expect("consistent frames"),
        MaskSet::new(hgt, wid, m1, m2).expect("consistent masks"),
    )
}

/// `per_class` samples for every class; sample `i` of a class uses palette
/// color `i` for the scene, so captions are distinct within a class.
pub fn generate_corpus(cfg: &SynthConfig) -> Vec<SynthSample> {
    assert!(
        cfg.per_class <= PALETTE.len(),
        "at most {} samples per class",
        PALETTE.len()
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    for (c, class) in cfg.classes.iter().enumerate() {
        for i in 0..cfg.per_class {
            let (color_name, scene) = PALETTE[i];
            let jitter = |rng: &mut ChaCha8Rng, base: [u8; 3]| {
                base.map(|v| v.saturating_add(rng.random_range(0..30)))
            };
            let people = [
                jitter(&mut rng, [240, 220, 190]),
                jitter(&mut rng, [60, 40, 30]),
            ];
            let (clip, masks) = render(cfg, class.motion, scene, people, &mut rng);
            out.push(SynthSample {
                id: format!("synth_{c:02}_{i:02}"),
                class_name: class.name.clone(),
                caption: class.caption.replace("{color}", color_name),
                clip,
                masks,
            });
        }
    }
    out
}

/// Writes `clips/<id>.raw`, `clips/<id>.mask` and returns the manifest
/// (records point at the written files).
pub fn write_corpus(
    dir: &Path,
    samples: &[SynthSample],
    vocab: &UnifiedVocabulary,
) -> Result<Manifest, CorpusError> {
    let clips = dir.join("clips");
    fs::create_dir_all(&clips).map_err(|e| CorpusError::io(&clips, e))?;
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let class = vocab.index_of(&s.class_name).ok_or_else(|| {
            CorpusError::Manifest(format!("class `{}` not in vocabulary", s.class_name))
        })?;
        let clip_path = clips.join(format!("{}.raw", s.id));
        let mask_path = clips.join(format!("{}.mask", s.id));
        s.clip
            .write_raw(&clip_path)
            .map_err(|e| CorpusError::Manifest(e.to_string()))?;
        s.masks
            .write(&mask_path)
            .map_err(|e| CorpusError::Manifest(e.to_string()))?;
        records.push(InteractionRecord {
            id: s.id.clone(),
            source: "synthetic".into(),
            hard_label: s.class_name.clone(),
            canonical_class: class,
            soft_caption: s.caption.clone(),
            clip_path,
            mask_path: Some(mask_path),
        });
    }
    Ok(Manifest { records })
}

//! Frozen per-frame patch transformers and the temporal embedding.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::nn;
use crate::params::{init_layer_norm, init_linear, normal_mat, ParamStore};
use crate::snapshot::{self, SnapshotError};
use crate::tensor::{Graph, Mat};
use crate::video_io::FrameSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Person,
    Background,
}

impl EncoderKind {
    pub fn prefix(self) -> &'static str {
        match self {
            EncoderKind::Person => "encoder.person",
            EncoderKind::Background => "encoder.background",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub depth: usize,
    pub heads: usize,
    pub d_v: usize,
    pub seed: u64,
    pub kind: EncoderKind,
}

impl EncoderConfig {
    pub fn person(seed: u64) -> Self {
        Self {
            patch_size: 8,
            depth: 2,
            heads: 4,
            d_v: 32,
            seed,
            kind: EncoderKind::Person,
        }
    }

    pub fn background(seed: u64) -> Self {
        Self {
            kind: EncoderKind::Background,
            ..Self::person(seed)
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.patch_size == 0 || self.depth == 0 || self.heads == 0 || self.d_v == 0 {
            return Err(EncoderError::Config(
                "patch_size, depth, heads and d_v must be positive".into(),
            ));
        }
        if self.d_v % self.heads != 0 {
            return Err(EncoderError::Config(format!(
                "d_v {} is not divisible by {} heads",
                self.d_v, self.heads
            )));
        }
        Ok(())
    }

    /// Patch-token count for `height × width` frames.
    pub fn patches(&self, height: usize, width: usize) -> Result<usize, EncoderError> {
        if height % self.patch_size != 0
            || width % self.patch_size != 0
            || height == 0
            || width == 0
        {
            return Err(EncoderError::Config(format!(
                "frame size {height}x{width} is not divisible by patch size {}",
                self.patch_size
            )));
        }
        Ok((height / self.patch_size) * (width / self.patch_size))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("encoder configuration error: {0}")]
    Config(String),
    #[error("{frames} frames exceed temporal capacity {capacity}")]
    Capacity { frames: usize, capacity: usize },
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
}

/// Per-frame patch features: one `P × d_v` matrix per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatures {
    pub values: Vec<Mat>,
    pub kind: EncoderKind,
}

impl FrameFeatures {
    pub fn frames(&self) -> usize {
        self.values.len()
    }

    pub fn patches(&self) -> usize {
        self.values.first().map_or(0, Mat::rows)
    }

    pub fn width(&self) -> usize {
        self.values.first().map_or(0, Mat::cols)
    }

    /// All tokens stacked frame-major into a `(T·P) × d_v` matrix.
    pub fn flatten(&self) -> Mat {
        let parts: Vec<&Mat> = self.values.iter().collect();
        Mat::concat_rows(&parts)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Mat::is_finite)
    }
}

/// A frozen encoder: its configuration, the frame size it was built for, and
/// its weights under `{kind prefix}.*`.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub height: usize,
    pub width: usize,
    pub params: ParamStore,
}

impl Encoder {
    /// Seeded initialization: patch embedding, patch positions, `depth`
    /// pre-norm blocks and a final norm.
    pub fn new(cfg: EncoderConfig, height: usize, width: usize) -> Result<Self, EncoderError> {
        cfg.validate()?;
        let patches = cfg.patches(height, width)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamStore::default();
        let p = cfg.kind.prefix();
        let patch_in = cfg.patch_size * cfg.patch_size * 3;
        let d = cfg.d_v;
        init_linear(
            &mut params,
            &mut rng,
            &format!("{p}.patch"),
            patch_in,
            d,
            (1.0 / patch_in as f64).sqrt(),
        );
        params.insert(format!("{p}.pos"), normal_mat(&mut rng, patches, d, 0.5));
        for l in 0..cfg.depth {
            nn::init_self_attention_block(
                &mut params,
                &mut rng,
                &format!("{p}.block{l}"),
                d,
                2 * d,
                (1.0 / d as f64).sqrt(),
            );
        }
        init_layer_norm(&mut params, &format!("{p}.ln_f"), d);
        Ok(Self {
            cfg,
            height,
            width,
            params,
        })
    }

    pub fn checksum(&self) -> String {
        self.params.checksum(|_| true)
    }

    /// Encodes every frame independently (frames run in parallel).
    pub fn encode_frames(&self, stream: &FrameSequence) -> Result<FrameFeatures, EncoderError> {
        if (stream.height(), stream.width()) != (self.height, self.width) {
            self.cfg.patches(stream.height(), stream.width())?;
            return Err(EncoderError::Config(format!(
                "encoder built for {}x{} frames, got {}x{}",
                self.height,
                self.width,
                stream.height(),
                stream.width()
            )));
        }
        let values = stream
            .frames()
            .par_iter()
            .map(|f| self.encode_frame(f))
            .collect();
        Ok(FrameFeatures {
            values,
            kind: self.cfg.kind,
        })
    }

    fn encode_frame(&self, rgb: &[u8]) -> Mat {
        let p = self.cfg.kind.prefix();
        let tokens = patchify(rgb, self.height, self.width, self.cfg.patch_size);
        let mut g = Graph::inference();
        let x = g.constant(tokens);
        let x = nn::linear(&mut g, &self.params, &format!("{p}.patch"), x);
        let pos = g.param(&self.params, &format!("{p}.pos"));
        let mut x = g.add(x, pos);
        for l in 0..self.cfg.depth {
            x = nn::self_attention_block(
                &mut g,
                &self.params,
                &format!("{p}.block{l}"),
                x,
                self.cfg.heads,
                false,
            );
        }
        let x = nn::layer_norm(&mut g, &self.params, &format!("{p}.ln_f"), x);
        g.value(x).clone()
    }

    pub fn save(&self, path: &Path) -> Result<(), EncoderError> {
        let meta = serde_json::json!({
            "config": self.cfg,
            "height": self.height,
            "width": self.width,
        });
        Ok(snapshot::save(path, &meta, &self.params)?)
    }

    pub fn load(path: &Path) -> Result<Self, EncoderError> {
        let (meta, params) = snapshot::load(path)?;
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| EncoderError::Config(format!("snapshot meta lacks `{k}`")))
        };
        let cfg: EncoderConfig = serde_json::from_value(field("config")?)
            .map_err(|e| EncoderError::Config(e.to_string()))?;
        let dim = |k: &str| -> Result<usize, EncoderError> {
            field(k)?
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| EncoderError::Config(format!("`{k}` is not an integer")))
        };
        let mut enc = Self::new(cfg, dim("height")?, dim("width")?)?;
        snapshot::check_no_extra(&enc.params, &params, |_| true)?;
        snapshot::restore_into(&mut enc.params, &params, |_| true)?;
        Ok(enc)
    }
}

/// Splits an RGB frame into row-major patches; each row is one patch
/// flattened as (y, x, channel) with values scaled to `[0, 1]`.
pub fn patchify(rgb: &[u8], height: usize, width: usize, patch: usize) -> Mat {
    let (ph, pw) = (height / patch, width / patch);
    let mut out = Mat::zeros(ph * pw, patch * patch * 3);
    for py in 0..ph {
        for px in 0..pw {
            let row = out.row_mut(py * pw + px);
            let mut i = 0;
            for y in 0..patch {
                for x in 0..patch {
                    let src = ((py * patch + y) * width + px * patch + x) * 3;
                    for c in 0..3 {
                        row[i] = rgb[src + c] as f64 / 255.0;
                        i += 1;
                    }
                }
            }
        }
    }
    out
}

/// Adds `table[t]` to every patch token of frame `t`.
pub fn add_temporal_embedding(
    f: &FrameFeatures,
    table: &Mat,
) -> Result<FrameFeatures, EncoderError> {
    if f.frames() > table.rows() {
        return Err(EncoderError::Capacity {
            frames: f.frames(),
            capacity: table.rows(),
        });
    }
    if f.frames() > 0 && f.width() != table.cols() {
        return Err(EncoderError::Config(format!(
            "temporal table width {} does not match features {}",
            table.cols(),
            f.width()
        )));
    }
    let values = f
        .values
        .iter()
        .enumerate()
        .map(|(t, m)| m.add_row(&table.slice_rows(t, 1)))
        .collect();
    Ok(FrameFeatures {
        values,
        kind: f.kind,
    })
}

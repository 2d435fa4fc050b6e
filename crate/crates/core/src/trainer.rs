//! Model assembly, the frozen/learnable parameter split, the optimization
//! loop and checkpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crossbeam_channel::bounded;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregator::{self, AggregatorError, QFormerConfig};
use crate::corpus::{ChatRecord, StreamId};
use crate::encoders::{Encoder, EncoderConfig, EncoderError, FrameFeatures};
use crate::fusion_lm::{
    self, Decode, FrozenLM, FusionError, LmConfig, MixPlan, MixedSequence, Tokenizer,
};
use crate::params::ParamStore;
use crate::snapshot::{self, SnapshotError};
use crate::tensor::{Graph, Mat, NodeId};
use crate::video_io::StreamTriplet;

/// The fixed chat question.
pub const QUESTION: &str = "Describe the interaction between the two people.";

pub const FROZEN_PREFIXES: [&str; 3] = ["encoder.person.", "encoder.background.", "lm."];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub person_encoder: EncoderConfig,
    pub background_encoder: EncoderConfig,
    pub qformer: QFormerConfig,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub lm_context: usize,
    pub lm_seed: u64,
    pub background_branch_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            person_encoder: EncoderConfig::person(101),
            background_encoder: EncoderConfig::background(202),
            qformer: QFormerConfig {
                seed: 303,
                ..QFormerConfig::default()
            },
            lm_layers: 2,
            lm_heads: 4,
            lm_context: 256,
            lm_seed: 404,
            background_branch_enabled: true,
        }
    }
}

impl ModelConfig {
    pub fn branches(&self) -> Vec<StreamId> {
        if self.background_branch_enabled {
            StreamId::ALL.to_vec()
        } else {
            vec![StreamId::P1, StreamId::P2]
        }
    }

    pub fn lm_config(&self, vocab_size: usize) -> LmConfig {
        LmConfig {
            layers: self.lm_layers,
            heads: self.lm_heads,
            d_model: self.qformer.d_text,
            vocab_size,
            context: self.lm_context,
            seed: self.lm_seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub checkpoint_interval: usize,
    pub frames_per_clip: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            steps: 300,
            batch_size: 8,
            seed: 0,
            clip_norm: 1.0,
            checkpoint_interval: 100,
            frames_per_clip: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr >= 0.0 && self.lr.is_finite())
            || self.batch_size == 0
            || self.frames_per_clip == 0
        {
            return Err(TrainError::Config(
                "lr must be finite and non-negative; batch_size and frames_per_clip positive"
                    .into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training configuration error: {0}")]
    Config(String),
    #[error("parameter `{0}` belongs to no known group")]
    Unclassified(String),
    #[error("non-finite loss at step {step} for records {records:?}")]
    NonFinite { step: usize, records: Vec<String> },
    #[error("frozen weights changed: {0}")]
    FrozenChanged(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Aggregator(#[from] AggregatorError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
}

/// Frozen encoders and LM plus the learnable per-branch parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub tokenizer: Tokenizer,
    pub person: Encoder,
    pub background: Encoder,
    pub lm: FrozenLM,
    pub trainable: ParamStore,
}

impl Model {
    pub fn new(cfg: ModelConfig, tokenizer: Tokenizer) -> Result<Self, TrainError> {
        if cfg.person_encoder.d_v != cfg.qformer.d_v
            || cfg.background_encoder.d_v != cfg.qformer.d_v
        {
            return Err(TrainError::Config(
                "encoder d_v must equal the Q-Former d_v".into(),
            ));
        }
        let person = Encoder::new(cfg.person_encoder.clone(), cfg.height, cfg.width)?;
        let background = Encoder::new(cfg.background_encoder.clone(), cfg.height, cfg.width)?;
        let lm = FrozenLM::new(cfg.lm_config(tokenizer.len()));
        let mut trainable = ParamStore::default();
        for b in cfg.branches() {
            aggregator::init_branch(&mut trainable, &cfg.qformer, b)?;
        }
        Ok(Self {
            cfg,
            tokenizer,
            person,
            background,
            lm,
            trainable,
        })
    }

    /// Every parameter name with its value, frozen stores first.
    pub fn all_params(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.person
            .params
            .iter()
            .chain(self.background.params.iter())
            .chain(self.lm.params.iter())
            .chain(self.trainable.iter())
    }

    pub fn frozen_checksum(&self) -> String {
        let mut all = ParamStore::default();
        for (n, m) in self.all_params().filter(|(n, _)| is_frozen(n)) {
            all.insert(n, m.clone());
        }
        all.checksum(|_| true)
    }

    pub fn trainable_checksum(&self) -> String {
        self.trainable.checksum(|_| true)
    }

    /// Runs the frozen encoders on a clip already sampled to `k` frames.
    pub fn encode(
        &self,
        streams: &StreamTriplet,
    ) -> Result<BTreeMap<StreamId, FrameFeatures>, TrainError> {
        let mut out = BTreeMap::new();
        for b in self.cfg.branches() {
            let f = match b {
                StreamId::P1 => self.person.encode_frames(&streams.p1)?,
                StreamId::P2 => self.person.encode_frames(&streams.p2)?,
                StreamId::Bg => self.background.encode_frames(&streams.bg)?,
            };
            out.insert(b, f);
        }
        Ok(out)
    }

    /// The chat record used for a clip: question, slots, target.
    pub fn chat_record(&self, target: &str) -> ChatRecord {
        ChatRecord::prompt(QUESTION, self.cfg.background_branch_enabled, target)
            .expect("fixed prompt with a non-empty target is valid")
    }

    fn branch_nodes(
        &self,
        g: &mut Graph,
        features: &BTreeMap<StreamId, FrameFeatures>,
    ) -> Result<BTreeMap<StreamId, NodeId>, TrainError> {
        let mut slots = BTreeMap::new();
        for b in self.cfg.branches() {
            if let Some(f) = features.get(&b) {
                slots.insert(
                    b,
                    aggregator::branch_graph(g, &self.trainable, &self.cfg.qformer, b, f)?,
                );
            }
        }
        Ok(slots)
    }

    /// Loss of one example; with `track`, also the trainable gradients.
    pub fn example_loss(
        &self,
        ex: &TrainExample,
        track: Option<&BTreeSet<String>>,
    ) -> Result<(f64, BTreeMap<String, Mat>), TrainError> {
        let mut g = match track {
            Some(t) => Graph::tracking(t),
            None => Graph::inference(),
        };
        let slots = self.branch_nodes(&mut g, &ex.features)?;
        let plan = MixPlan::new(&ex.record, &self.tokenizer, true);
        let (x, layout) = fusion_lm::assemble_graph(&mut g, &self.lm, &plan, &slots)?;
        let l = fusion_lm::loss_graph(&mut g, &self.lm, x, &layout)?;
        let loss = g.value(l).get(0, 0);
        let grads = if track.is_some() {
            g.backward(l).into_params()
        } else {
            BTreeMap::new()
        };
        Ok((loss, grads))
    }

    /// Prompt-only mixed sequence (no target) for decoding.
    pub fn prompt_sequence(
        &self,
        features: &BTreeMap<StreamId, FrameFeatures>,
    ) -> Result<MixedSequence, TrainError> {
        let mut g = Graph::inference();
        let slots = self.branch_nodes(&mut g, features)?;
        let plan = MixPlan::new(&self.chat_record("-"), &self.tokenizer, false);
        let (x, layout) = fusion_lm::assemble_graph(&mut g, &self.lm, &plan, &slots)?;
        Ok(MixedSequence {
            embeddings: g.value(x).clone(),
            layout,
        })
    }

    pub fn caption(
        &self,
        features: &BTreeMap<StreamId, FrameFeatures>,
        decode: &Decode,
        max_len: usize,
    ) -> Result<String, TrainError> {
        let prompt = self.prompt_sequence(features)?;
        Ok(fusion_lm::generate(
            &prompt,
            &self.lm,
            &self.tokenizer,
            decode,
            max_len,
        )?)
    }
}

pub fn is_frozen(name: &str) -> bool {
    FROZEN_PREFIXES.iter().any(|p| name.starts_with(p))
}

fn is_trainable(name: &str) -> bool {
    StreamId::ALL.iter().any(|b| {
        let root = aggregator::branch_prefix(*b);
        name.starts_with(&format!("{root}.qformer."))
            || name.starts_with(&format!("{root}.proj."))
            || name == aggregator::temporal_name(*b)
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParameterPartition {
    pub trainable: BTreeSet<String>,
    pub frozen: BTreeSet<String>,
}

/// Classifies every parameter by name; anything outside the known groups,
/// or a learnable-group name held in a frozen store (and vice versa), is an
/// error.
pub fn partition_parameters(model: &Model) -> Result<ParameterPartition, TrainError> {
    let mut p = ParameterPartition {
        trainable: BTreeSet::new(),
        frozen: BTreeSet::new(),
    };
    let frozen_stores = [
        &model.person.params,
        &model.background.params,
        &model.lm.params,
    ];
    for store in frozen_stores {
        for n in store.names() {
            if !is_frozen(n) {
                return Err(TrainError::Unclassified(n.to_string()));
            }
            p.frozen.insert(n.to_string());
        }
    }
    for n in model.trainable.names() {
        if !is_trainable(n) {
            return Err(TrainError::Unclassified(n.to_string()));
        }
        p.trainable.insert(n.to_string());
    }
    Ok(p)
}

/// A record with its frozen features computed once.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub id: String,
    pub record: ChatRecord,
    pub features: BTreeMap<StreamId, FrameFeatures>,
}

/// Loads and encodes clips with a bounded producer/consumer pipeline:
/// `load` runs on a worker thread (masking, sampling), encoding on the
/// caller's thread. Output order follows `items`.
pub fn prepare_examples<T, E>(
    model: &Model,
    items: Vec<T>,
    frames_per_clip: usize,
    load: impl Fn(T) -> Result<(String, String, StreamTriplet), E> + Send + Sync,
) -> Result<Vec<TrainExample>, E>
where
    T: Send,
    E: From<TrainError> + Send,
{
    let (tx, rx) = bounded::<Result<(String, String, StreamTriplet), E>>(4);
    std::thread::scope(|s| {
        s.spawn(move || {
            for it in items {
                if tx.send(load(it)).is_err() {
                    break;
                }
            }
        });
        let mut out = Vec::new();
        for msg in rx {
            let (id, target, streams) = msg?;
            let features = model.encode(&streams.sampled(frames_per_clip))?;
            out.push(TrainExample {
                id,
                record: model.chat_record(&target),
                features,
            });
        }
        Ok(out)
    })
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: ParamStore,
    pub v: ParamStore,
    pub t: u64,
}

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let mut m = ParamStore::default();
        for (n, p) in params.iter() {
            m.insert(n, Mat::zeros(p.rows(), p.cols()));
        }
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Mat>, lr: f64) {
        self.t += 1;
        let (b1, b2) = ADAM_BETAS;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .expect("gradient for a known parameter");
            let m = self.m.get_mut(name).expect("moment for every parameter");
            let v = self.v.get_mut(name).expect("moment for every parameter");
            let data = p.data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                let mi = &mut m.data_mut()[i];
                *mi = b1 * *mi + (1.0 - b1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let step = (m.data()[i] / c1) / ((v.data()[i] / c2).sqrt() + ADAM_EPS);
                data[i] -= lr * step;
            }
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Mat>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Mat::sq_norm).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            *g = g.scale(s);
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub cfg: TrainConfig,
    pub adam: AdamState,
    pub step: usize,
    pub partition: ParameterPartition,
}

impl TrainState {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let partition = partition_parameters(&model)?;
        Ok(Self {
            adam: AdamState::new(&model.trainable),
            model,
            cfg,
            step: 0,
            partition,
        })
    }

    /// Mean loss over `batch` without updating anything.
    pub fn batch_loss(&self, batch: &[TrainExample]) -> Result<f64, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let losses: Vec<f64> = batch
            .par_iter()
            .map(|ex| self.model.example_loss(ex, None).map(|(l, _)| l))
            .collect::<Result<_, _>>()?;
        Ok(losses.iter().sum::<f64>() / batch.len() as f64)
    }

    /// One clipped Adam step on the mean batch loss; returns the loss
    /// before the update. Per-example work runs in parallel, reductions in
    /// batch order.
    pub fn train_step(&mut self, batch: &[TrainExample]) -> Result<f64, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let track = &self.partition.trainable;
        let results: Vec<(f64, BTreeMap<String, Mat>)> = batch
            .par_iter()
            .map(|ex| self.model.example_loss(ex, Some(track)))
            .collect::<Result<_, _>>()?;
        let n = batch.len() as f64;
        let loss = results.iter().map(|(l, _)| l).sum::<f64>() / n;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite {
                step: self.step,
                records: batch.iter().map(|e| e.id.clone()).collect(),
            });
        }
        let mut grads: BTreeMap<String, Mat> = BTreeMap::new();
        for (_, g) in results {
            for (name, m) in g {
                match grads.get_mut(&name) {
                    Some(acc) => acc.add_assign(&m),
                    None => {
                        grads.insert(name, m);
                    }
                }
            }
        }
        for g in grads.values_mut() {
            *g = g.scale(1.0 / n);
        }
        clip_global_norm(&mut grads, self.cfg.clip_norm);
        self.adam
            .update(&mut self.model.trainable, &grads, self.cfg.lr);
        self.step += 1;
        Ok(loss)
    }

    /// Runs `cfg.steps` steps over seeded per-epoch shuffles of `examples`,
    /// calling `on_step(step, loss, state)` after each one.
    pub fn fit(
        &mut self,
        examples: &[TrainExample],
        mut on_step: impl FnMut(usize, f64, &TrainState) -> Result<(), TrainError>,
    ) -> Result<Vec<f64>, TrainError> {
        if examples.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let mut order: Vec<usize> = Vec::new();
        let mut losses = Vec::with_capacity(self.cfg.steps);
        while self.step < self.cfg.steps {
            if order.is_empty() {
                order = (0..examples.len()).collect();
                order.shuffle(&mut rng);
            }
            let take = self.cfg.batch_size.min(order.len());
            let batch: Vec<TrainExample> =
                order.drain(..take).map(|i| examples[i].clone()).collect();
            let loss = self.train_step(&batch)?;
            losses.push(loss);
            on_step(self.step, loss, self)?;
        }
        Ok(losses)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), TrainError> {
        let mut store = ParamStore::default();
        for (n, m) in self.model.all_params() {
            store.insert(n, m.clone());
        }
        for (n, m) in self.adam.m.iter() {
            store.insert(format!("adam.m.{n}"), m.clone());
        }
        for (n, m) in self.adam.v.iter() {
            store.insert(format!("adam.v.{n}"), m.clone());
        }
        let meta = serde_json::json!({
            "model": self.model.cfg,
            "train": self.cfg,
            "seed": self.cfg.seed,
            "step": self.step,
            "adam_t": self.adam.t,
            "tokenizer": self.model.tokenizer.vocab(),
            "frozen_checksum": self.model.frozen_checksum(),
        });
        Ok(snapshot::save(path, &meta, &store)?)
    }

    /// Rebuilds the model from the checkpoint's config echo and restores
    /// every array.
    pub fn load_checkpoint(path: &Path) -> Result<Self, TrainError> {
        let (meta, store) = snapshot::load(path)?;
        let get = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| TrainError::Config(format!("checkpoint lacks `{k}`")))
        };
        let parse = |e: serde_json::Error| TrainError::Config(e.to_string());
        let model_cfg: ModelConfig = serde_json::from_value(get("model")?).map_err(parse)?;
        let train_cfg: TrainConfig = serde_json::from_value(get("train")?).map_err(parse)?;
        let vocab: Vec<String> = serde_json::from_value(get("tokenizer")?).map_err(parse)?;
        let model = Model::new(model_cfg, Tokenizer::from_vocab(vocab)?)?;
        let mut state = TrainState::new(model, train_cfg)?;
        state.restore_arrays(&meta, &store)?;
        Ok(state)
    }

    /// Restores a checkpoint into this (already configured) state. Shapes
    /// must match this model exactly.
    pub fn restore_checkpoint(&mut self, path: &Path) -> Result<(), TrainError> {
        let (meta, store) = snapshot::load(path)?;
        self.restore_arrays(&meta, &store)
    }

    fn restore_arrays(
        &mut self,
        meta: &serde_json::Value,
        store: &ParamStore,
    ) -> Result<(), TrainError> {
        let model_names: BTreeSet<String> = self
            .model
            .all_params()
            .map(|(n, _)| n.to_string())
            .collect();
        for n in store.names() {
            if !n.starts_with("adam.") && !model_names.contains(n) {
                return Err(SnapshotError::Unexpected(n.to_string()).into());
            }
        }
        let keep = |n: &str| !n.starts_with("adam.");
        snapshot::restore_into(&mut self.model.trainable, store, keep)?;
        snapshot::restore_into(&mut self.model.person.params, store, keep)?;
        snapshot::restore_into(&mut self.model.background.params, store, keep)?;
        snapshot::restore_into(&mut self.model.lm.params, store, keep)?;
        let strip = |prefix: &str, target: &mut ParamStore| -> Result<(), TrainError> {
            let mut sub = ParamStore::default();
            for (n, m) in store.iter().filter(|(n, _)| n.starts_with(prefix)) {
                sub.insert(&n[prefix.len()..], m.clone());
            }
            Ok(snapshot::restore_into(target, &sub, |_| true)?)
        };
        strip("adam.m.", &mut self.adam.m)?;
        strip("adam.v.", &mut self.adam.v)?;
        let as_u64 = |k: &str| meta.get(k).and_then(|v| v.as_u64()).unwrap_or(0);
        self.step = as_u64("step") as usize;
        self.adam.t = as_u64("adam_t");
        if let Some(sum) = meta.get("frozen_checksum").and_then(|v| v.as_str()) {
            if sum != self.model.frozen_checksum() {
                return Err(TrainError::FrozenChanged(
                    "checkpoint frozen checksum does not match its arrays".into(),
                ));
            }
        }
        Ok(())
    }
}

//! Word-level tokenizer, the frozen causal decoder, cross-modal sequence
//! assembly, next-token loss and caption decoding.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregator::VideoEmbedding;
use crate::corpus::{ChatRecord, Segment, StreamId};
use crate::nn;
use crate::params::{init_layer_norm, init_linear, normal_mat, ParamStore};
use crate::tensor::{Graph, Mat, NodeId};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;

const CLOSING_PUNCT: [&str; 6] = [".", ",", "!", "?", ";", ":"];

#[derive(Debug, thiserror::Error)]
pub enum FusionError {
    #[error("no video embedding for slot {0}")]
    MissingEmbedding(StreamId),
    #[error("sequence of {len} positions exceeds context {context}")]
    Capacity { len: usize, context: usize },
    #[error("sample has no target positions")]
    Degenerate,
    #[error("embedding width {found} does not match the language model width {expected}")]
    Width { expected: usize, found: usize },
    #[error("tokenizer error: {0}")]
    Tokenizer(String),
}

/// Lowercased word and punctuation pieces. Words are runs of alphanumerics,
/// apostrophes and hyphens; any other visible character is its own piece.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() || c == '\'' || c == '-' {
            word.extend(c.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            out.push(c.to_lowercase().collect());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Joins pieces with single spaces, attaching closing punctuation.
pub fn join_words<S: AsRef<str>>(pieces: &[S]) -> String {
    let mut out = String::new();
    for (i, p) in pieces.iter().enumerate() {
        let p = p.as_ref();
        if i > 0 && !CLOSING_PUNCT.contains(&p) {
            out.push(' ');
        }
        out.push_str(p);
    }
    out
}

/// The canonical text form the tokenizer round-trips exactly.
pub fn normalize_text(text: &str) -> String {
    join_words(&split_words(text))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    vocab: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Tokenizer {
    /// Specials first, then every word of `texts` in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(split_words).collect();
        let vocab = [PAD, BOS, EOS, UNK]
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        Self::from_vocab(vocab).expect("built vocabulary is valid")
    }

    pub fn from_vocab(vocab: Vec<String>) -> Result<Self, FusionError> {
        if vocab.len() < 4 || vocab[..4] != [PAD, BOS, EOS, UNK] {
            return Err(FusionError::Tokenizer(
                "vocabulary must start with the four specials".into(),
            ));
        }
        let mut index = BTreeMap::new();
        for (i, w) in vocab.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(FusionError::Tokenizer(format!("duplicate token `{w}`")));
            }
        }
        Ok(Self { vocab, index })
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Unknown words map to `<unk>`; specials are never produced from text.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        split_words(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(UNK_ID))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&i| i != PAD_ID && i != BOS_ID && i != EOS_ID)
            .map(|&i| self.vocab.get(i).map_or(UNK, String::as_str))
            .collect();
        join_words(&words)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.vocab).expect("vocab serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, FusionError> {
        let vocab: Vec<String> =
            serde_json::from_str(text).map_err(|e| FusionError::Tokenizer(e.to_string()))?;
        Self::from_vocab(vocab)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub context: usize,
    pub seed: u64,
}

impl LmConfig {
    pub fn new(vocab_size: usize, seed: u64) -> Self {
        Self {
            layers: 2,
            heads: 4,
            d_model: 64,
            vocab_size,
            context: 256,
            seed,
        }
    }
}

/// Seeded decoder-only transformer whose weights (`lm.*`) are never trained.
#[derive(Clone, Debug)]
pub struct FrozenLM {
    pub cfg: LmConfig,
    pub params: ParamStore,
}

impl FrozenLM {
    pub fn new(cfg: LmConfig) -> Self {
        assert!(
            cfg.d_model % cfg.heads == 0,
            "d_model must be divisible by heads"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamStore::default();
        let d = cfg.d_model;
        let std = (1.0 / d as f64).sqrt();
        params.insert("lm.tok_emb", normal_mat(&mut rng, cfg.vocab_size, d, 1.0));
        params.insert("lm.pos_emb", normal_mat(&mut rng, cfg.context, d, 0.3));
        for l in 0..cfg.layers {
            nn::init_self_attention_block(
                &mut params,
                &mut rng,
                &format!("lm.block{l}"),
                d,
                4 * d,
                std,
            );
        }
        init_layer_norm(&mut params, "lm.ln_f", d);
        init_linear(&mut params, &mut rng, "lm.head", d, cfg.vocab_size, std);
        Self { cfg, params }
    }

    pub fn checksum(&self) -> String {
        self.params.checksum(|_| true)
    }

    /// Token embedding rows for `ids`.
    pub fn embed_graph(&self, g: &mut Graph, ids: &[usize]) -> NodeId {
        let table = g.param(&self.params, "lm.tok_emb");
        g.gather(table, ids)
    }

    /// Logits `L × V` for an `L × d_model` input sequence.
    pub fn forward_graph(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let len = g.value(x).rows();
        let pos = g.param(&self.params, "lm.pos_emb");
        let pos = g.slice_rows(pos, 0, len);
        let mut x = g.add(x, pos);
        for l in 0..self.cfg.layers {
            x = nn::self_attention_block(
                g,
                &self.params,
                &format!("lm.block{l}"),
                x,
                self.cfg.heads,
                true,
            );
        }
        let x = nn::layer_norm(g, &self.params, "lm.ln_f", x);
        nn::linear(g, &self.params, "lm.head", x)
    }

    pub fn logits(&self, embeddings: &Mat) -> Result<Mat, FusionError> {
        self.check_len(embeddings.rows())?;
        let mut g = Graph::inference();
        let x = g.constant(embeddings.clone());
        let out = self.forward_graph(&mut g, x);
        Ok(g.value(out).clone())
    }

    fn check_len(&self, len: usize) -> Result<(), FusionError> {
        if len > self.cfg.context {
            return Err(FusionError::Capacity {
                len,
                context: self.cfg.context,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Piece {
    Tokens(Vec<usize>),
    Slot(StreamId),
}

/// Token-level layout of a chat record: `<bos>`, the prompt pieces, and (for
/// training) the target ids followed by `<eos>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixPlan {
    pub pieces: Vec<Piece>,
    pub target: Vec<usize>,
}

impl MixPlan {
    pub fn new(record: &ChatRecord, tok: &Tokenizer, with_target: bool) -> Self {
        let mut pieces = vec![Piece::Tokens(vec![BOS_ID])];
        for s in record.segments() {
            match s {
                Segment::Text(t) => pieces.push(Piece::Tokens(tok.encode(t))),
                Segment::Slot(b) => pieces.push(Piece::Slot(*b)),
            }
        }
        let target = if with_target {
            let mut t = tok.encode(record.target());
            t.push(EOS_ID);
            t
        } else {
            Vec::new()
        };
        Self { pieces, target }
    }

    pub fn prompt_tokens(&self) -> usize {
        self.pieces
            .iter()
            .map(|p| match p {
                Piece::Tokens(t) => t.len(),
                Piece::Slot(_) => 0,
            })
            .sum()
    }
}

/// Per-position layout of an assembled sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    /// Token id at each position; `None` inside video slots.
    pub token_ids: Vec<Option<usize>>,
    pub loss_mask: Vec<bool>,
    pub slot_spans: BTreeMap<StreamId, (usize, usize)>,
}

impl Layout {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// `(row, id)` pairs: logits at `row` predict the masked token at `row+1`.
    pub fn targets(&self) -> Vec<(usize, usize)> {
        self.loss_mask
            .iter()
            .enumerate()
            .filter(|(i, &m)| m && *i > 0)
            .map(|(i, _)| {
                (
                    i - 1,
                    self.token_ids[i].expect("masked positions are tokens"),
                )
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedSequence {
    pub embeddings: Mat,
    pub layout: Layout,
}

impl MixedSequence {
    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.rows() == 0
    }

    pub fn loss_mask(&self) -> &[bool] {
        &self.layout.loss_mask
    }

    pub fn slot_spans(&self) -> &BTreeMap<StreamId, (usize, usize)> {
        &self.layout.slot_spans
    }
}

/// Builds the `L × d_model` input node for `plan`, with each slot replaced
/// by the rows of its node in `slots`.
pub fn assemble_graph(
    g: &mut Graph,
    lm: &FrozenLM,
    plan: &MixPlan,
    slots: &BTreeMap<StreamId, NodeId>,
) -> Result<(NodeId, Layout), FusionError> {
    let mut parts = Vec::new();
    let mut token_ids = Vec::new();
    let mut slot_spans = BTreeMap::new();
    for p in &plan.pieces {
        match p {
            Piece::Tokens(ids) if ids.is_empty() => {}
            Piece::Tokens(ids) => {
                parts.push(lm.embed_graph(g, ids));
                token_ids.extend(ids.iter().map(|&i| Some(i)));
            }
            Piece::Slot(b) => {
                let node = *slots.get(b).ok_or(FusionError::MissingEmbedding(*b))?;
                let (rows, cols) = g.value(node).shape();
                if cols != lm.cfg.d_model {
                    return Err(FusionError::Width {
                        expected: lm.cfg.d_model,
                        found: cols,
                    });
                }
                slot_spans.insert(*b, (token_ids.len(), rows));
                parts.push(node);
                token_ids.extend(std::iter::repeat_n(None, rows));
            }
        }
    }
    let mut loss_mask = vec![false; token_ids.len()];
    if !plan.target.is_empty() {
        parts.push(lm.embed_graph(g, &plan.target));
        token_ids.extend(plan.target.iter().map(|&i| Some(i)));
        loss_mask.resize(token_ids.len(), true);
    }
    lm.check_len(token_ids.len())?;
    let x = g.concat_rows(&parts);
    Ok((
        x,
        Layout {
            token_ids,
            loss_mask,
            slot_spans,
        },
    ))
}

/// Mean next-token cross-entropy over the masked positions.
pub fn loss_graph(
    g: &mut Graph,
    lm: &FrozenLM,
    x: NodeId,
    layout: &Layout,
) -> Result<NodeId, FusionError> {
    let targets = layout.targets();
    if targets.is_empty() {
        return Err(FusionError::Degenerate);
    }
    let logits = lm.forward_graph(g, x);
    Ok(g.cross_entropy(logits, &targets))
}

/// Interleaves text-token embeddings and branch embeddings for `record`.
pub fn mix_tokens(
    record: &ChatRecord,
    embs: &[VideoEmbedding],
    tok: &Tokenizer,
    lm: &FrozenLM,
    with_target: bool,
) -> Result<MixedSequence, FusionError> {
    let mut g = Graph::inference();
    let slots: BTreeMap<StreamId, NodeId> = embs
        .iter()
        .map(|e| (e.branch, g.constant(e.values.clone())))
        .collect();
    let plan = MixPlan::new(record, tok, with_target);
    let (x, layout) = assemble_graph(&mut g, lm, &plan, &slots)?;
    Ok(MixedSequence {
        embeddings: g.value(x).clone(),
        layout,
    })
}

pub fn compute_loss(mix: &MixedSequence, lm: &FrozenLM) -> Result<f64, FusionError> {
    let mut g = Graph::inference();
    let x = g.constant(mix.embeddings.clone());
    let l = loss_graph(&mut g, lm, x, &mix.layout)?;
    Ok(g.value(l).get(0, 0))
}

/// Mean of `-log softmax(logits[row])[id]` over `targets`.
pub fn cross_entropy(logits: &Mat, targets: &[(usize, usize)]) -> f64 {
    let total: f64 = targets
        .iter()
        .map(|&(r, id)| {
            let row = logits.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[id]
        })
        .sum();
    total / targets.len() as f64
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Decode {
    Greedy,
    TopK { k: usize, seed: u64 },
}

/// Autoregressive decoding from `prompt` until `<eos>` or `max_len` tokens.
pub fn generate_ids(
    lm: &FrozenLM,
    prompt: &Mat,
    decode: &Decode,
    max_len: usize,
) -> Result<Vec<usize>, FusionError> {
    let needed = prompt.rows() + max_len;
    if needed > lm.cfg.context {
        return Err(FusionError::Capacity {
            len: needed,
            context: lm.cfg.context,
        });
    }
    let mut rng = match decode {
        Decode::TopK { seed, .. } => Some(ChaCha8Rng::seed_from_u64(*seed)),
        Decode::Greedy => None,
    };
    let emb = lm.params.get("lm.tok_emb").expect("token table");
    let mut seq = prompt.clone();
    let mut out = Vec::new();
    for _ in 0..max_len {
        let logits = lm.logits(&seq)?;
        let last = logits.row(logits.rows() - 1);
        let next = match (decode, rng.as_mut()) {
            (Decode::TopK { k, .. }, Some(r)) => sample_top_k(last, *k, r),
            _ => argmax(last),
        };
        if next == EOS_ID {
            break;
        }
        out.push(next);
        seq = Mat::concat_rows(&[&seq, &emb.slice_rows(next, 1)]);
    }
    Ok(out)
}

pub fn generate(
    prompt: &MixedSequence,
    lm: &FrozenLM,
    tok: &Tokenizer,
    decode: &Decode,
    max_len: usize,
) -> Result<String, FusionError> {
    Ok(tok.decode(&generate_ids(lm, &prompt.embeddings, decode, max_len)?))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn sample_top_k(v: &[f64], k: usize, rng: &mut ChaCha8Rng) -> usize {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    order.truncate(k.max(1));
    let m = v[order[0]];
    let w: Vec<f64> = order.iter().map(|&i| (v[i] - m).exp()).collect();
    let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
    for (i, wi) in order.iter().zip(&w) {
        if u < *wi {
            return *i;
        }
        u -= wi;
    }
    *order.last().unwrap()
}

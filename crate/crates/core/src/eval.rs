//! Caption similarity, vocabulary-constrained classification, macro-F1 and
//! the open-set protocol.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{CorpusError, UnifiedVocabulary};
use crate::fusion_lm::{self, split_words, Decode, FrozenLM, Tokenizer, BOS_ID};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{predictions} predictions for {truths} truths")]
    LengthMismatch { predictions: usize, truths: usize },
    #[error("class index {index} outside {classes} classes")]
    BadIndex { index: usize, classes: usize },
    #[error("evaluation configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Deterministic text encoder producing unit vectors (or zero for text
/// without tokens).
pub trait SentenceEmbedder: Send + Sync {
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Mean of seeded per-token Gaussian vectors, L2-normalized. Each token's
/// vector is derived from a SHA-256 of the seed and the token.
#[derive(Clone, Debug)]
pub struct HashedEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl Default for HashedEmbedder {
    fn default() -> Self {
        Self { dim: 256, seed: 17 }
    }
}

impl HashedEmbedder {
    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(token.as_bytes());
        let digest: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        (0..self.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    }
}

impl SentenceEmbedder for HashedEmbedder {
    fn embed(&self, text: &str) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for w in split_words(text) {
            for (a, v) in acc.iter_mut().zip(self.token_vector(&w)) {
                *a += v;
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            acc.iter_mut().for_each(|v| *v /= norm);
        }
        acc
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub score: f64,
    /// Set when either side is empty; the score is then 0.
    pub warning: bool,
}

pub fn caption_similarity(
    generated: &str,
    reference: &str,
    emb: &dyn SentenceEmbedder,
) -> Similarity {
    let (a, b) = (emb.embed(generated), emb.embed(reference));
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if generated.trim().is_empty() || reference.trim().is_empty() || na == 0.0 || nb == 0.0 {
        return Similarity {
            score: 0.0,
            warning: true,
        };
    }
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    Similarity {
        score: (dot / (na * nb)).clamp(-1.0, 1.0),
        warning: false,
    }
}

/// Produces a free-text answer for a rendered classifier prompt; `caption`
/// is the caption the prompt was rendered from.
pub trait Responder: Send + Sync {
    fn respond(&self, prompt: &str, caption: &str) -> String;
}

impl<F: Fn(&str, &str) -> String + Send + Sync> Responder for F {
    fn respond(&self, prompt: &str, caption: &str) -> String {
        self(prompt, caption)
    }
}

/// Answers with the caption itself, so only class names the caption
/// already spells out are accepted.
pub struct EchoResponder;

impl Responder for EchoResponder {
    fn respond(&self, _prompt: &str, caption: &str) -> String {
        caption.to_string()
    }
}

/// Greedy continuation of the prompt text by the frozen LM.
pub struct LmResponder<'a> {
    pub lm: &'a FrozenLM,
    pub tokenizer: &'a Tokenizer,
    pub max_len: usize,
}

impl Responder for LmResponder<'_> {
    fn respond(&self, prompt: &str, _caption: &str) -> String {
        let mut ids = vec![BOS_ID];
        ids.extend(self.tokenizer.encode(prompt));
        let keep = self.lm.cfg.context.saturating_sub(self.max_len).max(1);
        if ids.len() > keep {
            ids.drain(1..ids.len() - keep + 1);
        }
        let emb = self.lm.params.get("lm.tok_emb").expect("token table");
        let rows: Vec<_> = ids.iter().map(|&i| emb.slice_rows(i, 1)).collect();
        let refs: Vec<_> = rows.iter().collect();
        let prompt = crate::tensor::Mat::concat_rows(&refs);
        fusion_lm::generate_ids(self.lm, &prompt, &Decode::Greedy, self.max_len)
            .map(|out| self.tokenizer.decode(&out))
            .unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierPromptSpec {
    /// Must contain `{caption}` and `{classes}`.
    pub template: String,
}

impl Default for ClassifierPromptSpec {
    fn default() -> Self {
        Self {
            template: "caption: {caption} choose the one interaction from this list that the caption describes: {classes}. answer:"
                .into(),
        }
    }
}

impl ClassifierPromptSpec {
    pub fn render(&self, caption: &str, classes: &[String]) -> String {
        self.template
            .replace("{caption}", caption)
            .replace("{classes}", &classes.join(", "))
    }
}

/// Classes whose names occur in `text` on word boundaries, ignoring a match
/// that lies inside a longer match of another class.
pub fn scan_class_names(text: &str, classes: &[String]) -> Vec<usize> {
    let words = split_words(text);
    let mut spans: Vec<(usize, usize, usize)> = Vec::new();
    for (c, name) in classes.iter().enumerate() {
        let pat = split_words(name);
        if pat.is_empty() || pat.len() > words.len() {
            continue;
        }
        for s in 0..=words.len() - pat.len() {
            if words[s..s + pat.len()] == pat[..] {
                spans.push((s, s + pat.len(), c));
            }
        }
    }
    let mut found: Vec<usize> = spans
        .iter()
        .filter(|&&(s, e, _)| {
            !spans
                .iter()
                .any(|&(s2, e2, _)| s2 <= s && e <= e2 && (e2 - s2) > (e - s))
        })
        .map(|&(_, _, c)| c)
        .collect();
    found.sort_unstable();
    found.dedup();
    found
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Classification {
    pub class: usize,
    pub fallback: bool,
}

/// Renders the prompt, asks `responder`, and accepts a unique class-name
/// match; otherwise picks the class whose caption in `class_captions` is
/// most similar to `caption` (ties go to the lower index).
pub fn classify_caption(
    caption: &str,
    classes: &[String],
    class_captions: &[String],
    spec: &ClassifierPromptSpec,
    responder: &dyn Responder,
    emb: &dyn SentenceEmbedder,
) -> Classification {
    assert!(
        !classes.is_empty(),
        "classification needs at least one class"
    );
    assert_eq!(classes.len(), class_captions.len(), "one caption per class");
    if classes.len() == 1 {
        return Classification {
            class: 0,
            fallback: false,
        };
    }
    let answer = responder.respond(&spec.render(caption, classes), caption);
    if let [only] = scan_class_names(&answer, classes)[..] {
        return Classification {
            class: only,
            fallback: false,
        };
    }
    Classification {
        class: nearest_class(caption, class_captions, emb),
        fallback: true,
    }
}

pub fn nearest_class(
    caption: &str,
    class_captions: &[String],
    emb: &dyn SentenceEmbedder,
) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, c) in class_captions.iter().enumerate() {
        let s = caption_similarity(caption, c, emb).score;
        if s > best.1 {
            best = (i, s);
        }
    }
    best.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    pub predicted: usize,
    /// No support and no predictions; scored 0.
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub macro_f1: f64,
    pub per_class: Vec<ClassScore>,
}

pub fn macro_f1(
    predictions: &[usize],
    truths: &[usize],
    num_classes: usize,
) -> Result<F1Report, EvalError> {
    let all: Vec<usize> = (0..num_classes).collect();
    macro_f1_over(predictions, truths, num_classes, &all)
}

/// Per-class scores for all classes; the macro average runs over `classes`.
pub fn macro_f1_over(
    predictions: &[usize],
    truths: &[usize],
    num_classes: usize,
    classes: &[usize],
) -> Result<F1Report, EvalError> {
    if predictions.len() != truths.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            truths: truths.len(),
        });
    }
    if let Some(&bad) = predictions
        .iter()
        .chain(truths)
        .chain(classes)
        .find(|&&i| i >= num_classes)
    {
        return Err(EvalError::BadIndex {
            index: bad,
            classes: num_classes,
        });
    }
    let mut tp = vec![0usize; num_classes];
    let mut pred = vec![0usize; num_classes];
    let mut sup = vec![0usize; num_classes];
    for (&p, &t) in predictions.iter().zip(truths) {
        pred[p] += 1;
        sup[t] += 1;
        if p == t {
            tp[p] += 1;
        }
    }
    let per_class: Vec<ClassScore> = (0..num_classes)
        .map(|c| {
            let precision = if pred[c] > 0 {
                tp[c] as f64 / pred[c] as f64
            } else {
                0.0
            };
            let recall = if sup[c] > 0 {
                tp[c] as f64 / sup[c] as f64
            } else {
                0.0
            };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassScore {
                precision,
                recall,
                f1,
                support: sup[c],
                predicted: pred[c],
                flagged: sup[c] == 0 && pred[c] == 0,
            }
        })
        .collect();
    let macro_f1 = if classes.is_empty() {
        0.0
    } else {
        classes.iter().map(|&c| per_class[c].f1).sum::<f64>() / classes.len() as f64
    };
    Ok(F1Report {
        macro_f1,
        per_class,
    })
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let (mut mean, mut m2) = (0.0, 0.0);
    for (i, &v) in values.iter().enumerate() {
        let d = v - mean;
        mean += d / (i + 1) as f64;
        m2 += d * (v - mean);
    }
    (mean, (m2 / values.len() as f64).sqrt())
}

/// One scored sample: generated caption, reference caption, true class name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub id: String,
    pub generated: String,
    pub reference: String,
    pub class_name: String,
}

/// Classification context shared by closed- and open-set evaluation.
pub struct Evaluator<'a> {
    pub spec: ClassifierPromptSpec,
    pub responder: &'a dyn Responder,
    pub embedder: &'a dyn SentenceEmbedder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpenSetReport {
    pub macro_f1: f64,
    pub per_class: BTreeMap<String, ClassScore>,
    pub sample_count: usize,
    pub fallback_count: usize,
    pub classes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub slice: String,
    pub sample_count: usize,
    pub cosine_mean: f64,
    pub cosine_std: f64,
    pub empty_caption_warnings: usize,
    pub macro_f1: f64,
    pub fallback_count: usize,
    pub per_class: BTreeMap<String, ClassScore>,
    pub predictions: Vec<(String, String)>,
    pub open_set: Option<OpenSetReport>,
}

impl Evaluator<'_> {
    fn classify_all(
        &self,
        samples: &[EvalSample],
        classes: &[String],
        captions: &[String],
    ) -> Vec<Classification> {
        samples
            .iter()
            .map(|s| {
                classify_caption(
                    &s.generated,
                    classes,
                    captions,
                    &self.spec,
                    self.responder,
                    self.embedder,
                )
            })
            .collect()
    }

    /// Similarity and closed-set classification over `vocab`.
    pub fn closed_set(
        &self,
        samples: &[EvalSample],
        vocab: &UnifiedVocabulary,
        class_captions: &[String],
        seed: u64,
        slice: &str,
    ) -> Result<EvalReport, EvalError> {
        let truths = truth_indices(samples, vocab)?;
        let sims: Vec<Similarity> = samples
            .iter()
            .map(|s| caption_similarity(&s.generated, &s.reference, self.embedder))
            .collect();
        let scores: Vec<f64> = sims.iter().map(|s| s.score).collect();
        let (cosine_mean, cosine_std) = mean_std(&scores);
        let preds = self.classify_all(samples, vocab.classes(), class_captions);
        let idx: Vec<usize> = preds.iter().map(|c| c.class).collect();
        let f1 = macro_f1(&idx, &truths, vocab.len())?;
        Ok(EvalReport {
            seed,
            slice: slice.to_string(),
            sample_count: samples.len(),
            cosine_mean,
            cosine_std,
            empty_caption_warnings: sims.iter().filter(|s| s.warning).count(),
            macro_f1: f1.macro_f1,
            fallback_count: preds.iter().filter(|c| c.fallback).count(),
            per_class: name_scores(vocab.classes(), f1.per_class),
            predictions: samples
                .iter()
                .zip(&idx)
                .map(|(s, &p)| (s.id.clone(), vocab.classes()[p].clone()))
                .collect(),
            open_set: None,
        })
    }

    /// Classifies over `seen ∪ unseen`; macro-F1 averages the unseen
    /// classes only.
    pub fn open_set(
        &self,
        samples: &[EvalSample],
        seen: &UnifiedVocabulary,
        seen_captions: &[String],
        unseen: &[String],
        unseen_captions: &[String],
    ) -> Result<OpenSetReport, EvalError> {
        if unseen.is_empty() {
            return Err(EvalError::Config(
                "open-set evaluation needs at least one unseen class".into(),
            ));
        }
        if unseen.len() != unseen_captions.len() {
            return Err(EvalError::Config(
                "one caption per unseen class is required".into(),
            ));
        }
        let extended = seen.extended(unseen)?;
        let captions: Vec<String> = seen_captions
            .iter()
            .chain(unseen_captions)
            .cloned()
            .collect();
        let truths = truth_indices(samples, &extended)?;
        let preds = self.classify_all(samples, extended.classes(), &captions);
        let idx: Vec<usize> = preds.iter().map(|c| c.class).collect();
        let unseen_idx: Vec<usize> = (seen.len()..extended.len()).collect();
        let f1 = macro_f1_over(&idx, &truths, extended.len(), &unseen_idx)?;
        let per_class = unseen_idx
            .iter()
            .map(|&i| (extended.classes()[i].clone(), f1.per_class[i].clone()))
            .collect();
        Ok(OpenSetReport {
            macro_f1: f1.macro_f1,
            per_class,
            sample_count: samples.len(),
            fallback_count: preds.iter().filter(|c| c.fallback).count(),
            classes: unseen.to_vec(),
        })
    }
    /// Scores a classifier that only knows `seen` on records of the
    /// `unseen` classes: macro-F1 over the unseen classes.
    pub fn closed_vocabulary_baseline(
        &self,
        samples: &[EvalSample],
        seen: &UnifiedVocabulary,
        seen_captions: &[String],
        unseen: &[String],
    ) -> Result<f64, EvalError> {
        let extended = seen.extended(unseen)?;
        let truths = truth_indices(samples, &extended)?;
        let preds = self.classify_all(samples, seen.classes(), seen_captions);
        let idx: Vec<usize> = preds.iter().map(|c| c.class).collect();
        let unseen_idx: Vec<usize> = (seen.len()..extended.len()).collect();
        Ok(macro_f1_over(&idx, &truths, extended.len(), &unseen_idx)?.macro_f1)
    }
}

fn truth_indices(
    samples: &[EvalSample],
    vocab: &UnifiedVocabulary,
) -> Result<Vec<usize>, EvalError> {
    samples
        .iter()
        .map(|s| {
            vocab.index_of(&s.class_name).ok_or_else(|| {
                EvalError::Config(format!(
                    "class `{}` of `{}` is not in the vocabulary",
                    s.class_name, s.id
                ))
            })
        })
        .collect()
}

fn name_scores(classes: &[String], scores: Vec<ClassScore>) -> BTreeMap<String, ClassScore> {
    classes.iter().cloned().zip(scores).collect()
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Human-readable summary: similarity and macro-F1 rows, then classes
    /// with support or predictions.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "slice: {}  samples: {}  seed: {}",
            self.slice, self.sample_count, self.seed
        );
        let _ = writeln!(out, "{:<28} | {:>17}", "Metric", "Value");
        let _ = writeln!(out, "{}", "-".repeat(48));
        let _ = writeln!(
            out,
            "{:<28} | {:>8.3} ± {:<6.3}",
            "Cosine similarity", self.cosine_mean, self.cosine_std
        );
        let _ = writeln!(
            out,
            "{:<28} | {:>17.3}",
            "Macro-F1 (closed set)", self.macro_f1
        );
        if let Some(o) = &self.open_set {
            let _ = writeln!(
                out,
                "{:<28} | {:>17.3}",
                "Macro-F1 (unseen classes)", o.macro_f1
            );
        }
        let _ = writeln!(
            out,
            "{:<28} | {:>17}",
            "Classifier fallbacks", self.fallback_count
        );
        let _ = writeln!(
            out,
            "{:<28} | {:>17}",
            "Empty-caption warnings", self.empty_caption_warnings
        );
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<28} | {:>9} | {:>6} | {:>6} | {:>7}",
            "Class", "Precision", "Recall", "F1", "Support"
        );
        let _ = writeln!(out, "{}", "-".repeat(68));
        let mut rows: Vec<(&String, &ClassScore)> = self.per_class.iter().collect();
        if let Some(o) = &self.open_set {
            rows.extend(o.per_class.iter());
        }
        for (name, s) in rows.into_iter().filter(|(_, s)| !s.flagged) {
            let _ = writeln!(
                out,
                "{:<28} | {:>9.3} | {:>6.3} | {:>6.3} | {:>7}",
                name, s.precision, s.recall, s.f1, s.support
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn cm_oracle(p: &[usize], t: &[usize], n: usize) -> f64 {
        let mut cm = vec![vec![0usize; n]; n];
        for (&a, &b) in p.iter().zip(t) {
            cm[b][a] += 1;
        }
        let mut total = 0.0;
        for c in 0..n {
            let tp = cm[c][c] as f64;
            let col: usize = (0..n).map(|r| cm[r][c]).sum();
            let row: usize = cm[c].iter().sum();
            let pr = if col > 0 { tp / col as f64 } else { 0.0 };
            let rc = if row > 0 { tp / row as f64 } else { 0.0 };
            total += if pr + rc > 0.0 {
                2.0 * pr * rc / (pr + rc)
            } else {
                0.0
            };
        }
        total / n as f64
    }

    struct Fixed(Vec<(String, Vec<f64>)>);

    impl SentenceEmbedder for Fixed {
        fn embed(&self, text: &str) -> Vec<f64> {
            self.0
                .iter()
                .find(|(k, _)| k == text)
                .map(|(_, v)| v.clone())
                .unwrap_or(vec![0.0, 0.0])
        }
    }

    #[test]
    fn self_similarity_and_forced_orthogonality() {
        let e = HashedEmbedder::default();
        let s = caption_similarity("two people hug.", "two people hug.", &e);
        assert!((s.score - 1.0).abs() < 1e-6 && !s.warning);
        let v = e.embed("a person waves");
        assert!((v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
        let stub = Fixed(vec![
            ("a".into(), vec![1.0, 0.0]),
            ("b".into(), vec![0.0, 1.0]),
        ]);
        assert_eq!(caption_similarity("a", "b", &stub).score, 0.0);
        let empty = caption_similarity("", "two people hug.", &e);
        assert_eq!((empty.score, empty.warning), (0.0, true));
    }

    #[test]
    fn similarity_matches_independent_dot_product() {
        let e = HashedEmbedder::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let words = [
            "two", "people", "hug", "punch", "wave", "the", "room", "red", "kick", "a",
        ];
        for _ in 0..100 {
            let mut phrase = || {
                (0..rng.random_range(1..8))
                    .map(|_| words[rng.random_range(0..10)])
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            let (a, b) = (phrase(), phrase());
            let (x, y) = (e.embed(&a), e.embed(&b));
            let dot: f64 = (0..x.len()).map(|i| x[i] * y[i]).sum();
            let nx = (0..x.len()).map(|i| x[i] * x[i]).sum::<f64>().sqrt();
            let ny = (0..y.len()).map(|i| y[i] * y[i]).sum::<f64>().sqrt();
            let got = caption_similarity(&a, &b, &e).score;
            assert!((got - dot / (nx * ny)).abs() < 1e-9);
            assert!((got - caption_similarity(&b, &a, &e).score).abs() < 1e-9);
        }
    }

    #[test]
    fn macro_f1_examples() {
        assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2], 3).unwrap().macro_f1, 1.0);
        let r = macro_f1(&[0, 0, 1, 1], &[0, 1, 0, 1], 2).unwrap();
        assert_eq!(
            (r.per_class[0].f1, r.per_class[1].f1, r.macro_f1),
            (0.5, 0.5, 0.5)
        );
        let truths = [0, 0, 1, 1, 2, 2, 3, 3];
        let r = macro_f1(&[0; 8], &truths, 4).unwrap();
        assert!((r.macro_f1 - 0.4 / 4.0).abs() < 1e-12);
        assert!((r.macro_f1 - cm_oracle(&[0; 8], &truths, 4)).abs() < 1e-12);
        let r = macro_f1(&[0, 0], &[0, 0], 3).unwrap();
        assert!(r.per_class[1].flagged && r.per_class[2].flagged);
        assert!((r.macro_f1 - 1.0 / 3.0).abs() < 1e-12);
        assert!(matches!(
            macro_f1(&[0], &[0, 1], 2),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn macro_f1_matches_confusion_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let n = rng.random_range(1..7);
            let len = rng.random_range(1..40);
            let p: Vec<usize> = (0..len).map(|_| rng.random_range(0..n)).collect();
            let t: Vec<usize> = (0..len).map(|_| rng.random_range(0..n)).collect();
            assert!((macro_f1(&p, &t, n).unwrap().macro_f1 - cm_oracle(&p, &t, n)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn macro_f1_is_relabeling_invariant(
            pairs in proptest::collection::vec((0usize..5, 0usize..5), 1..30),
            perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
        ) {
            let (p, t): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let a = macro_f1(&p, &t, 5).unwrap().macro_f1;
            let pp: Vec<usize> = p.iter().map(|&i| perm[i]).collect();
            let tt: Vec<usize> = t.iter().map(|&i| perm[i]).collect();
            prop_assert!((a - macro_f1(&pp, &tt, 5).unwrap().macro_f1).abs() < 1e-12);
        }

        #[test]
        fn classification_stays_in_vocabulary(caption in "[a-z ]{0,30}") {
            let classes: Vec<String> = ["hugging", "punching", "kicking"].map(String::from).to_vec();
            let caps: Vec<String> = ["two people hug.", "one person punches another.", "one person kicks another."].map(String::from).to_vec();
            let echo = |p: &str, _: &str| p.to_string();
            let c = classify_caption(&caption, &classes, &caps, &ClassifierPromptSpec::default(), &echo, &HashedEmbedder::default());
            prop_assert!(c.class < 3);
        }
    }

    #[test]
    fn mean_std_matches_two_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
        let (m, s) = mean_std(&v);
        assert!((m - mean).abs() < 1e-9 && (s - var.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn name_scan_handles_boundaries_and_nesting() {
        let classes: Vec<String> = ["hugging", "side hugging", "kick"]
            .map(String::from)
            .to_vec();
        assert_eq!(
            scan_class_names("they are side hugging now", &classes),
            vec![1]
        );
        assert_eq!(scan_class_names("kicking and hugging", &classes), vec![0]);
        assert_eq!(scan_class_names("kick, hugging!", &classes), vec![0, 2]);
        assert!(scan_class_names("nothing here", &classes).is_empty());
    }

    #[test]
    fn classifier_paths() {
        let e = HashedEmbedder::default();
        let classes: Vec<String> = ["hugging", "punching", "waving"].map(String::from).to_vec();
        let caps: Vec<String> = [
            "two people embrace each other warmly.",
            "one person strikes the other with a fist.",
            "two people wave their hands at each other.",
        ]
        .map(String::from)
        .to_vec();
        let spec = ClassifierPromptSpec::default();
        let answer = |_: &str, _: &str| "punching".to_string();
        let c = classify_caption(&caps[2], &classes, &caps, &spec, &answer, &e);
        assert_eq!(
            c,
            Classification {
                class: 1,
                fallback: false
            }
        );

        let silent = |_: &str, _: &str| String::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let words = [
            "two", "people", "wave", "fist", "embrace", "hands", "strikes", "warmly",
        ];
        for _ in 0..30 {
            let cap = (0..5)
                .map(|_| words[rng.random_range(0..words.len())])
                .collect::<Vec<_>>()
                .join(" ");
            let c = classify_caption(&cap, &classes, &caps, &spec, &silent, &e);
            assert!(c.fallback);
            let scores: Vec<f64> = caps
                .iter()
                .map(|k| caption_similarity(&cap, k, &e).score)
                .collect();
            let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(scores[c.class], best);
            assert_eq!(scores.iter().position(|&s| s == best).unwrap(), c.class);
        }
        let echo_caption = |p: &str, _: &str| p.to_string();
        let one = vec!["hugging".to_string()];
        let c = classify_caption("anything", &one, &caps[..1], &spec, &echo_caption, &e);
        assert_eq!(c.class, 0);
    }

    #[test]
    fn lm_responder_is_deterministic_and_classification_stays_closed() {
        use crate::fusion_lm::LmConfig;
        let classes: Vec<String> = ["hugging", "punching"].map(String::from).to_vec();
        let caps: Vec<String> = ["two people hug.", "one person punches another."]
            .map(String::from)
            .to_vec();
        let spec = ClassifierPromptSpec::default();
        let tok = Tokenizer::build(
            caps.iter()
                .map(String::as_str)
                .chain([spec.template.as_str(), "hugging punching"]),
        );
        let lm = FrozenLM::new(LmConfig::new(tok.len(), 5));
        let r = LmResponder {
            lm: &lm,
            tokenizer: &tok,
            max_len: 6,
        };
        let prompt = spec.render(&caps[0], &classes);
        let a = r.respond(&prompt, &caps[0]);
        assert_eq!(a, r.respond(&prompt, &caps[0]));
        assert!(split_words(&a).len() <= 6);
        let c = classify_caption(
            &caps[1],
            &classes,
            &caps,
            &spec,
            &r,
            &HashedEmbedder::default(),
        );
        assert!(c.class < 2);
        assert_eq!(
            EchoResponder.respond(&prompt, "two people hug."),
            "two people hug."
        );
    }

    #[test]
    fn open_set_requires_disjoint_nonempty_unseen() {
        let e = HashedEmbedder::default();
        let silent = |_: &str, _: &str| String::new();
        let ev = Evaluator {
            spec: ClassifierPromptSpec::default(),
            responder: &silent,
            embedder: &e,
        };
        let seen = UnifiedVocabulary::from_classes(&["hugging"]).unwrap();
        let caps = vec!["two people hug.".to_string()];
        assert!(matches!(
            ev.open_set(&[], &seen, &caps, &[], &[]),
            Err(EvalError::Config(_))
        ));
        assert!(ev
            .open_set(&[], &seen, &caps, &["hugging".into()], &["x.".into()])
            .is_err());
    }
}

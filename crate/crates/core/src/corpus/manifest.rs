use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::expander::{standardize_label, CaptionExpander};
use super::vocab::{canonicalize, SourceDescriptor, UnifiedVocabulary};
use super::CorpusError;

/// One clip of the unified corpus. Field order is the on-disk order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub id: String,
    pub source: String,
    pub hard_label: String,
    pub canonical_class: usize,
    pub soft_caption: String,
    pub clip_path: PathBuf,
    pub mask_path: Option<PathBuf>,
}

/// JSON-lines manifest of interaction records.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<InteractionRecord>,
}

pub const CLIP_EXTENSIONS: [&str; 2] = ["raw", "gif"];
pub const MASK_EXTENSION: &str = "mask";

impl Manifest {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, CorpusError> {
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: InteractionRecord = serde_json::from_str(line)
                .map_err(|e| CorpusError::Manifest(format!("line {}: {e}", n + 1)))?;
            if r.soft_caption.trim().is_empty() {
                return Err(CorpusError::Manifest(format!(
                    "line {}: record `{}` has an empty caption",
                    n + 1,
                    r.id
                )));
            }
            records.push(r);
        }
        Ok(Self { records })
    }

    pub fn read(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        Self::from_jsonl(&text)
    }

    pub fn write(&self, path: &Path) -> Result<(), CorpusError> {
        fs::write(path, self.to_jsonl()).map_err(|e| CorpusError::io(path, e))
    }

    /// Unique ids and every class index inside `vocab`.
    pub fn check_integrity(&self, vocab: &UnifiedVocabulary) -> Result<(), CorpusError> {
        let mut ids = BTreeSet::new();
        for r in &self.records {
            if !ids.insert(&r.id) {
                return Err(CorpusError::Manifest(format!(
                    "duplicate record id `{}`",
                    r.id
                )));
            }
            if r.canonical_class >= vocab.len() {
                return Err(CorpusError::Manifest(format!(
                    "record `{}` points at class {} of {}",
                    r.id,
                    r.canonical_class,
                    vocab.len()
                )));
            }
        }
        Ok(())
    }

    /// Records whose `source` equals `slice`.
    pub fn slice(&self, source: &str) -> Manifest {
        Manifest {
            records: self
                .records
                .iter()
                .filter(|r| r.source == source)
                .cloned()
                .collect(),
        }
    }
}

struct FoundClip {
    source: String,
    label: String,
    stem: String,
    clip: PathBuf,
    mask: Option<PathBuf>,
}

/// Scans `data_root/<source.root_path>/<raw label>/<clip>.{raw,gif}` (with an
/// optional sibling `<clip>.mask`) for every source. Nothing is returned if
/// any source directory is unreadable or holds an unknown label directory.
fn scan_sources(
    sources: &[SourceDescriptor],
    data_root: &Path,
) -> Result<Vec<FoundClip>, CorpusError> {
    let mut found = Vec::new();
    for s in sources {
        let root = data_root.join(&s.root_path);
        let entries = fs::read_dir(&root).map_err(|e| CorpusError::io(&root, e))?;
        let mut dirs: Vec<PathBuf> = Vec::new();
        for e in entries {
            let e = e.map_err(|e| CorpusError::io(&root, e))?;
            if e.path().is_dir() {
                dirs.push(e.path());
            }
        }
        dirs.sort();
        for dir in dirs {
            let dir_name = dir
                .file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .to_string();
            let Some(label) = s
                .action_labels
                .iter()
                .find(|l| canonicalize(l) == canonicalize(&dir_name))
            else {
                return Err(CorpusError::Manifest(format!(
                    "{}: directory `{dir_name}` is not a label of source `{}`",
                    dir.display(),
                    s.name
                )));
            };
            let mut clips: Vec<PathBuf> = fs::read_dir(&dir)
                .map_err(|e| CorpusError::io(&dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension()
                        .and_then(|x| x.to_str())
                        .is_some_and(|x| CLIP_EXTENSIONS.contains(&x))
                })
                .collect();
            clips.sort();
            for clip in clips {
                let stem = clip
                    .file_stem()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .to_string();
                let mask = clip.with_extension(MASK_EXTENSION);
                found.push(FoundClip {
                    source: s.name.clone(),
                    label: label.clone(),
                    stem,
                    mask: mask.exists().then_some(mask),
                    clip,
                });
            }
        }
    }
    Ok(found)
}

/// Builds the manifest for all clips found under `data_root`. Ids are clip
/// file stems; stems shared by several sources are prefixed `source/`.
pub fn build_manifest(
    sources: &[SourceDescriptor],
    data_root: &Path,
    vocab: &UnifiedVocabulary,
    expander: &dyn CaptionExpander,
) -> Result<Manifest, CorpusError> {
    let found = scan_sources(sources, data_root)?;
    let mut stem_sources: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for f in &found {
        stem_sources.entry(&f.stem).or_default().insert(&f.source);
    }
    let mut captions: BTreeMap<usize, String> = BTreeMap::new();
    let mut records = Vec::with_capacity(found.len());
    for f in &found {
        let class = vocab.lookup(&f.source, &f.label).ok_or_else(|| {
            CorpusError::Manifest(format!(
                "label `{}` of `{}` not in vocabulary",
                f.label, f.source
            ))
        })?;
        let caption = match captions.get(&class) {
            Some(c) => c.clone(),
            None => {
                let c = standardize_label(&vocab.classes()[class], expander)?;
                captions.insert(class, c.clone());
                c
            }
        };
        let id = if stem_sources[f.stem.as_str()].len() > 1 {
            format!("{}/{}", f.source, f.stem)
        } else {
            f.stem.clone()
        };
        records.push(InteractionRecord {
            id,
            source: f.source.clone(),
            hard_label: f.label.clone(),
            canonical_class: class,
            soft_caption: caption,
            clip_path: f.clip.clone(),
            mask_path: f.mask.clone(),
        });
    }
    let manifest = Manifest { records };
    manifest.check_integrity(vocab)?;
    Ok(manifest)
}

/// Per-source statistics table: name, action count, declared samples, and
/// clips found; the last row totals the unified corpus.
pub fn summary_table(
    sources: &[SourceDescriptor],
    vocab: &UnifiedVocabulary,
    manifest: &Manifest,
) -> String {
    let mut found: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &manifest.records {
        *found.entry(r.source.as_str()).or_default() += 1;
    }
    let width = sources
        .iter()
        .map(|s| s.name.len())
        .max()
        .unwrap_or(0)
        .max("Unified corpus".len());
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$} | {:>7} | {:>8} | {:>6}",
        "Dataset", "Actions", "Samples", "Found"
    );
    let _ = writeln!(out, "{}", "-".repeat(width + 32));
    for s in sources {
        let _ = writeln!(
            out,
            "{:<width$} | {:>7} | {:>8} | {:>6}",
            s.name,
            s.action_labels.len(),
            s.sample_count,
            found.get(s.name.as_str()).copied().unwrap_or(0)
        );
    }
    let _ = writeln!(out, "{}", "-".repeat(width + 32));
    let _ = writeln!(
        out,
        "{:<width$} | {:>7} | {:>8} | {:>6}",
        "Unified corpus",
        vocab.len(),
        sources.iter().map(|s| s.sample_count).sum::<u64>(),
        manifest.records.len()
    );
    out
}

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::CorpusError;

/// One source dataset: its raw action labels and where its clips live.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDescriptor {
    pub name: String,
    pub action_labels: Vec<String>,
    pub sample_count: u64,
    pub root_path: PathBuf,
}

impl SourceDescriptor {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.action_labels.is_empty() {
            return Err(CorpusError::Config(format!(
                "source `{}` declares no action labels",
                self.name
            )));
        }
        let mut seen = BTreeSet::new();
        for label in &self.action_labels {
            if !seen.insert(canonicalize(label)) {
                return Err(CorpusError::Config(format!(
                    "source `{}` lists label `{label}` twice",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct SourcesFile {
    #[serde(default)]
    source: Vec<SourceDescriptor>,
}

/// Parses a TOML file of `[[source]]` tables.
pub fn parse_sources(text: &str) -> Result<Vec<SourceDescriptor>, CorpusError> {
    let file: SourcesFile =
        toml::from_str(text).map_err(|e| CorpusError::Config(format!("sources file: {e}")))?;
    for s in &file.source {
        s.validate()?;
    }
    Ok(file.source)
}

/// The ten interaction datasets of the unified corpus.
pub fn bundled_sources() -> Vec<SourceDescriptor> {
    parse_sources(include_str!("../../data/sources.toml")).expect("bundled sources parse")
}

/// Case-fold, trim and collapse internal whitespace.
pub fn canonicalize(label: &str) -> String {
    label
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Scope of an alias rule.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum AliasScope {
    Global,
    Source(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AliasRule {
    pub scope: AliasScope,
    pub raw: String,
    pub canonical: String,
}

impl AliasRule {
    pub fn global(raw: &str, canonical: &str) -> Self {
        Self {
            scope: AliasScope::Global,
            raw: raw.to_string(),
            canonical: canonical.to_string(),
        }
    }

    pub fn scoped(source: &str, raw: &str, canonical: &str) -> Self {
        Self {
            scope: AliasScope::Source(source.to_string()),
            raw: raw.to_string(),
            canonical: canonical.to_string(),
        }
    }
}

/// Validated merge rules keyed by `(scope, canonicalized raw label)`.
/// A source-scoped rule takes precedence over a global one.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AliasTable {
    rules: BTreeMap<(AliasScope, String), String>,
}

impl AliasTable {
    pub fn new(rules: impl IntoIterator<Item = AliasRule>) -> Result<Self, CorpusError> {
        let mut table: BTreeMap<(AliasScope, String), String> = BTreeMap::new();
        for rule in rules {
            let key = (rule.scope.clone(), canonicalize(&rule.raw));
            let target = canonicalize(&rule.canonical);
            if target.is_empty() || key.1.is_empty() {
                return Err(CorpusError::Config(format!(
                    "alias rule `{}` -> `{}` has an empty side",
                    rule.raw, rule.canonical
                )));
            }
            match table.get(&key) {
                Some(existing) if existing != &target => {
                    return Err(CorpusError::ConflictingAlias {
                        label: rule.raw,
                        first: existing.clone(),
                        second: target,
                    });
                }
                _ => {
                    table.insert(key, target);
                }
            }
        }
        Ok(Self { rules: table })
    }

    /// Parses `scope<TAB>raw<TAB>canonical` lines; `*` is the global scope
    /// and `#` starts a comment line.
    pub fn parse_tsv(text: &str) -> Result<Self, CorpusError> {
        let mut rules = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [scope, raw, canonical] = fields[..] else {
                return Err(CorpusError::Config(format!(
                    "alias rules line {}: expected 3 tab-separated fields",
                    n + 1
                )));
            };
            rules.push(if scope == "*" {
                AliasRule::global(raw, canonical)
            } else {
                AliasRule::scoped(scope, raw, canonical)
            });
        }
        Self::new(rules)
    }

    pub fn bundled() -> Self {
        Self::parse_tsv(include_str!("../../data/alias_rules.tsv")).expect("bundled rules parse")
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Canonical class name for `raw` as seen in `source`.
    pub fn resolve(&self, source: &str, raw: &str) -> String {
        let key = canonicalize(raw);
        self.rules
            .get(&(AliasScope::Source(source.to_string()), key.clone()))
            .or_else(|| self.rules.get(&(AliasScope::Global, key.clone())))
            .cloned()
            .unwrap_or(key)
    }

    /// Resolution through global rules only.
    pub fn resolve_global(&self, raw: &str) -> Option<&str> {
        self.rules
            .get(&(AliasScope::Global, canonicalize(raw)))
            .map(String::as_str)
    }
}

/// Ordered canonical class list plus the `(source, raw label) → class`
/// mapping that produced it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnifiedVocabulary {
    classes: Vec<String>,
    aliases: BTreeMap<String, BTreeMap<String, usize>>,
}

impl UnifiedVocabulary {
    /// Vocabulary over bare class names, without source aliases.
    pub fn from_classes(names: &[&str]) -> Result<Self, CorpusError> {
        let mut classes: Vec<String> = Vec::new();
        for n in names {
            let c = canonicalize(n);
            if c.is_empty() || classes.contains(&c) {
                return Err(CorpusError::Config(format!(
                    "class `{n}` is empty or duplicated"
                )));
            }
            classes.push(c);
        }
        Ok(Self {
            classes,
            aliases: BTreeMap::new(),
        })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn name(&self, idx: usize) -> Option<&str> {
        self.classes.get(idx).map(String::as_str)
    }

    pub fn index_of(&self, class: &str) -> Option<usize> {
        let c = canonicalize(class);
        self.classes.iter().position(|x| *x == c)
    }

    pub fn lookup(&self, source: &str, raw_label: &str) -> Option<usize> {
        self.aliases.get(source)?.get(raw_label).copied()
    }

    pub fn aliases(&self) -> &BTreeMap<String, BTreeMap<String, usize>> {
        &self.aliases
    }

    /// Appends unseen classes; they must not collide with existing ones.
    pub fn extended(&self, unseen: &[String]) -> Result<Self, CorpusError> {
        let mut out = self.clone();
        for u in unseen {
            let c = canonicalize(u);
            if c.is_empty() {
                return Err(CorpusError::Config("empty unseen class name".into()));
            }
            if out.classes.contains(&c) {
                return Err(CorpusError::Config(format!(
                    "unseen class `{c}` overlaps the vocabulary"
                )));
            }
            out.classes.push(c);
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CorpusError> {
        let v: Self = serde_json::from_str(text)
            .map_err(|e| CorpusError::Config(format!("vocabulary file: {e}")))?;
        for m in v.aliases.values() {
            if m.values().any(|&i| i >= v.classes.len()) {
                return Err(CorpusError::Config(
                    "vocabulary alias points past the class list".into(),
                ));
            }
        }
        Ok(v)
    }
}

/// Union of the source labels after canonicalization and alias merging.
/// Classes are ordered by first appearance (source order, then label order).
pub fn build_vocabulary(
    sources: &[SourceDescriptor],
    rules: &AliasTable,
) -> Result<UnifiedVocabulary, CorpusError> {
    if sources.is_empty() {
        return Err(CorpusError::Config("no sources given".into()));
    }
    let mut classes: Vec<String> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    let mut aliases: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for source in sources {
        source.validate()?;
        for label in &source.action_labels {
            let class = rules.resolve(&source.name, label);
            let idx = *index.entry(class.clone()).or_insert_with(|| {
                classes.push(class);
                classes.len() - 1
            });
            aliases
                .entry(source.name.clone())
                .or_default()
                .insert(label.clone(), idx);
        }
    }
    Ok(UnifiedVocabulary { classes, aliases })
}

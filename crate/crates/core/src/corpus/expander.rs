//! Hard label → descriptive caption expansion.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use super::vocab::{canonicalize, AliasTable};
use super::CorpusError;

/// Turns a hard class label into a full-sentence description.
pub trait CaptionExpander: Send + Sync {
    fn expand(&self, hard_label: &str) -> Result<String, CorpusError>;
}

/// Labels that already read as a sentence (six or more words ending in a
/// period) are kept verbatim; everything else goes through `expander`.
pub fn standardize_label(
    hard_label: &str,
    expander: &dyn CaptionExpander,
) -> Result<String, CorpusError> {
    if hard_label.trim().is_empty() {
        return Err(CorpusError::Config("empty hard label".into()));
    }
    if is_sentence(hard_label) {
        return Ok(hard_label.to_string());
    }
    expander.expand(hard_label)
}

fn is_sentence(s: &str) -> bool {
    s.trim_end().ends_with('.') && s.split_whitespace().count() >= 6
}

/// Parses `class<TAB>sentence` lines (`#` comments allowed).
pub fn parse_templates(text: &str) -> Result<BTreeMap<String, String>, CorpusError> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((class, sentence)) = line.split_once('\t') else {
            return Err(CorpusError::Config(format!(
                "template line {}: missing tab separator",
                n + 1
            )));
        };
        let sentence = sentence.trim();
        if sentence.is_empty() {
            return Err(CorpusError::Config(format!(
                "template line {}: empty caption",
                n + 1
            )));
        }
        if out
            .insert(canonicalize(class), sentence.to_string())
            .is_some()
        {
            return Err(CorpusError::Config(format!(
                "template line {}: class `{class}` defined twice",
                n + 1
            )));
        }
    }
    Ok(out)
}

/// Deterministic expansion from a fixed sentence table.
#[derive(Clone, Debug, Default)]
pub struct TemplateExpander {
    templates: BTreeMap<String, String>,
    aliases: AliasTable,
    fallback: Option<String>,
}

impl TemplateExpander {
    pub fn new(templates: BTreeMap<String, String>) -> Self {
        Self {
            templates,
            ..Self::default()
        }
    }

    /// The shipped table covering every bundled class and the unseen
    /// evaluation classes, with the bundled global alias rules.
    pub fn bundled() -> Self {
        let templates = parse_templates(include_str!("../../data/templates.tsv"))
            .expect("bundled templates parse");
        Self::new(templates).with_aliases(AliasTable::bundled())
    }

    pub fn with_aliases(mut self, aliases: AliasTable) -> Self {
        self.aliases = aliases;
        self
    }

    /// Fallback pattern for unknown labels; `{label}` is replaced by the
    /// canonicalized label.
    pub fn with_fallback(mut self, pattern: &str) -> Self {
        self.fallback = Some(pattern.to_string());
        self
    }

    pub fn templates(&self) -> &BTreeMap<String, String> {
        &self.templates
    }
}

impl CaptionExpander for TemplateExpander {
    fn expand(&self, hard_label: &str) -> Result<String, CorpusError> {
        let key = canonicalize(hard_label);
        if let Some(t) = self.templates.get(&key) {
            return Ok(t.clone());
        }
        if let Some(t) = self
            .aliases
            .resolve_global(&key)
            .and_then(|c| self.templates.get(c))
        {
            return Ok(t.clone());
        }
        match &self.fallback {
            Some(p) => Ok(p.replace("{label}", &key)),
            None => Err(CorpusError::NoTemplate(hard_label.to_string())),
        }
    }
}

/// Transport to an external caption service: one label in, one sentence out.
pub trait Transport: Send + Sync {
    fn request(&self, label: &str, timeout: Duration) -> Result<String, String>;
}

/// Runs an external program with the label on stdin and reads the sentence
/// from stdout. The child is killed when `timeout` elapses.
#[derive(Clone, Debug)]
pub struct CommandTransport {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl Transport for CommandTransport {
    fn request(&self, label: &str, timeout: Duration) -> Result<String, String> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| format!("spawn {}: {e}", self.program.display()))?;
        if let Some(mut stdin) = child.stdin.take() {
            stdin
                .write_all(label.as_bytes())
                .map_err(|e| format!("write stdin: {e}"))?;
        }
        let start = Instant::now();
        loop {
            match child.try_wait().map_err(|e| e.to_string())? {
                Some(status) if status.success() => break,
                Some(status) => return Err(format!("caption command exited with {status}")),
                None if start.elapsed() >= timeout => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(format!("timed out after {timeout:?}"));
                }
                None => std::thread::sleep(Duration::from_millis(5)),
            }
        }
        let mut out = String::new();
        child
            .stdout
            .take()
            .ok_or("no stdout")?
            .read_to_string(&mut out)
            .map_err(|e| e.to_string())?;
        Ok(out)
    }
}

/// Expansion through an external service with retries and an on-disk cache
/// (`label<TAB>sentence` lines). Cached labels never hit the transport, so a
/// populated cache makes reruns fully offline.
pub struct ServiceExpander {
    transport: Option<Box<dyn Transport>>,
    timeout: Duration,
    max_retries: u32,
    cache_path: PathBuf,
    cache: Mutex<BTreeMap<String, String>>,
}

impl ServiceExpander {
    pub fn new(
        transport: Box<dyn Transport>,
        cache_path: impl Into<PathBuf>,
        timeout: Duration,
        max_retries: u32,
    ) -> Result<Self, CorpusError> {
        let cache_path = cache_path.into();
        let cache = load_cache(&cache_path)?;
        Ok(Self {
            transport: Some(transport),
            timeout,
            max_retries,
            cache_path,
            cache: Mutex::new(cache),
        })
    }

    /// Cache-only expander; unknown labels fail.
    pub fn offline(cache_path: impl Into<PathBuf>) -> Result<Self, CorpusError> {
        let cache_path = cache_path.into();
        let cache = load_cache(&cache_path)?;
        Ok(Self {
            transport: None,
            timeout: Duration::ZERO,
            max_retries: 0,
            cache_path,
            cache: Mutex::new(cache),
        })
    }

    pub fn cached_len(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }
}

fn load_cache(path: &Path) -> Result<BTreeMap<String, String>, CorpusError> {
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    parse_templates(&text)
}

fn clean_response(raw: &str) -> Option<String> {
    let line = raw.lines().map(str::trim).find(|l| !l.is_empty())?;
    Some(line.replace('\t', " "))
}

impl CaptionExpander for ServiceExpander {
    fn expand(&self, hard_label: &str) -> Result<String, CorpusError> {
        let key = canonicalize(hard_label);
        let mut cache = self.cache.lock().expect("cache lock");
        if let Some(s) = cache.get(&key) {
            return Ok(s.clone());
        }
        let Some(transport) = &self.transport else {
            return Err(CorpusError::NoTemplate(hard_label.to_string()));
        };
        let attempts = self.max_retries + 1;
        let mut last_error = String::new();
        for attempt in 0..attempts {
            match transport.request(&key, self.timeout) {
                Ok(resp) => match clean_response(&resp) {
                    Some(sentence) => {
                        let mut f = OpenOptions::new()
                            .create(true)
                            .append(true)
                            .open(&self.cache_path)
                            .map_err(|e| CorpusError::io(&self.cache_path, e))?;
                        writeln!(f, "{key}\t{sentence}")
                            .map_err(|e| CorpusError::io(&self.cache_path, e))?;
                        cache.insert(key, sentence.clone());
                        return Ok(sentence);
                    }
                    None => last_error = "empty response".into(),
                },
                Err(e) => last_error = e,
            }
            log::warn!(
                "caption service attempt {}/{attempts} for `{key}` failed: {last_error}",
                attempt + 1
            );
        }
        Err(CorpusError::ExpanderUnavailable {
            label: hard_label.to_string(),
            attempts,
            last_error,
        })
    }
}

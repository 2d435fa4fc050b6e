//! Line-oriented chat records mixing text with video slots.
//!
//! ```text
//! Q:<question text with slots like <VID_P1><VID_P2><VID_BG>>\tA:<target>
//! ```
//!
//! Text is escaped with `\\`, `\n`, `\t`, `\r` and `\<`; an unescaped `<`
//! always opens one of the three stream markers.

use std::fmt;

use serde::{Deserialize, Serialize};

/// The three masked instances of a clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StreamId {
    P1,
    P2,
    Bg,
}

impl StreamId {
    pub const ALL: [StreamId; 3] = [StreamId::P1, StreamId::P2, StreamId::Bg];

    pub fn marker(self) -> &'static str {
        match self {
            StreamId::P1 => "<VID_P1>",
            StreamId::P2 => "<VID_P2>",
            StreamId::Bg => "<VID_BG>",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StreamId::P1 => "p1",
            StreamId::P2 => "p2",
            StreamId::Bg => "bg",
        }
    }
}

impl fmt::Display for StreamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Text(String),
    Slot(StreamId),
}

/// One training sample: prompt segments plus the ground-truth caption.
///
/// Invariants (checked by [`ChatRecord::new`]): `P1` and `P2` slots appear
/// exactly once, `BG` at most once; text segments are non-empty and never
/// adjacent; the target is non-empty.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatRecord {
    segments: Vec<Segment>,
    target: String,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ChatRecordError {
    #[error("stream slot {0} appears more than once")]
    DuplicateSlot(StreamId),
    #[error("required stream slot {0} is missing")]
    MissingSlot(StreamId),
    #[error("text segment {0} is empty")]
    EmptyText(usize),
    #[error("text segments {0} and its successor are adjacent")]
    AdjacentText(usize),
    #[error("target caption is empty")]
    EmptyTarget,
}

impl ChatRecord {
    pub fn new(segments: Vec<Segment>, target: impl Into<String>) -> Result<Self, ChatRecordError> {
        let target = target.into();
        if target.is_empty() {
            return Err(ChatRecordError::EmptyTarget);
        }
        let mut counts = [0usize; 3];
        for (i, s) in segments.iter().enumerate() {
            match s {
                Segment::Slot(id) => {
                    counts[*id as usize] += 1;
                    if counts[*id as usize] > 1 {
                        return Err(ChatRecordError::DuplicateSlot(*id));
                    }
                }
                Segment::Text(t) => {
                    if t.is_empty() {
                        return Err(ChatRecordError::EmptyText(i));
                    }
                    if i > 0 && matches!(segments[i - 1], Segment::Text(_)) {
                        return Err(ChatRecordError::AdjacentText(i - 1));
                    }
                }
            }
        }
        for id in [StreamId::P1, StreamId::P2] {
            if counts[id as usize] == 0 {
                return Err(ChatRecordError::MissingSlot(id));
            }
        }
        Ok(Self { segments, target })
    }

    /// `[Text(question), P1, P2, (BG)]`.
    pub fn prompt(
        question: &str,
        with_background: bool,
        target: &str,
    ) -> Result<Self, ChatRecordError> {
        let mut segments = Vec::with_capacity(4);
        if !question.is_empty() {
            segments.push(Segment::Text(question.to_string()));
        }
        segments.push(Segment::Slot(StreamId::P1));
        segments.push(Segment::Slot(StreamId::P2));
        if with_background {
            segments.push(Segment::Slot(StreamId::Bg));
        }
        Self::new(segments, target)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn target(&self) -> &str {
        &self.target
    }

    pub fn has_slot(&self, id: StreamId) -> bool {
        self.segments.contains(&Segment::Slot(id))
    }

    pub fn slots(&self) -> impl Iterator<Item = StreamId> + '_ {
        self.segments.iter().filter_map(|s| match s {
            Segment::Slot(id) => Some(*id),
            Segment::Text(_) => None,
        })
    }

    pub fn to_line(&self) -> String {
        let mut out = String::from("Q:");
        for s in &self.segments {
            match s {
                Segment::Text(t) => escape_into(t, &mut out),
                Segment::Slot(id) => out.push_str(id.marker()),
            }
        }
        out.push_str("\tA:");
        escape_into(&self.target, &mut out);
        out
    }
}

fn escape_into(s: &str, out: &mut String) {
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            '<' => out.push_str("\\<"),
            c => out.push(c),
        }
    }
}

/// Serializes a record to its single-line form (no trailing newline).
pub fn serialize_chat_record(record: &ChatRecord) -> Vec<u8> {
    record.to_line().into_bytes()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ChatParseErrorKind {
    /// Input ended before the record was complete.
    Truncated,
    MissingQuestionPrefix,
    MissingAnswer,
    UnknownMarker,
    UnescapedInTarget(char),
    InvalidEscape(char),
    UnterminatedEscape,
    InvalidUtf8,
    Record(ChatRecordError),
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("chat record parse error at byte {offset}: {kind:?}")]
pub struct ChatParseError {
    pub offset: usize,
    pub kind: ChatParseErrorKind,
}

fn err<T>(offset: usize, kind: ChatParseErrorKind) -> Result<T, ChatParseError> {
    Err(ChatParseError { offset, kind })
}

/// Inverse of [`serialize_chat_record`]. Errors caused by running out of
/// input report the input length as their offset.
pub fn parse_chat_record(bytes: &[u8]) -> Result<ChatRecord, ChatParseError> {
    use ChatParseErrorKind as K;
    let text = match std::str::from_utf8(bytes) {
        Ok(t) => t,
        Err(e) if e.error_len().is_none() => return err(bytes.len(), K::Truncated),
        Err(e) => return err(e.valid_up_to(), K::InvalidUtf8),
    };
    let end = text.len();
    if !text.starts_with("Q:") {
        return if "Q:".starts_with(text) {
            err(end, K::Truncated)
        } else {
            err(0, K::MissingQuestionPrefix)
        };
    }

    let mut segments = Vec::new();
    let mut buf = String::new();
    let mut pos = 2;
    let answer_start = loop {
        let Some(c) = text[pos..].chars().next() else {
            return err(end, K::MissingAnswer);
        };
        match c {
            '\t' => break pos + 1,
            '\\' => {
                buf.push(unescape(text, pos)?);
                pos += 2;
            }
            '<' => {
                let rest = &text[pos..];
                let Some(id) = StreamId::ALL
                    .into_iter()
                    .find(|id| rest.starts_with(id.marker()))
                else {
                    let partial = StreamId::ALL.iter().any(|id| id.marker().starts_with(rest));
                    return if partial {
                        err(end, K::Truncated)
                    } else {
                        err(pos, K::UnknownMarker)
                    };
                };
                if !buf.is_empty() {
                    segments.push(Segment::Text(std::mem::take(&mut buf)));
                }
                segments.push(Segment::Slot(id));
                pos += id.marker().len();
            }
            c => {
                buf.push(c);
                pos += c.len_utf8();
            }
        }
    };
    if !buf.is_empty() {
        segments.push(Segment::Text(buf));
    }

    let rest = &text[answer_start..];
    if !rest.starts_with("A:") {
        return if "A:".starts_with(rest) {
            err(end, K::Truncated)
        } else {
            err(answer_start, K::MissingAnswer)
        };
    }
    let mut target = String::new();
    let mut pos = answer_start + 2;
    while let Some(c) = text[pos..].chars().next() {
        match c {
            '\\' => {
                target.push(unescape(text, pos)?);
                pos += 2;
            }
            '<' | '\t' | '\n' => return err(pos, K::UnescapedInTarget(c)),
            c => {
                target.push(c);
                pos += c.len_utf8();
            }
        }
    }
    if target.is_empty() {
        return err(end, K::Truncated);
    }
    ChatRecord::new(segments, target).map_err(|e| ChatParseError {
        offset: answer_start - 1,
        kind: K::Record(e),
    })
}

fn unescape(text: &str, pos: usize) -> Result<char, ChatParseError> {
    match text[pos + 1..].chars().next() {
        None => err(text.len(), ChatParseErrorKind::UnterminatedEscape),
        Some('\\') => Ok('\\'),
        Some('n') => Ok('\n'),
        Some('t') => Ok('\t'),
        Some('r') => Ok('\r'),
        Some('<') => Ok('<'),
        Some(c) => err(pos, ChatParseErrorKind::InvalidEscape(c)),
    }
}

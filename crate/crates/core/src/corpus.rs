//! Conversations, preprocessing, reversible tokenization and dataset I/O.
//!
//! Everything downstream — TF-IDF scoring, LIME attributions, the LSTM tagger
//! and the HTML reports — works on the token streams produced here, so the
//! tokenizer is deliberately boring and fully reversible: every token records
//! the byte span it came from and `reconstruct` rebuilds the preprocessed
//! text byte for byte. Gold highlight labels align 1:1 with these tokens.
//!
//! Datasets are JSON-lines files, one conversation per line:
//!
//! ```json
//! {"id": "c1", "issue_category": "skin", "messages":
//!   [{"role": "patient", "text": "I have a rash", "gold": [0, 0, 0, 1]}]}
//! ```

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: invalid JSON: {source}")]
    Parse {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}:{line}: {message}")]
    Schema {
        path: String,
        line: usize,
        message: String,
    },
    #[error(
        "conversation {conversation}, message {message}: \
         {gold} gold labels for {tokens} tokens"
    )]
    LabelLength {
        conversation: String,
        message: usize,
        gold: usize,
        tokens: usize,
    },
    #[error("token span {start}..{end} does not match the text it points into")]
    SpanMismatch { start: usize, end: usize },
    #[error("label rows have differing lengths ({first} vs {other})")]
    LengthMismatch { first: usize, other: usize },
    #[error("label value {value} is not 0 or 1")]
    BadLabel { value: i64 },
    #[error("no annotation rows given")]
    NoAnnotators,
    #[error("term lexicon has no medical terms")]
    EmptyLexicon,
}

/// Who wrote a chat message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Patient,
    Doctor,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Patient => "patient",
            Role::Doctor => "doctor",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The six issue categories a conversation can be filed under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueCategory {
    ColdOrFlu,
    Covid19,
    Gastrointestinal,
    Pregnancy,
    SexualHealth,
    Skin,
}

impl IssueCategory {
    pub const ALL: [IssueCategory; 6] = [
        IssueCategory::ColdOrFlu,
        IssueCategory::Covid19,
        IssueCategory::Gastrointestinal,
        IssueCategory::Pregnancy,
        IssueCategory::SexualHealth,
        IssueCategory::Skin,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            IssueCategory::ColdOrFlu => "cold_or_flu",
            IssueCategory::Covid19 => "covid19",
            IssueCategory::Gastrointestinal => "gastrointestinal",
            IssueCategory::Pregnancy => "pregnancy",
            IssueCategory::SexualHealth => "sexual_health",
            IssueCategory::Skin => "skin",
        }
    }

    pub fn parse(s: &str) -> Option<IssueCategory> {
        Self::ALL.iter().copied().find(|c| c.as_str() == s)
    }
}

impl fmt::Display for IssueCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One token of a preprocessed message. `span` holds byte offsets into the
/// preprocessed text, so slicing that text with the span yields `surface`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub surface: String,
    /// Lowercase form used as the modelling unit.
    pub norm: String,
    pub span: (usize, usize),
}

/// One chat turn. Tokens are derived from `preprocess(raw_text)`; when gold
/// highlight labels are present they align 1:1 with `tokens`.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub role: Role,
    pub raw_text: String,
    pub tokens: Vec<Token>,
    pub gold: Option<Vec<u8>>,
}

impl Message {
    /// Builds a message, tokenizing the preprocessed text and checking that
    /// any gold labels align with the tokens.
    pub fn new(role: Role, raw_text: &str, gold: Option<Vec<u8>>) -> Result<Message, CorpusError> {
        let tokens = tokenize(&preprocess(raw_text));
        if let Some(labels) = &gold {
            if let Some(&bad) = labels.iter().find(|&&v| v > 1) {
                return Err(CorpusError::BadLabel { value: bad as i64 });
            }
            if labels.len() != tokens.len() {
                return Err(CorpusError::LabelLength {
                    conversation: String::new(),
                    message: 0,
                    gold: labels.len(),
                    tokens: tokens.len(),
                });
            }
        }
        Ok(Message {
            role,
            raw_text: raw_text.to_string(),
            tokens,
            gold,
        })
    }

    /// The preprocessed text the token spans point into.
    pub fn preprocessed(&self) -> String {
        preprocess(&self.raw_text)
    }

    /// Token norms, the modelling view of the message.
    pub fn norms(&self) -> Vec<String> {
        self.tokens.iter().map(|t| t.norm.clone()).collect()
    }
}

/// A whole patient-doctor chat. The opening message is always the patient's.
#[derive(Debug, Clone, PartialEq)]
pub struct Conversation {
    pub id: String,
    pub issue_category: Option<IssueCategory>,
    pub messages: Vec<Message>,
}

impl Conversation {
    /// All token norms of the conversation, in message order. This is the
    /// "conversation as a document" view used by TF-IDF and the classifiers.
    pub fn all_norms(&self) -> Vec<String> {
        self.messages
            .iter()
            .flat_map(|m| m.tokens.iter().map(|t| t.norm.clone()))
            .collect()
    }

    pub fn patient_messages(&self) -> impl Iterator<Item = &Message> {
        self.messages.iter().filter(|m| m.role == Role::Patient)
    }
}

/// Per-annotator 0/1 labels over a shared set of units; `None` marks a unit
/// an annotator did not rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    pub unit_count: usize,
    pub annotator_labels: Vec<Vec<Option<u8>>>,
}

impl AnnotationSet {
    pub fn new(annotator_labels: Vec<Vec<Option<u8>>>) -> Result<AnnotationSet, CorpusError> {
        let first = match annotator_labels.first() {
            Some(row) => row.len(),
            None => return Err(CorpusError::NoAnnotators),
        };
        for row in &annotator_labels {
            if row.len() != first {
                return Err(CorpusError::LengthMismatch {
                    first,
                    other: row.len(),
                });
            }
            if let Some(&bad) = row.iter().flatten().find(|&&v| v > 1) {
                return Err(CorpusError::BadLabel { value: bad as i64 });
            }
        }
        Ok(AnnotationSet {
            unit_count: first,
            annotator_labels,
        })
    }
}

/// Normalized medical / non-medical term lists used to pretrain the tagger.
/// The two sets are disjoint; a term listed on both sides counts as medical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermLexicon {
    pub medical_terms: BTreeSet<String>,
    pub non_medical_terms: BTreeSet<String>,
}

/// What a dataset will be used for, which decides the validation applied at
/// load time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    /// Every patient message must carry gold highlight labels.
    Highlighting,
    /// Every conversation must carry an issue category.
    Classification,
    /// Shared validation only; gold labels and categories stay optional.
    Plain,
}

/// Normalizes raw message text: lowercase, line breaks collapsed to a single
/// space, other control characters dropped, and URL tokens (`http://`,
/// `https://` or `www.` up to the next whitespace) removed. The result is a
/// fixed point: applying `preprocess` twice changes nothing.
pub fn preprocess(raw: &str) -> String {
    let lowered = raw.to_lowercase();

    // Line-break runs become one space; other control characters vanish.
    let mut cleaned = String::with_capacity(lowered.len());
    let mut chars = lowered.chars().peekable();
    while let Some(c) = chars.next() {
        if c == '\n' || c == '\r' {
            while matches!(chars.peek(), Some('\n') | Some('\r')) {
                chars.next();
            }
            cleaned.push(' ');
        } else if !c.is_control() {
            cleaned.push(c);
        }
    }

    // Drop whole whitespace-delimited runs that look like URLs, keeping the
    // surrounding separators as they are.
    let mut out = String::with_capacity(cleaned.len());
    let mut rest = cleaned.as_str();
    while !rest.is_empty() {
        let run_len = rest
            .find(char::is_whitespace)
            .unwrap_or(rest.len());
        if run_len > 0 {
            let run = &rest[..run_len];
            if !is_url_run(run) {
                out.push_str(run);
            }
            rest = &rest[run_len..];
        } else {
            let ws = rest.chars().next().unwrap();
            out.push(ws);
            rest = &rest[ws.len_utf8()..];
        }
    }
    out
}

fn is_url_run(run: &str) -> bool {
    run.starts_with("http://") || run.starts_with("https://") || run.starts_with("www.")
}

fn is_joiner(c: char) -> bool {
    c == '.' || c == '\'' || c == '-'
}

/// Splits preprocessed text into tokens with byte spans. Whitespace separates
/// chunks; within a chunk, punctuation becomes its own single-character token
/// except for `.`, `'` and `-` sitting between two alphanumerics, which stay
/// inside the word ("38.5", "don't", "x-ray").
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let n = chars.len();
    let mut i = 0;
    while i < n {
        if chars[i].1.is_whitespace() {
            i += 1;
            continue;
        }
        // Collect the chunk [i, j) of non-whitespace characters.
        let mut j = i;
        while j < n && !chars[j].1.is_whitespace() {
            j += 1;
        }
        let mut k = i;
        while k < j {
            let c = chars[k].1;
            let start = chars[k].0;
            if c.is_alphanumeric() || joins_at(&chars, i, j, k) {
                // Word run: alphanumerics plus internal joiners.
                let mut end = k + 1;
                while end < j
                    && (chars[end].1.is_alphanumeric() || joins_at(&chars, i, j, end))
                {
                    end += 1;
                }
                push_token(&mut tokens, text, start, byte_end(&chars, text, end));
                k = end;
            } else {
                // Any other punctuation is a token of its own.
                push_token(&mut tokens, text, start, start + c.len_utf8());
                k += 1;
            }
        }
        i = j;
    }
    tokens
}

/// True when the character at `k` is a joiner flanked by alphanumerics within
/// the chunk `[lo, hi)`.
fn joins_at(chars: &[(usize, char)], lo: usize, hi: usize, k: usize) -> bool {
    is_joiner(chars[k].1)
        && k > lo
        && k + 1 < hi
        && chars[k - 1].1.is_alphanumeric()
        && chars[k + 1].1.is_alphanumeric()
}

fn byte_end(chars: &[(usize, char)], text: &str, idx: usize) -> usize {
    if idx < chars.len() {
        chars[idx].0
    } else {
        text.len()
    }
}

fn push_token(tokens: &mut Vec<Token>, text: &str, start: usize, end: usize) {
    let surface = text[start..end].to_string();
    let norm = surface.to_lowercase();
    tokens.push(Token {
        surface,
        norm,
        span: (start, end),
    });
}

/// Rebuilds the preprocessed text from tokens and the original text, erroring
/// if any token's span or surface disagrees with the text. On success the
/// output equals `text` byte for byte.
pub fn reconstruct(tokens: &[Token], text: &str) -> Result<String, CorpusError> {
    let mut out = String::with_capacity(text.len());
    let mut cursor = 0usize;
    for t in tokens {
        let (start, end) = t.span;
        if start < cursor || end < start {
            return Err(CorpusError::SpanMismatch { start, end });
        }
        let slice = text
            .get(start..end)
            .ok_or(CorpusError::SpanMismatch { start, end })?;
        if slice != t.surface {
            return Err(CorpusError::SpanMismatch { start, end });
        }
        out.push_str(&text[cursor..start]);
        out.push_str(slice);
        cursor = end;
    }
    out.push_str(&text[cursor..]);
    Ok(out)
}

#[derive(Deserialize)]
struct RawMessage {
    role: Option<String>,
    text: Option<String>,
    #[serde(default)]
    gold: Option<Vec<i64>>,
}

#[derive(Deserialize)]
struct RawConversation {
    id: Option<String>,
    #[serde(default)]
    issue_category: Option<String>,
    messages: Option<Vec<RawMessage>>,
}

/// Loads a JSON-lines dataset, validating each conversation: the first
/// message is the patient's, gold labels (where present) are 0/1 and align
/// with the tokenizer's output, ids are unique, and the `kind`-specific
/// requirements hold.
pub fn load_dataset(path: &Path, kind: DatasetKind) -> Result<Vec<Conversation>, CorpusError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: display.clone(),
        source,
    })?;
    let reader = BufReader::new(file);

    let mut conversations = Vec::new();
    let mut seen_ids = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawConversation =
            serde_json::from_str(&line).map_err(|source| CorpusError::Parse {
                path: display.clone(),
                line: lineno,
                source,
            })?;
        let conv = validate_conversation(raw, kind, &display, lineno)?;
        if !seen_ids.insert(conv.id.clone()) {
            return Err(schema(&display, lineno, format!("duplicate id {:?}", conv.id)));
        }
        conversations.push(conv);
    }
    Ok(conversations)
}

fn schema(path: &str, line: usize, message: String) -> CorpusError {
    CorpusError::Schema {
        path: path.to_string(),
        line,
        message,
    }
}

fn validate_conversation(
    raw: RawConversation,
    kind: DatasetKind,
    path: &str,
    line: usize,
) -> Result<Conversation, CorpusError> {
    let id = raw
        .id
        .ok_or_else(|| schema(path, line, "missing field \"id\"".into()))?;
    let issue_category = match raw.issue_category {
        None => None,
        Some(s) => Some(
            IssueCategory::parse(&s)
                .ok_or_else(|| schema(path, line, format!("unknown issue_category {:?}", s)))?,
        ),
    };
    if kind == DatasetKind::Classification && issue_category.is_none() {
        return Err(schema(
            path,
            line,
            format!("conversation {:?} has no issue_category", id),
        ));
    }
    let raw_messages = raw
        .messages
        .ok_or_else(|| schema(path, line, "missing field \"messages\"".into()))?;
    if raw_messages.is_empty() {
        return Err(schema(
            path,
            line,
            format!("conversation {:?} has no messages", id),
        ));
    }

    let mut messages = Vec::with_capacity(raw_messages.len());
    for (m_idx, rm) in raw_messages.into_iter().enumerate() {
        let role_str = rm
            .role
            .ok_or_else(|| schema(path, line, format!("message {m_idx}: missing \"role\"")))?;
        let role = match role_str.as_str() {
            "patient" => Role::Patient,
            "doctor" => Role::Doctor,
            other => {
                return Err(schema(
                    path,
                    line,
                    format!("message {m_idx}: unknown role {other:?}"),
                ))
            }
        };
        let text = rm
            .text
            .ok_or_else(|| schema(path, line, format!("message {m_idx}: missing \"text\"")))?;
        let gold = match rm.gold {
            None => None,
            Some(values) => {
                let mut labels = Vec::with_capacity(values.len());
                for v in values {
                    if v != 0 && v != 1 {
                        return Err(CorpusError::BadLabel { value: v });
                    }
                    labels.push(v as u8);
                }
                Some(labels)
            }
        };
        if kind == DatasetKind::Highlighting && role == Role::Patient && gold.is_none() {
            return Err(schema(
                path,
                line,
                format!("message {m_idx}: patient message has no gold labels"),
            ));
        }
        let message = Message::new(role, &text, gold).map_err(|e| match e {
            CorpusError::LabelLength { gold, tokens, .. } => CorpusError::LabelLength {
                conversation: id.clone(),
                message: m_idx,
                gold,
                tokens,
            },
            other => other,
        })?;
        messages.push(message);
    }
    if messages[0].role != Role::Patient {
        return Err(schema(
            path,
            line,
            format!("conversation {:?} does not open with a patient message", id),
        ));
    }
    Ok(Conversation {
        id,
        issue_category,
        messages,
    })
}

/// Reads term lists (one term per line, blank lines skipped), normalizes them
/// with [`preprocess`] and resolves duplicates across the two sides in favor
/// of the medical list.
pub fn load_term_lexicon(
    medical_paths: &[&Path],
    non_medical_paths: &[&Path],
) -> Result<TermLexicon, CorpusError> {
    let medical_terms = read_term_files(medical_paths)?;
    let mut non_medical_terms = read_term_files(non_medical_paths)?;
    if medical_terms.is_empty() {
        return Err(CorpusError::EmptyLexicon);
    }
    for term in &medical_terms {
        non_medical_terms.remove(term);
    }
    Ok(TermLexicon {
        medical_terms,
        non_medical_terms,
    })
}

fn read_term_files(paths: &[&Path]) -> Result<BTreeSet<String>, CorpusError> {
    let mut terms = BTreeSet::new();
    for path in paths {
        let display = path.display().to_string();
        let file = File::open(path).map_err(|source| CorpusError::Io {
            path: display.clone(),
            source,
        })?;
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|source| CorpusError::Io {
                path: display.clone(),
                source,
            })?;
            let normalized = preprocess(line.trim());
            let normalized = normalized.trim();
            if !normalized.is_empty() {
                terms.insert(normalized.to_string());
            }
        }
    }
    Ok(terms)
}

/// Merges per-annotator 0/1 label rows into one gold row by strict majority
/// vote (with three annotators: two or more).
pub fn merge_annotations(rows: &[Vec<u8>]) -> Result<Vec<u8>, CorpusError> {
    let first = match rows.first() {
        Some(row) => row.len(),
        None => return Err(CorpusError::NoAnnotators),
    };
    for row in rows {
        if row.len() != first {
            return Err(CorpusError::LengthMismatch {
                first,
                other: row.len(),
            });
        }
        if let Some(&bad) = row.iter().find(|&&v| v > 1) {
            return Err(CorpusError::BadLabel { value: bad as i64 });
        }
    }
    let mut merged = Vec::with_capacity(first);
    for unit in 0..first {
        let ones = rows.iter().filter(|row| row[unit] == 1).count();
        merged.push(if 2 * ones > rows.len() { 1 } else { 0 });
    }
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn preprocess_removes_urls_and_lowercases() {
        assert_eq!(preprocess("Visit https://x.co NOW"), "visit  now");
    }

    #[test]
    fn preprocess_maps_line_breaks_to_single_space() {
        assert_eq!(preprocess("Fever 38.5\nand chills"), "fever 38.5 and chills");
        assert_eq!(preprocess("a\r\nb"), "a b");
    }

    #[test]
    fn preprocess_drops_other_control_chars() {
        assert_eq!(preprocess("so\u{7}und"), "sound");
    }

    #[test]
    fn preprocess_removes_all_url_shapes() {
        assert_eq!(preprocess("see www.example.com/page?q=1 ok"), "see  ok");
        assert_eq!(preprocess("http://a.b"), "");
        assert_eq!(preprocess("HTTPS://A.B end"), " end");
    }

    #[test]
    fn tokenize_matches_hand_spans() {
        let tokens = tokenize("stomach pain, headache");
        let surfaces: Vec<&str> = tokens.iter().map(|t| t.surface.as_str()).collect();
        assert_eq!(surfaces, vec!["stomach", "pain", ",", "headache"]);
        let spans: Vec<(usize, usize)> = tokens.iter().map(|t| t.span).collect();
        assert_eq!(spans, vec![(0, 7), (8, 12), (12, 13), (14, 22)]);
    }

    #[test]
    fn tokenize_keeps_internal_joiners() {
        let surfaces = |s: &str| -> Vec<String> {
            tokenize(s).into_iter().map(|t| t.surface).collect()
        };
        assert_eq!(surfaces("don't stop"), vec!["don't", "stop"]);
        assert_eq!(surfaces("temp is 38.5."), vec!["temp", "is", "38.5", "."]);
        assert_eq!(surfaces("x-ray"), vec!["x-ray"]);
        assert_eq!(surfaces("a..b"), vec!["a", ".", ".", "b"]);
        assert_eq!(surfaces("(hello)"), vec!["(", "hello", ")"]);
        assert_eq!(surfaces("-5 degrees"), vec!["-", "5", "degrees"]);
    }

    #[test]
    fn reconstruct_round_trips_fixture_messages() {
        let texts = [
            "hello doctor, my stomach hurts since tuesday.",
            "temp 38.5 now - can't sleep, (really) worried!",
            "visit  now",
            "",
            "   ",
        ];
        for text in texts {
            let pre = preprocess(text);
            let tokens = tokenize(&pre);
            assert_eq!(reconstruct(&tokens, &pre).unwrap(), pre);
        }
    }

    #[test]
    fn reconstruct_rejects_tampered_tokens() {
        let pre = preprocess("stomach pain");
        let mut tokens = tokenize(&pre);
        tokens[1].surface = "ache".into();
        assert!(matches!(
            reconstruct(&tokens, &pre),
            Err(CorpusError::SpanMismatch { .. })
        ));
    }

    #[test]
    fn merge_annotations_votes_by_majority() {
        let rows = vec![vec![1, 1, 0, 0], vec![1, 0, 0, 1], vec![1, 1, 0, 0]];
        assert_eq!(merge_annotations(&rows).unwrap(), vec![1, 1, 0, 0]);
        // Two annotators split 1-1 is not a strict majority.
        let rows = vec![vec![1, 0], vec![0, 0]];
        assert_eq!(merge_annotations(&rows).unwrap(), vec![0, 0]);
    }

    #[test]
    fn merge_annotations_rejects_ragged_rows() {
        let rows = vec![vec![1, 0], vec![1]];
        assert!(matches!(
            merge_annotations(&rows),
            Err(CorpusError::LengthMismatch { first: 2, other: 1 })
        ));
    }

    #[test]
    fn load_dataset_parses_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chats.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"id": "c1", "issue_category": "skin", "messages": [{"role": "patient", "text": "I have a rash", "gold": [0, 0, 0, 1]}, {"role": "doctor", "text": "Since when?"}]}"#,
                "\n",
                r#"{"id": "c2", "issue_category": null, "messages": [{"role": "patient", "text": "hi", "gold": [0]}]}"#,
                "\n",
            ),
        )
        .unwrap();
        let convs = load_dataset(&path, DatasetKind::Highlighting).unwrap();
        assert_eq!(convs.len(), 2);
        assert_eq!(convs[0].id, "c1");
        assert_eq!(convs[0].issue_category, Some(IssueCategory::Skin));
        assert_eq!(convs[0].messages[0].gold, Some(vec![0, 0, 0, 1]));
        assert_eq!(convs[0].messages[1].gold, None);
        assert_eq!(convs[1].issue_category, None);

        // The same file fails classification validation on the null category.
        let err = load_dataset(&path, DatasetKind::Classification).unwrap_err();
        assert!(matches!(err, CorpusError::Schema { line: 2, .. }));
    }

    #[test]
    fn load_dataset_rejects_bad_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let write = |name: &str, content: &str| {
            let p = dir.path().join(name);
            std::fs::write(&p, content).unwrap();
            p
        };

        let p = write("bad_json.jsonl", "{nope\n");
        assert!(matches!(
            load_dataset(&p, DatasetKind::Highlighting),
            Err(CorpusError::Parse { line: 1, .. })
        ));

        let p = write(
            "bad_len.jsonl",
            r#"{"id": "c", "messages": [{"role": "patient", "text": "a b", "gold": [1]}]}"#,
        );
        assert!(matches!(
            load_dataset(&p, DatasetKind::Highlighting),
            Err(CorpusError::LabelLength { gold: 1, tokens: 2, .. })
        ));

        let p = write(
            "no_gold.jsonl",
            r#"{"id": "c", "messages": [{"role": "patient", "text": "a b"}]}"#,
        );
        assert!(load_dataset(&p, DatasetKind::Highlighting).is_err());
        // Plain loads accept data with neither gold nor category ...
        assert!(load_dataset(&p, DatasetKind::Plain).is_ok());
        assert!(load_dataset(&p, DatasetKind::Classification).is_err());
        // ... and the same file is fine for classification-style loads if it
        // has a category.
        let p = write(
            "no_gold_cat.jsonl",
            r#"{"id": "c", "issue_category": "covid19", "messages": [{"role": "patient", "text": "a b"}]}"#,
        );
        assert!(load_dataset(&p, DatasetKind::Classification).is_ok());

        let p = write(
            "doctor_first.jsonl",
            r#"{"id": "c", "messages": [{"role": "doctor", "text": "hello"}]}"#,
        );
        assert!(matches!(
            load_dataset(&p, DatasetKind::Highlighting),
            Err(CorpusError::Schema { .. })
        ));

        let p = write(
            "bad_category.jsonl",
            r#"{"id": "c", "issue_category": "dentistry", "messages": [{"role": "patient", "text": "a", "gold": [0]}]}"#,
        );
        assert!(matches!(
            load_dataset(&p, DatasetKind::Highlighting),
            Err(CorpusError::Schema { .. })
        ));

        let p = write(
            "dup_id.jsonl",
            concat!(
                r#"{"id": "c", "messages": [{"role": "patient", "text": "a", "gold": [0]}]}"#,
                "\n",
                r#"{"id": "c", "messages": [{"role": "patient", "text": "b", "gold": [0]}]}"#,
                "\n",
            ),
        );
        assert!(matches!(
            load_dataset(&p, DatasetKind::Highlighting),
            Err(CorpusError::Schema { line: 2, .. })
        ));
    }

    #[test]
    fn lexicon_resolves_conflicts_to_medical() {
        let dir = tempfile::tempdir().unwrap();
        let med = dir.path().join("med.txt");
        let non = dir.path().join("non.txt");
        std::fs::write(&med, "Fever\nblood pressure\nfever\n\n").unwrap();
        std::fs::write(&non, "chair\nfever\ntable\n").unwrap();
        let lex = load_term_lexicon(&[med.as_path()], &[non.as_path()]).unwrap();
        assert_eq!(
            lex.medical_terms.iter().cloned().collect::<Vec<_>>(),
            vec!["blood pressure", "fever"]
        );
        assert_eq!(
            lex.non_medical_terms.iter().cloned().collect::<Vec<_>>(),
            vec!["chair", "table"]
        );

        let empty = dir.path().join("empty.txt");
        std::fs::write(&empty, "\n\n").unwrap();
        assert!(matches!(
            load_term_lexicon(&[empty.as_path()], &[non.as_path()]),
            Err(CorpusError::EmptyLexicon)
        ));
    }

    /// Text generator exercising URLs, line breaks, control characters,
    /// punctuation and non-ASCII letters.
    fn raw_text_strategy() -> impl Strategy<Value = String> {
        let piece = prop_oneof![
            "[a-zA-Z]{1,8}",
            "[0-9]{1,3}(\\.[0-9]{1,2})?",
            Just("don't".to_string()),
            Just("x-ray".to_string()),
            Just("(well,)".to_string()),
            Just("...".to_string()),
            Just("https://ex.am/q?x=1".to_string()),
            Just("www.site.org".to_string()),
            Just("ünïcode".to_string()),
            Just("\u{7}".to_string()),
            Just("\n".to_string()),
            Just("\r\n".to_string()),
            Just("  ".to_string()),
        ];
        proptest::collection::vec(piece, 0..12).prop_map(|parts| parts.join(" "))
    }

    proptest! {
        #[test]
        fn preprocess_is_idempotent(raw in raw_text_strategy()) {
            let once = preprocess(&raw);
            prop_assert_eq!(preprocess(&once), once);
        }

        #[test]
        fn preprocess_never_grows_ascii_input(raw in raw_text_strategy()) {
            prop_assert!(preprocess(&raw).len() <= raw.len());
        }

        #[test]
        fn tokenize_round_trips(raw in raw_text_strategy()) {
            let pre = preprocess(&raw);
            let tokens = tokenize(&pre);
            prop_assert_eq!(reconstruct(&tokens, &pre).unwrap(), pre);
        }

        #[test]
        fn tokenize_spans_are_increasing_and_normed(raw in raw_text_strategy()) {
            let pre = preprocess(&raw);
            let tokens = tokenize(&pre);
            let mut cursor = 0;
            for t in &tokens {
                prop_assert!(t.span.0 >= cursor);
                prop_assert!(t.span.1 > t.span.0);
                prop_assert_eq!(&t.norm, &t.surface.to_lowercase());
                prop_assert!(!t.surface.chars().any(char::is_whitespace));
                cursor = t.span.1;
            }
        }

        #[test]
        fn merge_matches_brute_force_vote(
            rows in proptest::collection::vec(
                proptest::collection::vec(0u8..=1, 7), 1..5)
        ) {
            let merged = merge_annotations(&rows).unwrap();
            for unit in 0..7 {
                let ones = rows.iter().filter(|r| r[unit] == 1).count();
                let zeros = rows.len() - ones;
                prop_assert_eq!(merged[unit] == 1, ones > zeros);
            }
        }
    }
}

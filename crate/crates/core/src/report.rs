//! HTML rendering of highlight predictions against gold labels, plus
//! pattern-based redaction of sensitive text.
//!
//! The renderer walks each message's tokens by their byte spans, so the
//! emitted markup preserves the preprocessed text exactly: stripping tags
//! (and undoing entity escaping) recovers every message byte for byte,
//! apart from the `Speaker: ` decoration that prefixes each turn.
//!
//! Colors follow the scheme used throughout the project's figures: true
//! positives yellow `#ffe066`, false positives blue `#a5d8ff`, false
//! negatives magenta `#faa2c1`.

use crate::corpus::{Conversation, Role};
use regex::Regex;
use serde::Deserialize;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("predictions/gold are misaligned with the conversation: {message}")]
    Alignment { message: String },
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid rule file {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid redaction pattern {pattern:?}: {source}")]
    BadPattern {
        pattern: String,
        #[source]
        source: regex::Error,
    },
}

/// Escapes a text node for safe embedding in HTML.
pub fn escape_html(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for ch in text.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(ch),
        }
    }
    out
}

/// Removes tags and undoes [`escape_html`]; the inverse used by the
/// round-trip tests.
pub fn strip_tags(html: &str) -> String {
    let mut out = String::with_capacity(html.len());
    let mut in_tag = false;
    for ch in html.chars() {
        match ch {
            '<' => in_tag = true,
            '>' => in_tag = false,
            _ if !in_tag => out.push(ch),
            _ => {}
        }
    }
    out.replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&quot;", "\"")
        .replace("&#39;", "'")
        .replace("&amp;", "&")
}

const STYLE: &str = "body { margin: 2rem auto; max-width: 46rem; padding: 0 1rem; \
font-family: Georgia, serif; line-height: 1.7; color: #1a1a1a; background: #fff; }\n\
h1 { font-size: 1.3rem; }\n\
.category { color: #555; font-style: italic; }\n\
.message { margin: 0.4rem 0; }\n\
.speaker { font-weight: bold; }\n\
.tp { background: #ffe066; }\n\
.fp { background: #a5d8ff; }\n\
.fn { background: #faa2c1; }\n\
.legend span { padding: 0 0.35rem; margin-right: 0.6rem; }\n";

fn speaker_label(role: Role) -> &'static str {
    match role {
        Role::Patient => "Patient",
        Role::Doctor => "Doctor",
    }
}

/// Renders one conversation as a self-contained HTML page, marking each
/// token against the threshold as a true positive, false positive or false
/// negative span (unmarked tokens get a bare span).
///
/// `predictions` and `gold` run parallel to the messages; a `None` entry
/// stands for "no scores" / "no labels" and is treated as all zeros, so a
/// prediction without gold renders as false positives and gold without a
/// prediction as false negatives. Passing a message's own predictions as
/// its gold shows plain highlights: every marked token is a true positive.
pub fn render_html(
    conversation: &Conversation,
    predictions: &[Option<Vec<f64>>],
    gold: &[Option<Vec<u8>>],
    threshold: f64,
) -> Result<String, ReportError> {
    let messages = conversation.messages.len();
    if predictions.len() != messages || gold.len() != messages {
        return Err(ReportError::Alignment {
            message: format!(
                "{} messages but {} prediction rows and {} gold rows",
                messages,
                predictions.len(),
                gold.len()
            ),
        });
    }

    let mut html = String::new();
    html.push_str("<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n");
    let _ = writeln!(html, "<title>Conversation {}</title>", escape_html(&conversation.id));
    html.push_str("<style>\n");
    html.push_str(STYLE);
    html.push_str("</style>\n</head>\n<body>\n<main>\n");
    let _ = writeln!(html, "<h1>Conversation {}</h1>", escape_html(&conversation.id));
    if let Some(category) = conversation.issue_category {
        let _ = writeln!(
            html,
            "<p class=\"category\">Issue category: {}</p>",
            category.as_str()
        );
    }
    html.push_str(
        "<p class=\"legend\"><span class=\"tp\">true positive</span>\
<span class=\"fp\">false positive</span>\
<span class=\"fn\">false negative</span></p>\n",
    );

    for (index, message) in conversation.messages.iter().enumerate() {
        let token_count = message.tokens.len();
        let scores = predictions[index].as_deref();
        let labels = gold[index].as_deref();
        if let Some(s) = scores {
            if s.len() != token_count {
                return Err(ReportError::Alignment {
                    message: format!(
                        "message {index} has {token_count} tokens but {} scores",
                        s.len()
                    ),
                });
            }
        }
        if let Some(g) = labels {
            if g.len() != token_count {
                return Err(ReportError::Alignment {
                    message: format!(
                        "message {index} has {token_count} tokens but {} gold labels",
                        g.len()
                    ),
                });
            }
        }

        let text = message.preprocessed();
        let _ = write!(
            html,
            "<p class=\"message\"><span class=\"speaker\">{}</span>: ",
            speaker_label(message.role)
        );
        let mut cursor = 0usize;
        for (t, token) in message.tokens.iter().enumerate() {
            let (start, end) = token.span;
            html.push_str(&escape_html(&text[cursor..start]));
            let predicted = scores.map(|s| s[t] >= threshold).unwrap_or(false);
            let marked = labels.map(|g| g[t] == 1).unwrap_or(false);
            let class = match (predicted, marked) {
                (true, true) => Some("tp"),
                (true, false) => Some("fp"),
                (false, true) => Some("fn"),
                (false, false) => None,
            };
            match class {
                Some(c) => {
                    let _ = write!(html, "<span class=\"{c}\">{}</span>", escape_html(&token.surface));
                }
                None => {
                    let _ = write!(html, "<span>{}</span>", escape_html(&token.surface));
                }
            }
            cursor = end;
        }
        html.push_str(&escape_html(&text[cursor..]));
        html.push_str("</p>\n");
    }

    html.push_str("</main>\n</body>\n</html>\n");
    Ok(html)
}

// ---------------------------------------------------------------------------
// Redaction

/// One redaction rule: any regex match is replaced by the placeholder.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct RedactionRule {
    pub pattern: String,
    pub placeholder: String,
}

/// Loads a JSON list of `{pattern, placeholder}` objects.
pub fn load_redaction_rules(path: &Path) -> Result<Vec<RedactionRule>, ReportError> {
    let text = fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| ReportError::Json {
        path: path.display().to_string(),
        source,
    })
}

/// Replaces every rule match with its placeholder. Overlaps resolve
/// leftmost-longest: matches are swept in start order, longer match first,
/// earlier rule first on exact ties, and a match inside an already-consumed
/// region is dropped.
pub fn redact(text: &str, rules: &[RedactionRule]) -> Result<String, ReportError> {
    if rules.is_empty() {
        return Ok(text.to_string());
    }
    let mut matches: Vec<(usize, usize, usize)> = Vec::new();
    for (rule_index, rule) in rules.iter().enumerate() {
        let regex = Regex::new(&rule.pattern).map_err(|source| ReportError::BadPattern {
            pattern: rule.pattern.clone(),
            source,
        })?;
        for found in regex.find_iter(text) {
            if !found.is_empty() {
                matches.push((found.start(), found.end(), rule_index));
            }
        }
    }
    matches.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));

    let mut out = String::with_capacity(text.len());
    let mut cursor = 0usize;
    for (start, end, rule_index) in matches {
        if start < cursor {
            continue;
        }
        out.push_str(&text[cursor..start]);
        out.push_str(&rules[rule_index].placeholder);
        cursor = end;
    }
    out.push_str(&text[cursor..]);
    Ok(out)
}

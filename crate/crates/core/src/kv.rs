//! `key = value` text documents with `#` comments, shared by the run
//! configuration and the conversion report.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
#[error("line {line}: {detail}")]
pub struct KvError {
    pub line: usize,
    pub detail: String,
}

/// Ordered `(key, value, line)` entries. Blank lines and lines starting with
/// `#` are skipped; a `#` after a value starts a trailing comment. Keys may
/// not repeat.
pub fn parse(text: &str) -> Result<Vec<(String, String, usize)>, KvError> {
    let mut out: Vec<(String, String, usize)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(KvError {
                line,
                detail: format!("expected `key = value`, found `{content}`"),
            });
        };
        let key = key.trim();
        if key.is_empty()
            || !key
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'))
        {
            return Err(KvError {
                line,
                detail: format!("invalid key `{key}`"),
            });
        }
        if let Some((_, _, first)) = out.iter().find(|(k, _, _)| k == key) {
            return Err(KvError {
                line,
                detail: format!("key `{key}` already set on line {first}"),
            });
        }
        out.push((key.to_string(), value.trim().to_string(), line));
    }
    Ok(out)
}

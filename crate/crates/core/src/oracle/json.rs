//! Recovering a JSON object from free-form model output.

use serde_json::Value;

use super::OracleError;

/// Returns the first balanced top-level JSON object in `raw`.
///
/// Code fences and surrounding prose are ignored. A candidate that fails to
/// parse is retried after removing `//` line comments and trailing commas
/// (both appear when a model copies a commented skeleton); if it still fails
/// the scan moves on to the next `{`.
pub fn extract_json(raw: &str) -> Result<Value, OracleError> {
    let bytes = raw.as_bytes();
    let mut start = 0;
    while let Some(offset) = raw[start..].find('{') {
        let open = start + offset;
        if let Some(close) = balanced_end(bytes, open) {
            let candidate = &raw[open..=close];
            if let Ok(v @ Value::Object(_)) = serde_json::from_str::<Value>(candidate) {
                return Ok(v);
            }
            if let Ok(v @ Value::Object(_)) = serde_json::from_str::<Value>(&repair(candidate)) {
                return Ok(v);
            }
        }
        start = open + 1;
    }
    Err(OracleError::NoJsonFound)
}

/// Index of the `}` closing the object opened at `open`, skipping string
/// contents.
fn balanced_end(bytes: &[u8], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        if in_string {
            match (escaped, b) {
                (true, _) => escaped = false,
                (false, b'\\') => escaped = true,
                (false, b'"') => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

/// Strips `//` comments and trailing commas outside string literals.
fn repair(text: &str) -> String {
    drop_trailing_commas(&strip_line_comments(text))
}

/// Calls `f(byte_index, c, in_string)` for every char.
fn scan(text: &str, mut f: impl FnMut(usize, char, bool)) {
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in text.char_indices() {
        let was_in_string = in_string;
        if in_string {
            match (escaped, c) {
                (true, _) => escaped = false,
                (false, '\\') => escaped = true,
                (false, '"') => in_string = false,
                _ => {}
            }
        } else if c == '"' {
            in_string = true;
        }
        f(i, c, was_in_string);
    }
}

fn strip_line_comments(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut in_comment = false;
    let mut prev_slash = false;
    scan(text, |_, c, in_string| {
        if in_comment {
            if c == '\n' {
                in_comment = false;
                out.push(c);
            }
            return;
        }
        if !in_string && c == '/' {
            if prev_slash {
                out.pop();
                in_comment = true;
                prev_slash = false;
                return;
            }
            prev_slash = true;
        } else {
            prev_slash = false;
        }
        out.push(c);
    });
    out
}

fn drop_trailing_commas(text: &str) -> String {
    let mut drop = Vec::new();
    scan(text, |i, c, in_string| {
        if !in_string && c == ',' {
            let next = text[i + 1..].chars().find(|c| !c.is_whitespace());
            if matches!(next, Some('}') | Some(']')) {
                drop.push(i);
            }
        }
    });
    text.char_indices()
        .filter(|(i, _)| !drop.contains(i))
        .map(|(_, c)| c)
        .collect()
}

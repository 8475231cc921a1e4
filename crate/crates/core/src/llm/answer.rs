use serde_json::{Map, Value};

/// Why a completion could not be turned into an answer map.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AnswerParseError {
    #[error("no JSON object found in: {text}")]
    NoObject { text: String },
    #[error("answer lacks field `{field}`: {text}")]
    MissingField { field: String, text: String },
}

/// Extracts the first JSON object embedded in `text` and checks that it
/// carries every field in `required`.
///
/// Surrounding prose and Markdown fences are tolerated. Objects that only
/// fail strict parsing because of `//` comments or trailing commas (the
/// answer skeleton in our prompts has both) are accepted after those are
/// removed.
pub fn parse_json_answer(text: &str, required: &[&str]) -> Result<Map<String, Value>, AnswerParseError> {
    let object = first_object(text).ok_or_else(|| AnswerParseError::NoObject { text: text.to_string() })?;
    for field in required {
        if !object.contains_key(*field) {
            return Err(AnswerParseError::MissingField {
                field: (*field).to_string(),
                text: text.to_string(),
            });
        }
    }
    Ok(object)
}

fn first_object(text: &str) -> Option<Map<String, Value>> {
    for (start, _) in text.match_indices('{') {
        let rest = &text[start..];
        let mut stream = serde_json::Deserializer::from_str(rest).into_iter::<Value>();
        if let Some(Ok(Value::Object(map))) = stream.next() {
            return Some(map);
        }
        if let Some(end) = balanced_end(rest) {
            let cleaned = strip_comments_and_trailing_commas(&rest[..end]);
            if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(&cleaned) {
                return Some(map);
            }
        }
    }
    None
}

/// Byte length of the brace-balanced prefix starting at `text[0] == '{'`.
fn balanced_end(text: &str) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in text.char_indices() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

fn strip_comments_and_trailing_commas(text: &str) -> String {
    let without_comments = scan_outside_strings(text, |chars, i, out| {
        if chars[i] == '/' && chars.get(i + 1) == Some(&'/') {
            let mut j = i;
            while j < chars.len() && chars[j] != '\n' {
                j += 1;
            }
            return j;
        }
        out.push(chars[i]);
        i + 1
    });
    scan_outside_strings(&without_comments, |chars, i, out| {
        if chars[i] == ',' {
            let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
            if matches!(next, Some('}') | Some(']')) {
                return i + 1;
            }
        }
        out.push(chars[i]);
        i + 1
    })
}

/// Copies string literals verbatim and lets `step` rewrite everything else.
/// `step` returns the index to continue from.
fn scan_outside_strings(text: &str, mut step: impl FnMut(&[char], usize, &mut String) -> usize) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    while i < chars.len() {
        if chars[i] == '"' {
            out.push('"');
            i += 1;
            while i < chars.len() {
                out.push(chars[i]);
                if chars[i] == '\\' && i + 1 < chars.len() {
                    out.push(chars[i + 1]);
                    i += 2;
                    continue;
                }
                i += 1;
                if chars[i - 1] == '"' {
                    break;
                }
            }
            continue;
        }
        i = step(&chars, i, &mut out);
    }
    out
}

/// The `sql` answer salvaged from a completion that failed JSON parsing:
/// the body of its only fenced code block, if there is exactly one.
pub fn single_code_block(text: &str) -> Option<String> {
    let mut blocks = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        let Some(close) = after.find("```") else { break };
        let body = &after[..close];
        // drop an info string such as `sql`
        let body = match body.find('\n') {
            Some(nl) if !body[..nl].trim().contains(' ') => &body[nl + 1..],
            _ => body,
        };
        blocks.push(body.trim().to_string());
        rest = &after[close + 3..];
    }
    match blocks.as_slice() {
        [only] if !only.is_empty() => Some(only.clone()),
        _ => None,
    }
}

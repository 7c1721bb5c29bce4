//! Minimal ATX-heading scanner shared by the contract parser, anchor slicing
//! and the verifier. Fenced code blocks are skipped.

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Heading {
    /// 0-based line index.
    pub line: usize,
    pub level: usize,
    pub text: String,
}

/// Parses one line as an ATX heading, returning `(level, text)`.
pub fn atx_heading(line: &str) -> Option<(usize, &str)> {
    let trimmed = line.trim_end_matches(['\r', '\n']);
    let indent = trimmed.len() - trimmed.trim_start_matches(' ').len();
    if indent > 3 {
        return None;
    }
    let rest = &trimmed[indent..];
    let level = rest.bytes().take_while(|&b| b == b'#').count();
    if level == 0 || level > 6 {
        return None;
    }
    let after = &rest[level..];
    if !after.is_empty() && !after.starts_with([' ', '\t']) {
        return None;
    }
    let mut text = after.trim();
    // optional closing sequence
    let stripped = text.trim_end_matches('#');
    if stripped.len() != text.len() && (stripped.is_empty() || stripped.ends_with([' ', '\t'])) {
        text = stripped.trim_end();
    }
    Some((level, text))
}

fn is_fence(line: &str) -> bool {
    let t = line.trim_start();
    t.starts_with("```") || t.starts_with("~~~")
}

/// All ATX headings outside fenced code blocks, in order.
pub fn headings(text: &str) -> Vec<Heading> {
    let mut out = Vec::new();
    let mut in_fence = false;
    for (i, line) in text.lines().enumerate() {
        if is_fence(line) {
            in_fence = !in_fence;
            continue;
        }
        if in_fence {
            continue;
        }
        if let Some((level, t)) = atx_heading(line) {
            out.push(Heading {
                line: i,
                level,
                text: t.to_string(),
            });
        }
    }
    out
}

/// Texts of the level-2 headings in `text`.
pub fn level2_headings(text: &str) -> Vec<String> {
    headings(text)
        .into_iter()
        .filter(|h| h.level == 2)
        .map(|h| h.text)
        .collect()
}

/// GitHub-style anchor slug: lowercase, spaces to `-`, punctuation dropped.
pub fn slug(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for ch in text.trim().chars() {
        if ch.is_alphanumeric() || ch == '_' {
            out.extend(ch.to_lowercase());
        } else if ch == ' ' || ch == '-' {
            out.push('-');
        }
    }
    out
}

/// Whether a heading's text answers to `anchor` (exact text first, then slug).
pub fn anchor_matches(heading_text: &str, anchor: &str) -> bool {
    heading_text == anchor || slug(heading_text) == slug(anchor)
}

/// The first heading that answers to `anchor`.
pub fn find_anchor(text: &str, anchor: &str) -> Option<Heading> {
    let all = headings(text);
    all.iter()
        .find(|h| h.text == anchor)
        .or_else(|| all.iter().find(|h| anchor_matches(&h.text, anchor)))
        .cloned()
}

/// Content from the heading named by `anchor` up to (not including) the next
/// heading of equal or higher level. The heading line itself is included.
pub fn heading_slice<'a>(text: &'a str, anchor: &str) -> Option<&'a str> {
    let start = find_anchor(text, anchor)?;
    let end_line = headings(text)
        .into_iter()
        .find(|h| h.line > start.line && h.level <= start.level)
        .map(|h| h.line);
    let offsets = line_offsets(text);
    let from = offsets[start.line];
    let to = end_line.map_or(text.len(), |l| offsets[l]);
    Some(&text[from..to])
}

/// Byte offset of the start of each line (as split by `str::lines`).
pub fn line_offsets(text: &str) -> Vec<usize> {
    let mut offsets = vec![0];
    for (i, b) in text.bytes().enumerate() {
        if b == b'\n' && i + 1 < text.len() {
            offsets.push(i + 1);
        }
    }
    offsets
}

//! Small text helpers shared by several modules.

/// Decodes captured bytes, keeping valid UTF-8 and rendering invalid bytes
/// and non-whitespace control characters as `\xHH`.
pub fn escape_binary(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len());
    for chunk in bytes.utf8_chunks() {
        push_escaped(&mut out, chunk.valid());
        for b in chunk.invalid() {
            out.push_str(&format!("\\x{b:02X}"));
        }
    }
    out
}

/// Escapes control characters other than newline, carriage return and tab.
pub fn escape_controls(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    push_escaped(&mut out, text);
    out
}

fn push_escaped(out: &mut String, text: &str) {
    for c in text.chars() {
        if c.is_control() && !matches!(c, '\n' | '\r' | '\t') && (c as u32) < 0x100 {
            out.push_str(&format!("\\x{:02X}", c as u32));
        } else {
            out.push(c);
        }
    }
}

/// Lowercases and collapses runs of whitespace into single spaces.
pub fn normalize_ws_lower(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Collapses all whitespace (including newlines) into single spaces.
pub fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Returns the contents of fenced code blocks in order. The info string of
/// the opening fence is returned alongside the body.
pub fn fenced_blocks(text: &str) -> Vec<(String, String)> {
    let mut blocks = Vec::new();
    let mut current: Option<(String, Vec<&str>)> = None;
    for line in text.lines() {
        let trimmed = line.trim_start();
        if let Some(rest) = trimmed.strip_prefix("```") {
            match current.take() {
                Some((info, body)) => blocks.push((info, body.join("\n"))),
                None => current = Some((rest.trim().to_string(), Vec::new())),
            }
        } else if let Some((_, body)) = current.as_mut() {
            body.push(line);
        }
    }
    blocks
}

/// Truncates to at most `max` bytes on a char boundary.
pub fn truncate_bytes(text: &mut String, max: usize) {
    if text.len() > max {
        let mut cut = max;
        while !text.is_char_boundary(cut) {
            cut -= 1;
        }
        text.truncate(cut);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_bytes_are_hex_escaped() {
        assert_eq!(escape_binary(b"ok\n\xff\x00done"), "ok\n\\xFF\\x00done");
        assert_eq!(escape_binary("héllo".as_bytes()), "héllo");
    }

    #[test]
    fn fenced_blocks_in_order() {
        let t = "intro\n```ptt\n1 A [TODO]\n```\nmid\n```\nx\n```\n";
        let b = fenced_blocks(t);
        assert_eq!(b.len(), 2);
        assert_eq!(b[0], ("ptt".to_string(), "1 A [TODO]".to_string()));
        assert_eq!(b[1].1, "x");
    }

    #[test]
    fn truncation_respects_char_boundaries() {
        let mut s = "aé".to_string();
        truncate_bytes(&mut s, 2);
        assert_eq!(s, "a");
    }
}

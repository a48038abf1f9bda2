//! Minimal lexer for guest (Python) source: splits code, string literals and
//! comments so pattern checks never fire inside strings or comments.

use std::ops::Range;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Code,
    Str,
    Comment,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub kind: SegmentKind,
    /// Byte range of the whole segment in the source (quotes included).
    pub span: Range<usize>,
    /// Byte range of a string literal's contents; equals `span` otherwise.
    pub inner: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LexError {
    pub offset: usize,
}

fn is_prefix_char(c: u8) -> bool {
    matches!(c, b'r' | b'R' | b'b' | b'B' | b'f' | b'F' | b'u' | b'U')
}

pub fn lex(src: &str) -> Result<Vec<Segment>, LexError> {
    let bytes = src.as_bytes();
    let mut segments = Vec::new();
    let mut code_start = 0;
    let mut i = 0;
    let flush_code = |segments: &mut Vec<Segment>, from: usize, to: usize| {
        if to > from {
            segments.push(Segment {
                kind: SegmentKind::Code,
                span: from..to,
                inner: from..to,
            });
        }
    };
    while i < bytes.len() {
        match bytes[i] {
            b'#' => {
                flush_code(&mut segments, code_start, i);
                let end = src[i..].find('\n').map(|p| i + p).unwrap_or(bytes.len());
                segments.push(Segment {
                    kind: SegmentKind::Comment,
                    span: i..end,
                    inner: i..end,
                });
                i = end;
                code_start = i;
            }
            q @ (b'"' | b'\'') => {
                // include a string prefix like r, b, f, rb
                let mut start = i;
                while start > code_start
                    && is_prefix_char(bytes[start - 1])
                    && i - (start - 1) <= 2
                    && (start - 1 == 0 || !is_ident_byte(bytes[start - 2]))
                {
                    start -= 1;
                }
                flush_code(&mut segments, code_start, start);
                let triple = bytes.len() >= i + 3 && bytes[i + 1] == q && bytes[i + 2] == q;
                let open_len = if triple { 3 } else { 1 };
                let body_start = i + open_len;
                let mut j = body_start;
                let end = loop {
                    if j >= bytes.len() {
                        return Err(LexError { offset: i });
                    }
                    let c = bytes[j];
                    // raw strings still cannot end in an escaped quote
                    if c == b'\\' {
                        j += 2;
                        continue;
                    }
                    if !triple && c == b'\n' {
                        return Err(LexError { offset: i });
                    }
                    if c == q
                        && (!triple || (bytes.get(j + 1) == Some(&q) && bytes.get(j + 2) == Some(&q)))
                    {
                        break j;
                    }
                    j += 1;
                };
                let close = end + open_len;
                segments.push(Segment {
                    kind: SegmentKind::Str,
                    span: start..close,
                    inner: body_start..end,
                });
                i = close;
                code_start = i;
            }
            _ => i += 1,
        }
    }
    flush_code(&mut segments, code_start, bytes.len());
    Ok(segments)
}

fn is_ident_byte(c: u8) -> bool {
    c.is_ascii_alphanumeric() || c == b'_'
}

/// Source with string contents replaced by empty literals and comments removed,
/// plus the list of string literal contents.
pub fn code_view(src: &str) -> Result<(String, Vec<String>), LexError> {
    let segments = lex(src)?;
    let mut code = String::with_capacity(src.len());
    let mut strings = Vec::new();
    for seg in segments {
        match seg.kind {
            SegmentKind::Code => code.push_str(&src[seg.span]),
            SegmentKind::Str => {
                code.push_str("\"\"");
                strings.push(src[seg.inner].to_string());
            }
            SegmentKind::Comment => {}
        }
    }
    Ok((code, strings))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_strings_and_comments() {
        let src = "x = 'a#b'  # note\ny = r\"c\\d\"\nz = \"\"\"multi\nline\"\"\"";
        let (code, strings) = code_view(src).unwrap();
        assert_eq!(strings, vec!["a#b", "c\\d", "multi\nline"]);
        assert!(!code.contains("note"));
        assert!(code.contains("x = \"\""));
    }

    #[test]
    fn unterminated_string_fails() {
        assert!(lex("x = 'abc").is_err());
        assert!(lex("x = \"\"\"abc").is_err());
    }

    #[test]
    fn escaped_quotes() {
        let (_, strings) = code_view(r#"s = "a\"b""#).unwrap();
        assert_eq!(strings, vec![r#"a\"b"#]);
    }
}

//! Programmatic answer matching for closed-form gold answers: option letters,
//! numbers, and normalized strings.

use std::sync::OnceLock;

use regex::Regex;

/// Lowercase, trim surrounding whitespace and punctuation, collapse spaces.
pub fn normalize_answer(s: &str) -> String {
    let trimmed = s.trim().trim_matches(|c: char| c.is_whitespace() || ".,;:!?\"'`".contains(c));
    trimmed
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

fn letter_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*\(?([A-H])\)?(?:[.:)]|\s|$)").expect("static pattern"))
}

/// Leading option letter of an answer: `C`, `C.`, `(C)`, `C. blue`.
pub fn option_letter(s: &str) -> Option<char> {
    letter_re()
        .captures(s)
        .and_then(|c| c[1].chars().next())
}

/// Gold answers that are exactly an option letter (`C`, `C.`, `(C)`) or an
/// option with its text (`C. blue`).
fn gold_letter(gold: &str) -> Option<char> {
    let g = gold.trim();
    let letter = option_letter(g)?;
    let rest = letter_re().replace(g, "");
    let rest = rest.trim();
    // a bare capital word like "A dog" is not an option
    if rest.is_empty() || g.starts_with('(') || g[1..].starts_with(['.', ':', ')']) {
        Some(letter)
    } else {
        None
    }
}

pub fn parse_number(s: &str) -> Option<f64> {
    let t = normalize_answer(s).replace(',', "");
    t.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// `Some(correct)` when the gold answer admits programmatic matching,
/// `None` when a judge is needed.
pub fn closed_form_match(prediction: &str, gold: &str) -> Option<bool> {
    if normalize_answer(prediction).is_empty() {
        return Some(false);
    }
    if normalize_answer(prediction) == normalize_answer(gold) {
        return Some(true);
    }
    if let Some(g) = gold_letter(gold) {
        return Some(option_letter(prediction) == Some(g));
    }
    if let Some(g) = parse_number(gold) {
        return Some(parse_number(prediction).is_some_and(|p| (p - g).abs() <= 1e-9 * g.abs().max(1.0)));
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn option_letters() {
        assert_eq!(closed_form_match("C. blue", "C"), Some(true));
        assert_eq!(closed_form_match("B. yellow", "B"), Some(true));
        assert_eq!(closed_form_match("(B)", "B."), Some(true));
        assert_eq!(closed_form_match("A. red", "B"), Some(false));
        assert_eq!(closed_form_match("C", "C. Right"), Some(true));
    }

    #[test]
    fn numbers() {
        assert_eq!(closed_form_match("3.0", "3"), Some(true));
        assert_eq!(closed_form_match("1,000", "1000"), Some(true));
        assert_eq!(closed_form_match("4", "3"), Some(false));
        assert_eq!(closed_form_match("three", "3"), Some(false));
    }

    #[test]
    fn strings() {
        assert_eq!(closed_form_match("  Blue. ", "blue"), Some(true));
        assert_eq!(closed_form_match("", "blue"), Some(false));
        assert_eq!(closed_form_match("navy", "blue"), None);
        assert_eq!(closed_form_match("A dog", "A cat"), None);
    }
}

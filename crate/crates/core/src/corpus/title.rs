//! Title normalization used for catalog lookup and output matching.

use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

/// Normalizes a movie title into a lookup key.
///
/// NFKC, accent folding, lowercase, a trailing parenthesized four-digit
/// year is dropped, punctuation removed, whitespace collapsed.
///
/// ```
/// use recgen::corpus::normalize_title;
/// assert_eq!(normalize_title("The Matrix (1999)"), "the matrix");
/// assert_eq!(normalize_title("  Se7en! "), "se7en");
/// ```
pub fn normalize_title(raw: &str) -> String {
    normalize(raw, true)
}

/// Same as [`normalize_title`] but keeps the year digits, so
/// `"Heat (1995)"` becomes `"heat 1995"`.
pub fn normalize_title_with_year(raw: &str) -> String {
    normalize(raw, false)
}

fn normalize(raw: &str, strip_year: bool) -> String {
    let composed: String = raw.nfkc().collect();
    let base = if strip_year {
        strip_trailing_year(&composed).0
    } else {
        composed.as_str()
    };

    let mut out = String::with_capacity(base.len());
    let mut pending_space = false;
    for ch in base.to_lowercase().nfkd().filter(|c| !is_combining_mark(*c)) {
        if ch.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(ch);
        } else if is_elided(ch) {
            // apostrophes join: "schindler's" -> "schindlers"
        } else {
            pending_space = true;
        }
    }
    out.nfc().collect()
}

fn is_elided(ch: char) -> bool {
    matches!(ch, '\'' | '\u{2019}' | '\u{2018}' | '`' | '\u{00b4}')
}

/// Splits `"Heat (1995)"` into `("Heat", Some(1995))`. Titles without a
/// trailing parenthesized year come back unchanged.
pub fn strip_trailing_year(title: &str) -> (&str, Option<i32>) {
    let trimmed = title.trim_end();
    let bytes = trimmed.as_bytes();
    if bytes.len() >= 6 && bytes[bytes.len() - 1] == b')' && bytes[bytes.len() - 6] == b'(' {
        let digits = &trimmed[trimmed.len() - 5..trimmed.len() - 1];
        if digits.bytes().all(|b| b.is_ascii_digit()) {
            let head = trimmed[..trimmed.len() - 6].trim_end();
            return (head, digits.parse().ok());
        }
    }
    (title, None)
}

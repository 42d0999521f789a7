//! Case-insensitive whole-word phrase matching.

/// Splits `s` into lower-cased alphanumeric words. Hyphens and other
/// punctuation act as separators.
pub fn tokenize(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

/// True if `needle` occurs as a contiguous run of words in `haystack`.
pub fn contains_seq(haystack: &[String], needle: &[String]) -> bool {
    if needle.is_empty() || needle.len() > haystack.len() {
        return false;
    }
    haystack.windows(needle.len()).any(|w| w == needle)
}

/// Whole-word, case-insensitive phrase test on raw text.
pub fn mentions(text: &str, phrase: &str) -> bool {
    contains_seq(&tokenize(text), &tokenize(phrase))
}

/// Pre-tokenized text for repeated phrase lookups.
#[derive(Debug, Clone)]
pub struct Tokens(Vec<String>);

impl Tokens {
    pub fn new(text: &str) -> Self {
        Tokens(tokenize(text))
    }

    pub fn mentions(&self, phrase: &str) -> bool {
        contains_seq(&self.0, &tokenize(phrase))
    }
}

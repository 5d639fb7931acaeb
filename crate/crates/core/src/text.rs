//! Word tokenization shared by similarity, operation F1 and the template policy.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

/// Lowercased alphanumeric runs; every other character separates tokens.
pub fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Size of the multiset intersection of two token lists.
pub fn multiset_overlap(a: &[String], b: &[String]) -> usize {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in a {
        *counts.entry(t.as_str()).or_insert(0) += 1;
    }
    let mut shared = 0;
    for t in b {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                shared += 1;
            }
        }
    }
    shared
}

/// Phrases enclosed in single, double or typographic quotes, in order of appearance.
pub fn quoted_phrases(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some((start, c)) = chars.next() {
        let close = match c {
            '\'' => '\'',
            '"' => '"',
            '\u{2018}' => '\u{2019}',
            '\u{201C}' => '\u{201D}',
            _ => continue,
        };
        // An apostrophe inside a word ("don't") does not open a quote.
        if c == '\'' && text[..start].chars().next_back().is_some_and(char::is_alphanumeric) {
            continue;
        }
        let body_start = start + c.len_utf8();
        if let Some(rel) = text[body_start..].find(close) {
            let phrase = text[body_start..body_start + rel].trim();
            if !phrase.is_empty() {
                out.push(String::from(phrase));
            }
            let resume = body_start + rel + close.len_utf8();
            while chars.peek().is_some_and(|&(i, _)| i < resume) {
                chars.next();
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn splits_on_non_alphanumerics() {
        assert_eq!(tokens("Typed 'November 4th', setting"), vec!["typed", "november", "4th", "setting"]);
        assert_eq!(tokens("search_filled"), vec!["search", "filled"]);
        assert_eq!(tokens("¥400"), vec!["400"]);
        assert!(tokens("  --  ").is_empty());
    }

    #[test]
    fn overlap_counts_multiplicity() {
        let a = tokens("flight flight search");
        let b = tokens("flight search search");
        assert_eq!(multiset_overlap(&a, &b), 2);
        assert_eq!(multiset_overlap(&b, &a), 2);
    }

    #[test]
    fn quoted_phrases_in_order() {
        assert_eq!(
            quoted_phrases("Input 'Hangzhou' as the \"departure city\""),
            vec!["Hangzhou", "departure city"]
        );
        assert_eq!(quoted_phrases("don't 'go'"), vec!["go"]);
        assert!(quoted_phrases("no quotes").is_empty());
    }
}

//! Regulation-aware text front end: normalization, number protection,
//! rule-based semantic tuples and a BPE sub-word vocabulary.

mod bpe;
mod kb;
mod rules;

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

pub use bpe::{
    build_vocab, build_vocab_with, detokenize, tokenize, TokenSequence, TokenSpan, Vocab, DEFAULT_VOCAB_SIZE, MARKER,
};
pub use kb::{CategoryInfo, Glyph, KnowledgeBase};
pub use rules::{parse_semantic_tuple, Kind, Numeric, Rule, SemanticTuple, Shape, Unit};

/// Token names in id order; ids 0..5 are always reserved.
pub const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[NUM]"];
pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const NUM: u32 = 4;

/// Byte range of one numeric literal inside normalized text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtectedSpan {
    pub start: usize,
    pub end: usize,
    pub literal: String,
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d+(?:\.\d+)?").expect("static regex"))
}

struct UnitRule {
    re: Regex,
    rep: &'static str,
}

fn unit_rules() -> &'static [UnitRule] {
    static RULES: OnceLock<Vec<UnitRule>> = OnceLock::new();
    RULES.get_or_init(|| {
        let table: [(&str, &str); 6] = [
            // Speed spellings, attached or not, become a detached "km/h".
            (r"(\d)\s*(?:km\s*/\s*h(?:r|our)?|kph|kmh|kmph)\b", "$1 km/h"),
            (r"\b(?:kph|kmh|kmph|km\s*/\s*hr?|km\s+per\s+hour)\b", "km/h"),
            (r"(\d)\s*(?:meters?|metres?|m)\b", "$1 m"),
            (r"(\d)\s*(?:tonnes?|tons?|t)\b", "$1 t"),
            (r"(\d)(km/h)", "$1 $2"),
            (r"\s+", " "),
        ];
        table.iter().map(|(p, rep)| UnitRule { re: Regex::new(p).expect("static regex"), rep }).collect()
    })
}

/// Lowercases, canonicalizes unit spellings and collapses whitespace.
pub fn normalize(text: &str) -> String {
    let mut s = text.to_lowercase();
    for rule in unit_rules() {
        s = rule.re.replace_all(&s, rule.rep).into_owned();
    }
    s.trim().to_string()
}

/// Marks every maximal decimal literal as an atomic span.
pub fn protect_numbers(text: &str) -> (String, Vec<ProtectedSpan>) {
    let spans = number_re()
        .find_iter(text)
        .map(|m| ProtectedSpan { start: m.start(), end: m.end(), literal: m.as_str().to_string() })
        .collect();
    (text.to_string(), spans)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize("Speed  Limit 40KPH"), "speed limit 40 km/h");
        assert_eq!(normalize(""), "");
        assert_eq!(normalize("  Height limit 2.2M "), "height limit 2.2 m");
        assert_eq!(normalize("limit 30 km / hr"), "limit 30 km/h");
        assert_eq!(normalize("weight 10tons"), "weight 10 t");
        assert_eq!(normalize("40km/h"), "40 km/h");
        assert_eq!(normalize("5 minutes"), "5 minutes");
        for t in ["speed limit 40 km/h", "a circular blue sign", "height limit 2.2 m"] {
            assert_eq!(normalize(t), t);
        }
    }

    #[test]
    fn protect_examples() {
        let (_, s) = protect_numbers("speed limit 40 km/h");
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].literal, "40");
        assert_eq!((s[0].start, s[0].end), (12, 14));
        assert!(protect_numbers("no digits here").1.is_empty());
        let (_, s) = protect_numbers("height limit 2.2 m");
        assert_eq!(s.iter().map(|p| p.literal.as_str()).collect::<Vec<_>>(), ["2.2"]);
    }
}

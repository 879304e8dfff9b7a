//! Traffic-regulation knowledge base.
//!
//! The shipped tables are a hand-made reconstruction: category-code
//! prefixes mapped to kind, shape and color defaults plus a description
//! clause. They are not a transcription of any official standard.

use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::rules::{CompiledRule, Kind, Rule, Shape, Unit};
use crate::error::Result;

const BUILTIN_RULES: &str = include_str!("../../data/rules.json");
const BUILTIN_CATEGORIES: &str = include_str!("../../data/categories.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum GlyphKind {
    ArrowUp,
    ArrowRight,
    Hbar,
    Vbar,
    Diag,
    Digits,
    None,
}

/// Pictogram drawn inside a synthetic sign.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Glyph {
    ArrowUp,
    ArrowRight,
    HBar,
    VBar,
    Diag,
    Digits(String),
    None,
}

#[derive(Debug, Clone, Deserialize)]
struct CodeEntry {
    code: String,
    kind: Kind,
    shape: Shape,
    color: String,
    action: String,
    glyph: GlyphKind,
    glyph_color: String,
}

#[derive(Debug, Clone, Deserialize)]
struct FamilyEntry {
    prefix: String,
    kind: Kind,
    shape: Shape,
    color: String,
    action: String,
    numeric_phrase: String,
    unit: Unit,
    glyph: GlyphKind,
    glyph_color: String,
}

#[derive(Debug, Clone, Deserialize)]
struct CategoryTable {
    version: String,
    codes: Vec<CodeEntry>,
    families: Vec<FamilyEntry>,
}

/// Resolved knowledge for one category code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryInfo {
    pub code: String,
    pub kind: Kind,
    pub shape: Shape,
    pub color: String,
    pub action: String,
    /// `(phrase, literal, unit)` such as `("speed limit", "40", km/h)`.
    pub numeric: Option<(String, String, Unit)>,
    pub glyph: Glyph,
    pub glyph_color: String,
}

impl CategoryInfo {
    /// `"a {shape} {color} sign[ {action}][ with {phrase} {n}[ {unit}]]"`.
    pub fn description(&self) -> String {
        let mut s = format!("a {} {} sign", self.shape, self.color);
        if !self.action.is_empty() {
            s.push(' ');
            s.push_str(&self.action);
        }
        if let Some((phrase, lit, unit)) = &self.numeric {
            s.push_str(&format!(" with {phrase} {lit}"));
            if *unit != Unit::None {
                s.push_str(&format!(" {unit}"));
            }
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    version: String,
    rules: Vec<CompiledRule>,
    codes: Vec<CodeEntry>,
    families: Vec<FamilyEntry>,
}

fn numeric_suffix() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\d+(?:\.\d+)?$").expect("static regex"))
}

fn glyph_of(kind: GlyphKind, literal: Option<&str>) -> Glyph {
    match kind {
        GlyphKind::ArrowUp => Glyph::ArrowUp,
        GlyphKind::ArrowRight => Glyph::ArrowRight,
        GlyphKind::Hbar => Glyph::HBar,
        GlyphKind::Vbar => Glyph::VBar,
        GlyphKind::Diag => Glyph::Diag,
        GlyphKind::Digits => Glyph::Digits(literal.unwrap_or("").to_string()),
        GlyphKind::None => Glyph::None,
    }
}

impl KnowledgeBase {
    /// The tables compiled into the binary.
    pub fn builtin() -> &'static KnowledgeBase {
        static KB: OnceLock<KnowledgeBase> = OnceLock::new();
        KB.get_or_init(|| {
            KnowledgeBase::from_json(BUILTIN_RULES, BUILTIN_CATEGORIES).expect("builtin knowledge base is valid")
        })
    }

    pub fn from_json(rules_json: &str, categories_json: &str) -> Result<Self> {
        let rules: Vec<Rule> = serde_json::from_str(rules_json)?;
        let mut compiled = rules.into_iter().map(CompiledRule::compile).collect::<Result<Vec<_>>>()?;
        // Stable: equal priorities keep file order.
        compiled.sort_by_key(|c| std::cmp::Reverse(c.rule.priority));
        let table: CategoryTable = serde_json::from_str(categories_json)?;
        let mut families = table.families;
        families.sort_by_key(|f| std::cmp::Reverse(f.prefix.len()));
        Ok(KnowledgeBase { version: table.version, rules: compiled, codes: table.codes, families })
    }

    pub fn load(rules: &Path, categories: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(rules)?, &std::fs::read_to_string(categories)?)
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub(crate) fn rules(&self) -> &[CompiledRule] {
        &self.rules
    }

    /// Exact code entries win; otherwise the longest family prefix whose
    /// remainder is a decimal literal.
    pub fn lookup(&self, code: &str) -> Option<CategoryInfo> {
        if let Some(e) = self.codes.iter().find(|e| e.code == code) {
            return Some(CategoryInfo {
                code: code.to_string(),
                kind: e.kind,
                shape: e.shape,
                color: e.color.clone(),
                action: e.action.clone(),
                numeric: None,
                glyph: glyph_of(e.glyph, None),
                glyph_color: e.glyph_color.clone(),
            });
        }
        self.families.iter().find_map(|f| {
            let rest = code.strip_prefix(f.prefix.as_str())?;
            if !numeric_suffix().is_match(rest) {
                return None;
            }
            Some(CategoryInfo {
                code: code.to_string(),
                kind: f.kind,
                shape: f.shape,
                color: f.color.clone(),
                action: f.action.clone(),
                numeric: Some((f.numeric_phrase.clone(), rest.to_string(), f.unit)),
                glyph: glyph_of(f.glyph, Some(rest)),
                glyph_color: f.glyph_color.clone(),
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_prefers_exact_then_longest_prefix() {
        let kb = KnowledgeBase::builtin();
        assert_eq!(
            kb.lookup("i1").unwrap().description(),
            "a circular blue sign with a white arrow indicating straight ahead"
        );
        assert_eq!(kb.lookup("pl40").unwrap().description(), "a circular red sign with speed limit 40 km/h");
        assert_eq!(kb.lookup("ph4.5").unwrap().description(), "a circular red sign with height limit 4.5 m");
        let p7 = kb.lookup("p7").unwrap();
        assert_eq!(p7.kind, Kind::Prohibition);
        assert_eq!(p7.numeric.as_ref().unwrap().2, Unit::None);
        assert!(kb.lookup("zz9").is_none());
        assert!(kb.lookup("pr40").is_none());
    }

    #[test]
    fn rules_sorted_by_priority() {
        let kb = KnowledgeBase::builtin();
        assert!(kb.rules().windows(2).all(|w| w[0].rule.priority >= w[1].rule.priority));
        assert!(!kb.version().is_empty());
    }

    #[test]
    fn bad_rule_is_rejected() {
        let bad = r#"[{"pattern": "(", "field": "kind", "value": "warning", "priority": 1}]"#;
        assert!(KnowledgeBase::from_json(bad, BUILTIN_CATEGORIES).is_err());
        let bad_kind = r#"[{"pattern": "x", "field": "kind", "value": "maybe", "priority": 1}]"#;
        assert!(KnowledgeBase::from_json(bad_kind, BUILTIN_CATEGORIES).is_err());
    }
}

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::kb::KnowledgeBase;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Warning,
    Prohibition,
    Mandatory,
    Information,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circular,
    Triangular,
    Rectangular,
    Octagonal,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Unit {
    #[serde(rename = "km/h")]
    Kmh,
    #[serde(rename = "m")]
    Meters,
    #[serde(rename = "t")]
    Tonnes,
    #[serde(rename = "none")]
    None,
}

macro_rules! word_enum {
    ($ty:ty { $($word:literal => $var:path),* $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($word => Ok($var),)*
                    other => Err(Error::Parse(format!(
                        "{other:?} is not a valid {}", stringify!($ty)
                    ))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let s = match self { $($var => $word,)* };
                f.write_str(s)
            }
        }
    };
}

word_enum!(Kind {
    "warning" => Kind::Warning,
    "prohibition" => Kind::Prohibition,
    "mandatory" => Kind::Mandatory,
    "information" => Kind::Information,
    "unknown" => Kind::Unknown,
});
word_enum!(Shape {
    "circular" => Shape::Circular,
    "triangular" => Shape::Triangular,
    "rectangular" => Shape::Rectangular,
    "octagonal" => Shape::Octagonal,
    "unknown" => Shape::Unknown,
});
word_enum!(Unit {
    "km/h" => Unit::Kmh,
    "m" => Unit::Meters,
    "t" => Unit::Tonnes,
    "none" => Unit::None,
});

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Numeric {
    pub value: f64,
    pub unit: Unit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticTuple {
    pub kind: Kind,
    pub shape: Shape,
    /// Dominant color word, `"unknown"` when nothing matched.
    pub color: String,
    /// Action phrase, empty when nothing matched.
    pub action: String,
    pub numeric: Option<Numeric>,
}

impl SemanticTuple {
    pub fn unknown() -> Self {
        SemanticTuple {
            kind: Kind::Unknown,
            shape: Shape::Unknown,
            color: "unknown".into(),
            action: String::new(),
            numeric: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    Kind,
    Shape,
    Color,
    Action,
}

/// One knowledge-base rule as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub pattern: String,
    pub field: Field,
    /// Replacement template; `$1` refers to the first capture group.
    pub value: String,
    pub priority: i32,
}

#[derive(Debug, Clone)]
pub(crate) struct CompiledRule {
    pub(crate) rule: Rule,
    pub(crate) re: Regex,
}

impl CompiledRule {
    pub(crate) fn compile(rule: Rule) -> Result<Self> {
        let re = Regex::new(&rule.pattern)?;
        if let Field::Kind = rule.field {
            rule.value.parse::<Kind>()?;
        }
        if let Field::Shape = rule.field {
            rule.value.parse::<Shape>()?;
        }
        Ok(CompiledRule { rule, re })
    }

    fn apply(&self, text: &str) -> Option<String> {
        let caps = self.re.captures(text)?;
        let mut out = String::new();
        caps.expand(&self.rule.value, &mut out);
        Some(out.trim().to_string())
    }
}

fn numeric_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(\d+(?:\.\d+)?)(?:\s*(km/h|m|t)\b)?").expect("static regex"))
}

/// Fills each field from the highest-priority matching rule.
///
/// Selection depends on priority, not on where in the text a rule fires, so
/// reordering independent descriptor phrases leaves the tuple unchanged.
pub fn parse_semantic_tuple(text: &str, kb: &KnowledgeBase) -> SemanticTuple {
    let mut tuple = SemanticTuple::unknown();
    for field in [Field::Kind, Field::Shape, Field::Color, Field::Action] {
        // Rules are pre-sorted by descending priority, file order on ties.
        let hit = kb.rules().iter().filter(|r| r.rule.field == field).find_map(|r| r.apply(text));
        let Some(v) = hit else { continue };
        match field {
            Field::Kind => tuple.kind = v.parse().unwrap_or(Kind::Unknown),
            Field::Shape => tuple.shape = v.parse().unwrap_or(Shape::Unknown),
            Field::Color => tuple.color = v,
            Field::Action => tuple.action = v,
        }
    }
    if let Some(c) = numeric_re().captures(text) {
        let value: f64 = c[1].parse().expect("regex guarantees a decimal");
        let unit = c.get(2).map(|u| u.as_str().parse().expect("regex guarantees a unit")).unwrap_or(Unit::None);
        tuple.numeric = Some(Numeric { value, unit });
    }
    tuple
}

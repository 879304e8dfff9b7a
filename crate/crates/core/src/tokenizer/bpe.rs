use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{normalize, protect_numbers, CLS, NUM, PAD, RESERVED, SEP, UNK};
use crate::error::{contract, Error, Result};

pub const DEFAULT_VOCAB_SIZE: usize = 2048;

/// Word-start marker carried by the first symbol of every word.
pub const MARKER: &str = "\u{2581}";

#[derive(Debug, Clone, PartialEq, Eq)]
struct Sym {
    text: String,
    atomic: bool,
    /// Byte range in the normalized text; empty for the marker.
    start: usize,
    end: usize,
}

/// Splits normalized text into words of initial symbols.
fn pretokenize(text: &str, protect: bool) -> Vec<Vec<Sym>> {
    let spans = if protect { protect_numbers(text).1 } else { Vec::new() };
    let mut words = Vec::new();
    let mut offset = 0;
    for word in text.split(' ') {
        let base = offset;
        offset += word.len() + 1;
        if word.is_empty() {
            continue;
        }
        let mut syms = vec![Sym { text: MARKER.into(), atomic: false, start: base, end: base }];
        let mut i = 0;
        while i < word.len() {
            let at = base + i;
            if let Some(s) = spans.iter().find(|s| s.start == at) {
                syms.push(Sym { text: s.literal.clone(), atomic: true, start: s.start, end: s.end });
                i += s.end - s.start;
                continue;
            }
            let c = word[i..].chars().next().expect("i is a char boundary");
            syms.push(Sym { text: c.to_string(), atomic: false, start: at, end: at + c.len_utf8() });
            i += c.len_utf8();
        }
        words.push(syms);
    }
    words
}

/// Merges every left-to-right occurrence of `(a, b)` between non-atomic symbols.
fn apply_merge(syms: &mut Vec<Sym>, a: &str, b: &str) {
    let mut out: Vec<Sym> = Vec::with_capacity(syms.len());
    let mut it = std::mem::take(syms).into_iter().peekable();
    while let Some(s) = it.next() {
        if !s.atomic && s.text == a {
            if let Some(n) = it.peek() {
                if !n.atomic && n.text == b {
                    let n = it.next().expect("peeked");
                    out.push(Sym {
                        text: format!("{a}{b}"),
                        atomic: false,
                        start: if s.start == s.end { n.start } else { s.start },
                        end: n.end,
                    });
                    continue;
                }
            }
        }
        out.push(s);
    }
    *syms = out;
}

/// BPE vocabulary; immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    number_protection: bool,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    merges: Vec<[String; 2]>,
    reserved: BTreeMap<String, u32>,
    number_protection: bool,
}

impl Vocab {
    fn assemble(tokens: Vec<String>, merges: Vec<(String, String)>, protect: bool) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Parse(format!("duplicate token {t:?}")));
            }
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if ids.get(*r) != Some(&(i as u32)) {
                return Err(Error::Parse(format!("reserved token {r} must have id {i}")));
            }
        }
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, (a, b)) in merges.iter().enumerate() {
            for s in [a.clone(), b.clone(), format!("{a}{b}")] {
                if !ids.contains_key(&s) {
                    return Err(Error::Parse(format!("merge references unknown symbol {s:?}")));
                }
            }
            ranks.entry((a.clone(), b.clone())).or_insert(rank);
        }
        Ok(Vocab { tokens, ids, merges, ranks, number_protection: protect })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn number_protection(&self) -> bool {
        self.number_protection
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            tokens: self.tokens.clone(),
            merges: self.merges.iter().map(|(a, b)| [a.clone(), b.clone()]).collect(),
            reserved: RESERVED.iter().enumerate().map(|(i, r)| (r.to_string(), i as u32)).collect(),
            number_protection: self.number_protection,
        };
        serde_json::to_string_pretty(&file).expect("vocab serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: VocabFile = serde_json::from_str(s)?;
        for (name, id) in &f.reserved {
            if f.tokens.get(*id as usize) != Some(name) {
                return Err(Error::Parse(format!("reserved {name} does not match id {id}")));
            }
        }
        let merges = f.merges.into_iter().map(|[a, b]| (a, b)).collect();
        Self::assemble(f.tokens, merges, f.number_protection)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Learns a number-protected BPE vocabulary.
pub fn build_vocab(corpus: &[String], target_size: usize) -> Result<Vocab> {
    build_vocab_with(corpus, target_size, true)
}

/// Learns BPE merges; with `protect` off, digits are ordinary characters.
pub fn build_vocab_with(corpus: &[String], target_size: usize, protect: bool) -> Result<Vocab> {
    if corpus.is_empty() {
        return contract("vocabulary corpus is empty");
    }
    if target_size <= RESERVED.len() {
        return contract(format!("target size {target_size} leaves no room beyond {} reserved tokens", RESERVED.len()));
    }
    // Word frequencies keyed by symbol text; BTreeMap keeps iteration deterministic.
    let mut freq: BTreeMap<Vec<(String, bool)>, usize> = BTreeMap::new();
    for line in corpus {
        for w in pretokenize(&normalize(line), protect) {
            let key = w.into_iter().map(|s| (s.text, s.atomic)).collect();
            *freq.entry(key).or_default() += 1;
        }
    }
    let base: BTreeSet<String> = freq.keys().flat_map(|w| w.iter().map(|(t, _)| t.clone())).collect();
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(base.into_iter().filter(|t| !RESERVED.contains(&t.as_str())));
    let mut known: BTreeSet<String> = tokens.iter().cloned().collect();
    let mut words: Vec<(Vec<Sym>, usize)> = freq
        .into_iter()
        .map(|(w, n)| {
            let syms = w.into_iter().map(|(text, atomic)| Sym { text, atomic, start: 0, end: 0 }).collect();
            (syms, n)
        })
        .collect();
    let mut merges = Vec::new();
    while tokens.len() < target_size {
        let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
        for (syms, n) in &words {
            for p in syms.windows(2) {
                if !p[0].atomic && !p[1].atomic {
                    *counts.entry((p[0].text.as_str(), p[1].text.as_str())).or_default() += n;
                }
            }
        }
        let Some((a, b)) = counts
            .into_iter()
            .max_by_key(|&(pair, c)| (c, Reverse(pair)))
            .map(|((a, b), _)| (a.to_string(), b.to_string()))
        else {
            break;
        };
        for (syms, _) in &mut words {
            apply_merge(syms, &a, &b);
        }
        let joined = format!("{a}{b}");
        if known.insert(joined.clone()) {
            tokens.push(joined);
        }
        merges.push((a, b));
    }
    Vocab::assemble(tokens, merges, protect)
}

/// Position of a protected literal in the token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
    pub literal: String,
    /// Index into `ids` of the single token carrying this literal.
    pub token: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub protected_spans: Vec<TokenSpan>,
    /// Byte range in the normalized text covered by each token.
    pub offsets: Vec<(usize, usize)>,
    /// The normalized text that was tokenized.
    pub text: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn encode_word(syms: &mut Vec<Sym>, vocab: &Vocab) {
    loop {
        let best = syms
            .windows(2)
            .filter(|p| !p[0].atomic && !p[1].atomic)
            .filter_map(|p| {
                vocab
                    .ranks
                    .get(&(p[0].text.clone(), p[1].text.clone()))
                    .map(|&r| (r, p[0].text.clone(), p[1].text.clone()))
            })
            .min();
        let Some((_, a, b)) = best else { break };
        apply_merge(syms, &a, &b);
    }
}

/// Normalizes `text` and encodes it as `[CLS] tokens [SEP]`.
pub fn tokenize(text: &str, vocab: &Vocab) -> TokenSequence {
    let text = normalize(text);
    let mut ids = vec![CLS];
    let mut offsets = vec![(0, 0)];
    let mut protected_spans = Vec::new();
    for mut word in pretokenize(&text, vocab.number_protection) {
        encode_word(&mut word, vocab);
        for s in word {
            let id = match vocab.id(&s.text) {
                Some(id) => id,
                None if s.atomic => NUM,
                None => UNK,
            };
            if s.atomic {
                protected_spans.push(TokenSpan {
                    start: s.start,
                    end: s.end,
                    literal: s.text.clone(),
                    token: ids.len(),
                });
            }
            ids.push(id);
            offsets.push((s.start, s.end));
        }
    }
    ids.push(SEP);
    offsets.push((text.len(), text.len()));
    TokenSequence { ids, protected_spans, offsets, text }
}

/// Inverse of [`tokenize`], resolving `[NUM]` from the protected spans.
pub fn detokenize(seq: &TokenSequence, vocab: &Vocab) -> String {
    let mut out = String::new();
    for (i, &id) in seq.ids.iter().enumerate() {
        match id {
            CLS | SEP | PAD => {}
            NUM => {
                if let Some(s) = seq.protected_spans.iter().find(|s| s.token == i) {
                    out.push_str(&s.literal);
                }
            }
            _ => {
                let t = vocab.token(id).unwrap_or("[UNK]");
                match t.strip_prefix(MARKER) {
                    Some(rest) => {
                        out.push(' ');
                        out.push_str(rest);
                    }
                    None => out.push_str(t),
                }
            }
        }
    }
    out.strip_prefix(' ').map(str::to_string).unwrap_or(out)
}

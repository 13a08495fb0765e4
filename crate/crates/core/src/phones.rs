//! Unified phone-set normalization.
//!
//! Locale transcriptions arrive as whitespace-separated XSAMPA-style tokens
//! with a `"` prefix marking the primary-stressed vowel. Normalization maps
//! locale-specific symbols onto one shared inventory and splits complex
//! phones (diphthongs, affricates, syllabic consonants, nasalized vowels)
//! into primitive sequences so that every language draws from the same
//! alphabet.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use thiserror::Error;

/// The shipped rule table covering the eight training languages.
pub const DEFAULT_RULES_TSV: &str = include_str!("../assets/default_rules.tsv");

const PUNCTUATION: &[&str] = &[".", ",", "!", "?", ";"];
const STRESS_PREFIX: char = '"';
const VOWEL_LETTERS: &str = "aeiouyAEIOUY236798@&{QV";

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum PhoneKind {
    Vowel,
    Consonant,
    ClosureNoRelease,
    StressMark,
    Punctuation,
}

/// Classify a symbol by its XSAMPA spelling. Vowels are recognized by their
/// base letter so diacritics (`a:`, `a~`) inherit the vowel kind.
pub fn classify(symbol: &str) -> PhoneKind {
    if PUNCTUATION.contains(&symbol) {
        PhoneKind::Punctuation
    } else if symbol == "\"" {
        PhoneKind::StressMark
    } else if symbol.len() > 1 && symbol.ends_with('}') {
        PhoneKind::ClosureNoRelease
    } else if symbol.chars().next().is_some_and(|c| VOWEL_LETTERS.contains(c)) {
        PhoneKind::Vowel
    } else {
        PhoneKind::Consonant
    }
}

pub fn is_punctuation(symbol: &str) -> bool {
    classify(symbol) == PhoneKind::Punctuation
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Phone {
    pub symbol: String,
    pub kind: PhoneKind,
}

impl Phone {
    pub fn new(symbol: &str) -> Self {
        Phone { symbol: symbol.to_string(), kind: classify(symbol) }
    }
}

#[derive(Debug, Error)]
pub enum PhoneError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("recursive rule: `{symbol}` is both an inventory symbol and a split key")]
    RecursiveRule { symbol: String },
    #[error("unknown symbol `{symbol}` (line {line}): not in inventory or split keys")]
    UnknownSymbol { symbol: String, line: usize },
    #[error("token `{token}` at position {position} has no mapping for locale `{locale}`")]
    UnmappableToken { token: String, position: usize, locale: String },
    #[error("stress mark on token `{token}` at position {position} lands on no vowel")]
    StressWithoutVowel { token: String, position: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Immutable normalization rules: global splits plus per-locale renames.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RuleTable {
    /// Complex phone -> ordered primitive replacement (length >= 2).
    pub complex_splits: BTreeMap<String, Vec<String>>,
    /// Locale -> native symbol -> unified (or complex) symbol.
    pub locale_maps: BTreeMap<String, BTreeMap<String, String>>,
    /// Legal unified symbols, punctuation excluded.
    pub inventory: BTreeSet<String>,
}

impl RuleTable {
    pub fn default_table() -> Self {
        Self::parse(DEFAULT_RULES_TSV).expect("shipped rule table must parse")
    }

    pub fn load(path: &Path) -> Result<Self, PhoneError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Parse the three-column TSV format: scope, source symbol, replacement.
    pub fn parse(text: &str) -> Result<Self, PhoneError> {
        let mut splits: BTreeMap<String, (Vec<String>, usize)> = BTreeMap::new();
        let mut locales: BTreeMap<String, BTreeMap<String, (String, usize)>> = BTreeMap::new();
        let mut inventory: BTreeSet<String> = BTreeSet::new();

        for (lineno, raw_line) in text.lines().enumerate() {
            let line = raw_line.trim();
            let lineno = lineno + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(PhoneError::Parse {
                    line: lineno,
                    msg: format!("expected 3 tab-separated columns, found {}", cols.len()),
                });
            }
            let scope = cols[0].trim();
            let source = cols[1].trim();
            let replacement: Vec<String> =
                cols[2].split_whitespace().map(str::to_string).collect();
            if scope.is_empty() || source.is_empty() || replacement.is_empty() {
                return Err(PhoneError::Parse { line: lineno, msg: "empty field".into() });
            }
            if scope == "global" {
                if replacement.len() == 1 {
                    if replacement[0] != source {
                        return Err(PhoneError::Parse {
                            line: lineno,
                            msg: format!(
                                "global single-symbol row must be an identity declaration \
                                 (`{source}` -> `{}`); use a locale row for renames",
                                replacement[0]
                            ),
                        });
                    }
                    inventory.insert(source.to_string());
                } else if splits.insert(source.to_string(), (replacement, lineno)).is_some() {
                    return Err(PhoneError::Parse {
                        line: lineno,
                        msg: format!("duplicate split rule for `{source}`"),
                    });
                }
            } else {
                if replacement.len() != 1 {
                    return Err(PhoneError::Parse {
                        line: lineno,
                        msg: format!(
                            "locale row for `{source}` must map to exactly one symbol"
                        ),
                    });
                }
                let dup = locales
                    .entry(scope.to_string())
                    .or_default()
                    .insert(source.to_string(), (replacement[0].clone(), lineno));
                if dup.is_some() {
                    return Err(PhoneError::Parse {
                        line: lineno,
                        msg: format!("duplicate locale rule `{scope}`/`{source}`"),
                    });
                }
            }
        }

        // Split replacements implicitly join the inventory.
        for (rhs, _) in splits.values() {
            for sym in rhs {
                inventory.insert(sym.clone());
            }
        }
        // Non-recursion: a split key must not itself be a legal output symbol,
        // whether declared or introduced by another rule's replacement.
        for key in splits.keys() {
            if inventory.contains(key) {
                return Err(PhoneError::RecursiveRule { symbol: key.clone() });
            }
        }
        // Locale targets must resolve after at most one split.
        for map in locales.values() {
            for (target, line) in map.values() {
                if !inventory.contains(target)
                    && !splits.contains_key(target)
                    && !is_punctuation(target)
                {
                    return Err(PhoneError::UnknownSymbol { symbol: target.clone(), line: *line });
                }
            }
        }

        Ok(RuleTable {
            complex_splits: splits.into_iter().map(|(k, (v, _))| (k, v)).collect(),
            locale_maps: locales
                .into_iter()
                .map(|(loc, m)| (loc, m.into_iter().map(|(k, (v, _))| (k, v)).collect()))
                .collect(),
            inventory,
        })
    }

    pub fn is_known(&self, symbol: &str) -> bool {
        self.inventory.contains(symbol)
            || self.complex_splits.contains_key(symbol)
            || is_punctuation(symbol)
    }
}

/// Expand one symbol: split keys map to their replacement, primitive symbols
/// to themselves.
pub fn split_complex_phone(symbol: &str, rules: &RuleTable) -> Result<Vec<String>, PhoneError> {
    if let Some(rhs) = rules.complex_splits.get(symbol) {
        Ok(rhs.clone())
    } else if rules.inventory.contains(symbol) || is_punctuation(symbol) {
        Ok(vec![symbol.to_string()])
    } else {
        Err(PhoneError::UnknownSymbol { symbol: symbol.to_string(), line: 0 })
    }
}

/// Stress-marked sequence over the unified inventory.
#[derive(Clone, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
pub struct UnifiedPhoneSequence {
    pub tokens: Vec<Phone>,
    pub stress_indices: BTreeSet<usize>,
}

impl UnifiedPhoneSequence {
    /// Build from already-expanded tokens without inventory checks; pair with
    /// [`validate_sequence`] when the source is untrusted.
    pub fn from_tokens(tokens: Vec<Phone>, stress_indices: BTreeSet<usize>) -> Self {
        UnifiedPhoneSequence { tokens, stress_indices }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl fmt::Display for UnifiedPhoneSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, phone) in self.tokens.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            if self.stress_indices.contains(&i) {
                f.write_str("\"")?;
            }
            f.write_str(&phone.symbol)?;
        }
        Ok(())
    }
}

/// Normalize a raw locale transcription into the unified alphabet.
///
/// Resolution per token: locale map first, then pass-through for symbols that
/// are already unified (or are split keys / punctuation), then the global
/// split. Stress carried by a complex phone lands on the first vowel of its
/// expansion.
pub fn normalize_utterance(
    raw: &str,
    locale: &str,
    rules: &RuleTable,
) -> Result<UnifiedPhoneSequence, PhoneError> {
    let locale_map = rules.locale_maps.get(locale);
    let mut tokens = Vec::new();
    let mut stress = BTreeSet::new();

    for (position, tok) in raw.split_whitespace().enumerate() {
        let (stressed, bare) = match tok.strip_prefix(STRESS_PREFIX) {
            Some(rest) if !rest.is_empty() => (true, rest),
            _ => (false, tok),
        };
        let mapped = if let Some(m) = locale_map.and_then(|m| m.get(bare)) {
            m.as_str()
        } else if rules.is_known(bare) {
            bare
        } else {
            return Err(PhoneError::UnmappableToken {
                token: tok.to_string(),
                position,
                locale: locale.to_string(),
            });
        };
        let expansion = split_complex_phone(mapped, rules)?;
        if stressed {
            let vowel_at = expansion
                .iter()
                .position(|s| classify(s) == PhoneKind::Vowel)
                .ok_or_else(|| PhoneError::StressWithoutVowel {
                    token: tok.to_string(),
                    position,
                })?;
            stress.insert(tokens.len() + vowel_at);
        }
        tokens.extend(expansion.iter().map(|s| Phone::new(s)));
    }

    Ok(UnifiedPhoneSequence::from_tokens(tokens, stress))
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Violation {
    UnsplitComplex { index: usize, symbol: String },
    OutOfInventory { index: usize, symbol: String },
    StressNotOnVowel { index: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnsplitComplex { index, symbol } => {
                write!(f, "token {index}: unsplit complex phone `{symbol}`")
            }
            Violation::OutOfInventory { index, symbol } => {
                write!(f, "token {index}: `{symbol}` not in inventory")
            }
            Violation::StressNotOnVowel { index } => {
                write!(f, "stress index {index} does not point at a vowel")
            }
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Report every out-of-inventory token, unsplit complex phone and misplaced
/// stress mark; an empty report means the sequence is valid.
pub fn validate_sequence(seq: &UnifiedPhoneSequence, rules: &RuleTable) -> ValidationReport {
    let mut violations = Vec::new();
    for (index, phone) in seq.tokens.iter().enumerate() {
        if rules.complex_splits.contains_key(&phone.symbol) {
            violations.push(Violation::UnsplitComplex { index, symbol: phone.symbol.clone() });
        } else if !rules.inventory.contains(&phone.symbol) && !is_punctuation(&phone.symbol) {
            violations.push(Violation::OutOfInventory { index, symbol: phone.symbol.clone() });
        }
    }
    for &index in &seq.stress_indices {
        let on_vowel = seq
            .tokens
            .get(index)
            .is_some_and(|p| p.kind == PhoneKind::Vowel);
        if !on_vowel {
            violations.push(Violation::StressNotOnVowel { index });
        }
    }
    ValidationReport { violations }
}

/// Parse a space-separated, stress-prefixed unified phone string (the manifest
/// encoding). Tokens must already be primitive inventory symbols.
pub fn parse_unified(text: &str, rules: &RuleTable) -> Result<UnifiedPhoneSequence, PhoneError> {
    let seq = normalize_lenient(text);
    let report = validate_sequence(&seq, rules);
    if let Some(v) = report.violations.first() {
        return Err(PhoneError::Parse { line: 0, msg: v.to_string() });
    }
    Ok(seq)
}

/// Tokenize without inventory checks (used to build sequences for validation).
pub fn normalize_lenient(text: &str) -> UnifiedPhoneSequence {
    let mut tokens = Vec::new();
    let mut stress = BTreeSet::new();
    for tok in text.split_whitespace() {
        let (stressed, bare) = match tok.strip_prefix(STRESS_PREFIX) {
            Some(rest) if !rest.is_empty() => (true, rest),
            _ => (false, tok),
        };
        if stressed {
            stress.insert(tokens.len());
        }
        tokens.push(Phone::new(bare));
    }
    UnifiedPhoneSequence::from_tokens(tokens, stress)
}

/// Model input alphabet: every inventory symbol, a stressed variant of every
/// vowel, and the punctuation marks. Ids are stable (sorted symbols).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PhoneVocab {
    pub symbols: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl PhoneVocab {
    pub fn from_rules(rules: &RuleTable) -> Self {
        let mut set: BTreeSet<String> = rules.inventory.clone();
        for p in PUNCTUATION {
            set.insert((*p).to_string());
        }
        for sym in rules.inventory.iter() {
            if classify(sym) == PhoneKind::Vowel {
                set.insert(format!("{STRESS_PREFIX}{sym}"));
            }
        }
        Self::from_symbols(set.into_iter().collect())
    }

    pub fn from_symbols(symbols: Vec<String>) -> Self {
        let index = symbols.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        PhoneVocab { symbols, index }
    }

    /// Rebuild the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.symbols.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    /// Encode a unified sequence; stressed vowels use their stressed variant id.
    pub fn encode(&self, seq: &UnifiedPhoneSequence) -> Result<Vec<usize>, PhoneError> {
        seq.tokens
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let key = if seq.stress_indices.contains(&i) {
                    format!("{STRESS_PREFIX}{}", p.symbol)
                } else {
                    p.symbol.clone()
                };
                self.id(&key).ok_or_else(|| PhoneError::UnmappableToken {
                    token: key,
                    position: i,
                    locale: "<vocab>".into(),
                })
            })
            .collect()
    }
}

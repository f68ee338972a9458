//! Area lexicon: the 57 target areas, their aliases, and whole-word phrase
//! matching used for label extraction, masking and keyword filtering.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Index of a target area in [`TARGET_AREAS`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AreaId(pub u16);

impl AreaId {
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        TARGET_AREAS[self.index()].0
    }

    pub fn from_name(name: &str) -> Option<Self> {
        let folded = name.to_lowercase();
        TARGET_AREAS
            .iter()
            .position(|(n, _)| n.to_lowercase() == folded)
            .map(|i| AreaId(i as u16))
    }

    pub fn all() -> impl Iterator<Item = AreaId> {
        (0..NUM_TARGET_AREAS as u16).map(AreaId)
    }
}

impl fmt::Display for AreaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const NUM_TARGET_AREAS: usize = 57;
pub const UNKNOWN_WORD: &str = "unknown";
pub const MASK_PLACEHOLDER: &str = "[AREA]";

/// Canonical name and extra aliases of every target area.
pub const TARGET_AREAS: [(&str, &[&str]); NUM_TARGET_AREAS] = [
    ("hOc1", &["V1", "primary visual cortex", "striate cortex"]),
    ("hOc2", &["V2", "secondary visual cortex"]),
    ("hOc3d", &[]),
    ("hOc3v", &[]),
    ("hOc4d", &[]),
    ("hOc4v", &[]),
    ("hOc4la", &[]),
    ("hOc4lp", &[]),
    ("hOc5", &["V5"]),
    ("hOc6", &[]),
    ("FG1", &[]),
    ("FG2", &[]),
    ("FG3", &[]),
    ("FG4", &[]),
    ("Fp1", &[]),
    ("Fp2", &[]),
    ("Fo1", &[]),
    ("Fo2", &[]),
    ("Fo3", &[]),
    ("Fo4", &[]),
    ("Fo5", &[]),
    ("Fo6", &[]),
    ("Fo7", &[]),
    ("OP1", &[]),
    ("OP2", &[]),
    ("OP3", &[]),
    ("OP4", &[]),
    ("PGa", &[]),
    ("PGp", &[]),
    ("PFop", &[]),
    ("PFt", &[]),
    ("PF", &[]),
    ("PFm", &[]),
    ("PFcm", &[]),
    ("hIP1", &[]),
    ("hIP2", &[]),
    ("hIP3", &[]),
    ("Ig1", &[]),
    ("Ig2", &[]),
    ("Id1", &[]),
    ("Id2", &[]),
    ("Id3", &[]),
    ("ifs1", &[]),
    ("ifs2", &[]),
    ("ifs3", &[]),
    ("ifs4", &[]),
    ("STS1", &[]),
    ("STS2", &[]),
    ("TI", &[]),
    ("TeI", &[]),
    ("s24", &[]),
    ("p24ab", &[]),
    ("p32", &[]),
    ("s32", &[]),
    ("p24c", &[]),
    ("SFS1", &[]),
    ("SFS2", &[]),
];

/// A weak label: one of the target areas or unknown.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AreaLabel {
    Area(AreaId),
    Unknown,
}

impl AreaLabel {
    pub fn name(self) -> &'static str {
        match self {
            AreaLabel::Area(a) => a.name(),
            AreaLabel::Unknown => UNKNOWN_WORD,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        if s.eq_ignore_ascii_case(UNKNOWN_WORD) {
            Some(AreaLabel::Unknown)
        } else {
            AreaId::from_name(s).map(AreaLabel::Area)
        }
    }

    pub fn area(self) -> Option<AreaId> {
        match self {
            AreaLabel::Area(a) => Some(a),
            AreaLabel::Unknown => None,
        }
    }

    /// Dense class index: areas first, unknown last.
    pub fn class_index(self) -> usize {
        match self {
            AreaLabel::Area(a) => a.index(),
            AreaLabel::Unknown => NUM_TARGET_AREAS,
        }
    }
}

impl fmt::Display for AreaLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for AreaLabel {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for AreaLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        AreaLabel::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown area name `{s}`")))
    }
}

impl Serialize for AreaId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for AreaId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        AreaId::from_name(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown area name `{s}`")))
    }
}

/// Outcome of reading the label off a caption.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extracted {
    Label(AreaLabel),
    /// No lexicon entry, or more than one distinct label.
    None,
}

impl Extracted {
    pub fn label(self) -> Option<AreaLabel> {
        match self {
            Extracted::Label(l) => Some(l),
            Extracted::None => None,
        }
    }
}

/// A word with its byte span in the source text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Word {
    pub folded: String,
    pub start: usize,
    pub end: usize,
}

/// Maximal runs of alphanumeric characters, Unicode lower-cased.
pub fn words(text: &str) -> Vec<Word> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            start.get_or_insert(i);
        } else if let Some(s) = start.take() {
            out.push(Word { folded: text[s..i].to_lowercase(), start: s, end: i });
        }
    }
    if let Some(s) = start {
        out.push(Word { folded: text[s..].to_lowercase(), start: s, end: text.len() });
    }
    out
}

/// Byte length of the first sentence: up to and including the first `.`, `!`
/// or `?` followed by whitespace or end of text, or the first newline.
pub fn first_sentence(text: &str) -> &str {
    let bytes = text.as_bytes();
    for (i, c) in text.char_indices() {
        if c == '\n' {
            return &text[..i];
        }
        if matches!(c, '.' | '!' | '?') {
            let next = bytes.get(i + 1);
            if next.is_none_or(|b| b.is_ascii_whitespace()) {
                return &text[..=i];
            }
        }
    }
    text
}

/// A phrase match found by [`PhraseMatcher::find`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhraseMatch<V> {
    pub value: V,
    /// Byte span in the source text.
    pub start: usize,
    pub end: usize,
}

/// Whole-word, case-folded phrase matcher. At each position the longest phrase wins.
#[derive(Clone, Debug)]
pub struct PhraseMatcher<V> {
    phrases: HashMap<Vec<String>, V>,
    max_words: usize,
}

impl<V: Clone> PhraseMatcher<V> {
    pub fn new() -> Self {
        Self { phrases: HashMap::new(), max_words: 0 }
    }

    /// Later insertions of the same phrase overwrite earlier ones.
    pub fn insert(&mut self, phrase: &str, value: V) {
        let key: Vec<String> = words(phrase).into_iter().map(|w| w.folded).collect();
        if key.is_empty() {
            return;
        }
        self.max_words = self.max_words.max(key.len());
        self.phrases.insert(key, value);
    }

    pub fn find(&self, text: &str) -> Vec<PhraseMatch<V>> {
        let ws = words(text);
        let mut out = Vec::new();
        let mut i = 0;
        while i < ws.len() {
            let longest = (1..=self.max_words.min(ws.len() - i)).rev().find_map(|len| {
                let key: Vec<String> = ws[i..i + len].iter().map(|w| w.folded.clone()).collect();
                self.phrases.get(&key).map(|v| (len, v.clone()))
            });
            match longest {
                Some((len, value)) => {
                    out.push(PhraseMatch { value, start: ws[i].start, end: ws[i + len - 1].end });
                    i += len;
                }
                None => i += 1,
            }
        }
        out
    }

    pub fn contains_any(&self, text: &str) -> bool {
        !self.find(text).is_empty()
    }
}

impl<V: Clone> Default for PhraseMatcher<V> {
    fn default() -> Self {
        Self::new()
    }
}

/// The label lexicon: every alias of every target area, plus `unknown`.
#[derive(Clone, Debug)]
pub struct LabelLexicon {
    matcher: PhraseMatcher<AreaLabel>,
}

impl Default for LabelLexicon {
    fn default() -> Self {
        Self::builtin()
    }
}

impl LabelLexicon {
    pub fn builtin() -> Self {
        let mut matcher = PhraseMatcher::new();
        for (i, (canonical, aliases)) in TARGET_AREAS.iter().enumerate() {
            let label = AreaLabel::Area(AreaId(i as u16));
            matcher.insert(canonical, label);
            for alias in aliases.iter() {
                matcher.insert(alias, label);
            }
        }
        matcher.insert(UNKNOWN_WORD, AreaLabel::Unknown);
        Self { matcher }
    }

    /// All phrases (canonical names and aliases) that name `area`.
    pub fn aliases(area: AreaId) -> Vec<&'static str> {
        let (canonical, aliases) = TARGET_AREAS[area.index()];
        std::iter::once(canonical).chain(aliases.iter().copied()).collect()
    }

    pub fn mentions(&self, text: &str) -> Vec<PhraseMatch<AreaLabel>> {
        self.matcher.find(text)
    }

    /// Distinct target areas mentioned anywhere in `text`.
    pub fn areas_mentioned(&self, text: &str) -> BTreeSet<AreaId> {
        self.mentions(text).into_iter().filter_map(|m| m.value.area()).collect()
    }

    /// Reads the label from the first sentence.
    pub fn extract_label(&self, caption: &str) -> Extracted {
        let labels: BTreeSet<AreaLabel> =
            self.mentions(first_sentence(caption)).into_iter().map(|m| m.value).collect();
        if labels.len() == 1 {
            Extracted::Label(*labels.iter().next().expect("one label"))
        } else {
            Extracted::None
        }
    }

    /// Replaces every whole-word mention of any area (and `unknown`) by `[AREA]`.
    pub fn mask_areas(&self, text: &str) -> String {
        let mut out = String::with_capacity(text.len());
        let mut last = 0;
        for m in self.mentions(text) {
            out.push_str(&text[last..m.start]);
            out.push_str(MASK_PLACEHOLDER);
            last = m.end;
        }
        out.push_str(&text[last..]);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_names_are_unique_single_words() {
        let mut seen = BTreeSet::new();
        for (name, _) in TARGET_AREAS {
            assert_eq!(words(name).len(), 1, "{name}");
            assert!(seen.insert(name.to_lowercase()), "duplicate {name}");
        }
        assert!(!seen.contains("area"), "placeholder word must not be an alias");
    }

    #[test]
    fn whole_word_only() {
        let lex = LabelLexicon::builtin();
        assert_eq!(lex.extract_label("Area hOc1x shows nothing."), Extracted::None);
        assert_eq!(
            lex.extract_label("Area hOc1 shows layers."),
            Extracted::Label(AreaLabel::Area(AreaId(0)))
        );
        // PF must not fire inside PFm
        assert_eq!(
            lex.extract_label("This is PFm."),
            Extracted::Label(AreaLabel::Area(AreaId::from_name("PFm").unwrap()))
        );
    }

    #[test]
    fn longest_alias_wins() {
        let lex = LabelLexicon::builtin();
        let m = lex.mentions("The primary visual cortex is thin.");
        assert_eq!(m.len(), 1);
        assert_eq!(&"The primary visual cortex is thin."[m[0].start..m[0].end], "primary visual cortex");
    }

    #[test]
    fn only_first_sentence_counts() {
        let lex = LabelLexicon::builtin();
        assert_eq!(
            lex.extract_label("This patch shows area FG1. Unlike FG2, it is dense."),
            Extracted::Label(AreaLabel::Area(AreaId::from_name("FG1").unwrap()))
        );
        assert_eq!(lex.extract_label("Both FG1 and FG2 appear."), Extracted::None);
    }

    #[test]
    fn first_sentence_ignores_decimal_points() {
        assert_eq!(first_sentence("Thickness 2.5 mm here. Next"), "Thickness 2.5 mm here.");
        assert_eq!(first_sentence("no terminator"), "no terminator");
    }

    #[test]
    fn mask_keeps_surroundings() {
        let lex = LabelLexicon::builtin();
        assert_eq!(lex.mask_areas("In hOc1, layer IV (V1) splits."), "In [AREA], layer IV ([AREA]) splits.");
        assert_eq!(lex.mask_areas("an unknown area"), "an [AREA] area");
    }
}

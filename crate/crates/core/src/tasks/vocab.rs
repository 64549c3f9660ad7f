use serde::{Deserialize, Serialize};

/// Symbol table mapping token ids to printable symbols.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vocab {
    symbols: Vec<String>,
}

impl Vocab {
    pub fn new(symbols: Vec<String>) -> Self {
        Self { symbols }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, symbol: &str) -> Option<u32> {
        self.symbols.iter().position(|s| s == symbol).map(|i| i as u32)
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn render(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .map(|&t| self.symbol(t).map(str::to_owned).unwrap_or_else(|| format!("<{t}>")))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// The closed vocabulary shared by all synthetic task kinds.
///
/// Layout (ids in order): markers, retrieval entities `x00..` and `y00..`,
/// two-digit years `00..99`, event words, names, singular and plural nouns,
/// prepositions, and the verbs `is`/`are`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ToyVocab;

impl ToyVocab {
    pub const MARKERS: [&'static str; 7] = ["<ab>", "<ba>", "=", "<gt>", "to", "<rl>", "<pa>"];
    pub const N_ENTITIES: usize = 32;
    pub const N_YEARS: usize = 100;
    pub const N_EVENTS: usize = 8;
    pub const N_NAMES: usize = 24;
    pub const N_NOUNS: usize = 8;
    pub const PREPOSITIONS: [&'static str; 4] = ["of", "near", "by", "for"];

    const X0: u32 = Self::MARKERS.len() as u32;
    const Y0: u32 = Self::X0 + Self::N_ENTITIES as u32;
    const YEAR0: u32 = Self::Y0 + Self::N_ENTITIES as u32;
    const EVENT0: u32 = Self::YEAR0 + Self::N_YEARS as u32;
    const NAME0: u32 = Self::EVENT0 + Self::N_EVENTS as u32;
    const NOUN_SG0: u32 = Self::NAME0 + Self::N_NAMES as u32;
    const NOUN_PL0: u32 = Self::NOUN_SG0 + Self::N_NOUNS as u32;
    const PREP0: u32 = Self::NOUN_PL0 + Self::N_NOUNS as u32;
    const VERB0: u32 = Self::PREP0 + Self::PREPOSITIONS.len() as u32;

    pub const SIZE: usize = Self::VERB0 as usize + 2;

    pub fn vocab() -> Vocab {
        let mut s: Vec<String> = Self::MARKERS.iter().map(|m| m.to_string()).collect();
        s.extend((0..Self::N_ENTITIES).map(|i| format!("x{i:02}")));
        s.extend((0..Self::N_ENTITIES).map(|i| format!("y{i:02}")));
        s.extend((0..Self::N_YEARS).map(|i| format!("{i:02}")));
        s.extend((0..Self::N_EVENTS).map(|i| format!("event{i}")));
        s.extend((0..Self::N_NAMES).map(|i| format!("name{i:02}")));
        s.extend((0..Self::N_NOUNS).map(|i| format!("noun{i}")));
        s.extend((0..Self::N_NOUNS).map(|i| format!("noun{i}s")));
        s.extend(Self::PREPOSITIONS.iter().map(|p| p.to_string()));
        s.extend(["is".to_string(), "are".to_string()]);
        debug_assert_eq!(s.len(), Self::SIZE);
        Vocab::new(s)
    }

    pub fn ab() -> u32 {
        0
    }
    pub fn ba() -> u32 {
        1
    }
    pub fn equals() -> u32 {
        2
    }
    pub fn gt() -> u32 {
        3
    }
    pub fn to() -> u32 {
        4
    }
    pub fn rl() -> u32 {
        5
    }
    pub fn pa() -> u32 {
        6
    }
    pub fn x(i: usize) -> u32 {
        Self::X0 + i as u32
    }
    pub fn y(i: usize) -> u32 {
        Self::Y0 + i as u32
    }
    pub fn year(yy: usize) -> u32 {
        Self::YEAR0 + yy as u32
    }
    /// Inverse of [`ToyVocab::year`].
    pub fn year_value(token: u32) -> Option<usize> {
        (Self::YEAR0..Self::YEAR0 + Self::N_YEARS as u32)
            .contains(&token)
            .then(|| (token - Self::YEAR0) as usize)
    }
    pub fn event(i: usize) -> u32 {
        Self::EVENT0 + i as u32
    }
    pub fn name(i: usize) -> u32 {
        Self::NAME0 + i as u32
    }
    pub fn noun(i: usize, plural: bool) -> u32 {
        if plural {
            Self::NOUN_PL0 + i as u32
        } else {
            Self::NOUN_SG0 + i as u32
        }
    }
    /// `Some(true)` for plural nouns, `Some(false)` for singular ones.
    pub fn noun_number(token: u32) -> Option<bool> {
        if (Self::NOUN_SG0..Self::NOUN_PL0).contains(&token) {
            Some(false)
        } else if (Self::NOUN_PL0..Self::PREP0).contains(&token) {
            Some(true)
        } else {
            None
        }
    }
    pub fn preposition(i: usize) -> u32 {
        Self::PREP0 + i as u32
    }
    pub fn verb(plural: bool) -> u32 {
        Self::VERB0 + plural as u32
    }
}

//! Word-level vocabulary and tokenizer.
//!
//! Vocabulary file: a `# scgi-vocab v1` header line, then one token per line;
//! the zero-based line number after the header is the token id. The first
//! five tokens are the reserved specials.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::caption::Attribute;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const SOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const PSEUDO: u32 = 4;
pub const SPECIALS: [&str; 5] = ["[PAD]", "[SOS]", "[EOS]", "[UNK]", "[PSEUDO]"];

pub const VOCAB_HEADER: &str = "# scgi-vocab v1";

/// Words of the caption template and the prompt sentences.
const TEMPLATE_WORDS: &str = "a is wearing and the carrying has hair wears photo of person";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

/// Token ids framed by `[SOS]`/`[EOS]` and padded to `max_len`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenIds {
    pub ids: Vec<u32>,
    pub eos_index: usize,
}

impl TokenIds {
    /// Positions up to and including `[EOS]`.
    pub fn effective_len(&self) -> usize {
        self.eos_index + 1
    }

    pub fn pseudo_position(&self) -> Option<usize> {
        self.ids.iter().position(|&t| t == PSEUDO)
    }
}

/// Lowercases, strips punctuation and splits on whitespace.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Validation("vocabulary must start with the reserved specials".into()));
        }
        let mut ids = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Validation(format!("invalid token {t:?}")));
            }
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Validation(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    /// Specials, then every word the attribute domains, caption template and
    /// prompts can produce, sorted.
    pub fn build_default() -> Self {
        let mut words = BTreeSet::new();
        words.extend(normalize_words(TEMPLATE_WORDS));
        for a in Attribute::ALL {
            for v in a.values() {
                words.extend(normalize_words(v));
            }
        }
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        Self::from_tokens(tokens).expect("default vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.ids.get(word).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    fn word_id(&self, w: &str) -> u32 {
        match self.id(w) {
            // specials are never produced from text
            Some(id) if id as usize >= SPECIALS.len() => id,
            _ => UNK,
        }
    }

    pub fn tokenize(&self, caption: &str, max_len: usize) -> TokenIds {
        let words: Vec<u32> = normalize_words(caption).iter().map(|w| self.word_id(w)).collect();
        frame(&words, max_len)
    }

    /// `a photo of a [PSEUDO] person` (or `a photo of a person` without the
    /// pseudo-word slot).
    pub fn prompt(&self, with_pseudo: bool, max_len: usize) -> TokenIds {
        let w = |s: &str| self.id(s).expect("prompt words are in every vocabulary");
        let mut words = vec![w("a"), w("photo"), w("of"), w("a")];
        if with_pseudo {
            words.push(PSEUDO);
        }
        words.push(w("person"));
        frame(&words, max_len)
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::from(VOCAB_HEADER);
        out.push('\n');
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(VOCAB_HEADER) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: "missing vocabulary header".into(),
            });
        }
        Self::from_tokens(lines.map(str::to_string).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

fn frame(words: &[u32], max_len: usize) -> TokenIds {
    assert!(max_len >= 2, "max_len must fit [SOS] and [EOS]");
    let keep = words.len().min(max_len - 2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(SOS);
    ids.extend_from_slice(&words[..keep]);
    let eos_index = ids.len();
    ids.push(EOS);
    ids.resize(max_len, PAD);
    TokenIds { ids, eos_index }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caption::{render_caption, AttributeRecord, MAX_CAPTION_WORDS};

    #[test]
    fn empty_caption() {
        let v = Vocabulary::build_default();
        let t = v.tokenize("", 32);
        assert_eq!(&t.ids[..3], &[SOS, EOS, PAD]);
        assert_eq!(t.ids.len(), 32);
        assert_eq!(t.eos_index, 1);
    }

    #[test]
    fn simple_sentence_counts_words() {
        let v = Vocabulary::build_default();
        let t = v.tokenize("A man is wearing a red shirt", 32);
        assert_eq!(t.eos_index, 8);
        let words: Vec<&str> = t.ids[1..8].iter().map(|&i| v.token(i).unwrap()).collect();
        assert_eq!(words, ["a", "man", "is", "wearing", "a", "red", "shirt"]);
        assert!(t.ids[9..].iter().all(|&i| i == PAD));
    }

    #[test]
    fn unknown_words_and_specials_map_to_unk() {
        let v = Vocabulary::build_default();
        let t = v.tokenize("zebra [pseudo] PSEUDO", 8);
        assert_eq!(&t.ids[1..4], &[UNK, UNK, UNK]);
        assert!(!t.ids.contains(&PSEUDO));
    }

    #[test]
    fn truncation_forces_eos_last() {
        let v = Vocabulary::build_default();
        let long = "a ".repeat(50);
        let t = v.tokenize(&long, 32);
        assert_eq!(t.ids.len(), 32);
        assert_eq!(t.ids[31], EOS);
        assert_eq!(t.eos_index, 31);
    }

    #[test]
    fn prompt_layout() {
        let v = Vocabulary::build_default();
        let p = v.prompt(true, 32);
        assert_eq!(p.effective_len(), 8);
        assert_eq!(p.pseudo_position(), Some(5));
        assert_eq!(v.prompt(false, 32).effective_len(), 7);
    }

    #[test]
    fn every_caption_fits_and_is_fully_known() {
        // exhaustive sweep over all 13,824 attribute combinations
        let v = Vocabulary::build_default();
        let cards: Vec<usize> = Attribute::ALL.iter().map(|a| a.cardinality()).collect();
        let total: usize = cards.iter().product();
        assert_eq!(total, 3 * 2 * 6 * 6 * 4 * 4 * 2 * 2);
        let mut longest = 0;
        for mut n in 0..total {
            let mut idx = [0; 8];
            for (slot, c) in idx.iter_mut().zip(&cards) {
                *slot = n % c;
                n /= c;
            }
            let caption = render_caption(&AttributeRecord::new(idx).unwrap());
            let words = normalize_words(&caption);
            assert!(words.len() <= MAX_CAPTION_WORDS);
            assert!(words.len() + 2 <= 32, "{caption}");
            let t = v.tokenize(&caption, 32);
            assert!(!t.ids.contains(&UNK), "{caption}");
            longest = longest.max(t.effective_len());
        }
        assert!(longest <= 32);
    }

    #[test]
    fn file_round_trip() {
        let v = Vocabulary::build_default();
        let back = Vocabulary::parse(&v.to_file_string(), Path::new("v")).unwrap();
        assert_eq!(back, v);
        assert!(Vocabulary::parse("[PAD]\n", Path::new("v")).is_err());
    }
}

//! Word-level tokenisation and a vocabulary shared by all three modalities.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::ProgramTriplet;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Source,
    Binary,
    Comment,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Source, Modality::Binary, Modality::Comment];

    pub fn short(self) -> &'static str {
        match self {
            Modality::Source => "s",
            Modality::Binary => "b",
            Modality::Comment => "c",
        }
    }
}

/// Splits on whitespace; punctuation characters become single tokens.
/// `%` and `@` start a word when directly followed by a word character,
/// so IR operands like `%12` and `@TESTFUN0` stay whole.
pub fn tokenize(text: &str) -> Vec<&str> {
    let is_word = |c: char| c.is_alphanumeric() || c == '_';
    let bytes: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut k = 0;
    while k < bytes.len() {
        let (start, c) = bytes[k];
        if c.is_whitespace() {
            k += 1;
            continue;
        }
        let sigil = (c == '%' || c == '@') && bytes.get(k + 1).is_some_and(|&(_, n)| is_word(n));
        if is_word(c) || sigil {
            k += 1;
            while k < bytes.len() && is_word(bytes[k].1) {
                k += 1;
            }
            let end = bytes.get(k).map_or(text.len(), |&(i, _)| i);
            out.push(&text[start..end]);
        } else {
            k += 1;
            let end = bytes.get(k).map_or(text.len(), |&(i, _)| i);
            out.push(&text[start..end]);
        }
    }
    out
}

/// Canonical spacing: tokens joined by single spaces.
pub fn normalize_whitespace(text: &str) -> String {
    tokenize(text).join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub modality: Modality,
    pub truncated: bool,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl Vocab {
    /// Frequency-ranked vocabulary over every modality of every triplet.
    /// Ties break lexicographically.
    pub fn build(corpus: &[ProgramTriplet], max_vocab: usize) -> Result<Self> {
        if max_vocab < SPECIALS.len() + 1 {
            return Err(Error::config(format!(
                "max_vocab {max_vocab} leaves no room beyond the {} special tokens",
                SPECIALS.len()
            )));
        }
        if corpus.is_empty() {
            return Err(Error::config("cannot build a vocabulary from an empty corpus"));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in corpus {
            for m in Modality::ALL {
                for tok in tokenize(t.text(m)) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !SPECIALS.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let id_to_token: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().take(max_vocab - SPECIALS.len()).map(|(t, _)| t.to_string()))
            .collect();
        Ok(Self::from_tokens(id_to_token))
    }

    fn from_tokens(id_to_token: Vec<String>) -> Self {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            token_to_id,
            id_to_token,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// Tokenises and maps to ids, keeping at most `block_size - 2` content tokens.
    pub fn encode(&self, text: &str, modality: Modality, block_size: usize) -> TokenSequence {
        let room = block_size.saturating_sub(2);
        let toks = tokenize(text);
        let truncated = toks.len() > room;
        let mut ids = Vec::with_capacity(toks.len().min(room) + 2);
        ids.push(BOS);
        ids.extend(toks.iter().take(room).map(|t| self.id(t).unwrap_or(UNK)));
        ids.push(EOS);
        TokenSequence {
            ids,
            modality,
            truncated,
        }
    }

    /// Inverse of `encode` up to whitespace normalisation; PAD/BOS/EOS are dropped.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            if id >= self.len() {
                return Err(Error::Range { id, size: self.len() });
            }
            if matches!(id, PAD | BOS | EOS) {
                continue;
            }
            words.push(self.id_to_token[id].as_str());
        }
        Ok(words.join(" "))
    }

    pub fn to_json(&self) -> BTreeMap<String, usize> {
        self.token_to_id.iter().map(|(k, v)| (k.clone(), *v)).collect()
    }

    pub fn from_json(map: &BTreeMap<String, usize>) -> Result<Self> {
        let mut id_to_token = vec![String::new(); map.len()];
        for (tok, &id) in map {
            if id >= map.len() || !id_to_token[id].is_empty() {
                return Err(Error::Validation(format!("vocabulary ids are not a permutation (at `{tok}`)")));
            }
            id_to_token[id] = tok.clone();
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if id_to_token.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Validation(format!("special token `{s}` must have id {i}")));
            }
        }
        Ok(Self::from_tokens(id_to_token))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_json())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let map: BTreeMap<String, usize> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_json(&map)
    }
}

impl Serialize for Vocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let map = BTreeMap::<String, usize>::deserialize(d)?;
        Vocab::from_json(&map).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_corpus;
    use proptest::prelude::*;

    fn triplet(s: &str) -> ProgramTriplet {
        ProgramTriplet {
            id: "t".into(),
            source_text: s.into(),
            binary_text: "z".into(),
            comment_text: "z".into(),
            family_label: None,
            func_name_label: None,
        }
    }

    #[test]
    fn tokenizer_splits_punctuation_and_keeps_sigils() {
        assert_eq!(
            tokenize("%3 = add %a, 7\nbr label %bb1"),
            vec!["%3", "=", "add", "%a", ",", "7", "br", "label", "%bb1"]
        );
        assert_eq!(tokenize("a[i]<=b;"), vec!["a", "[", "i", "]", "<", "=", "b", ";"]);
        assert_eq!(tokenize("x % y"), vec!["x", "%", "y"]);
        assert_eq!(tokenize("define int @TESTFUN0("), vec!["define", "int", "@TESTFUN0", "("]);
    }

    #[test]
    fn most_frequent_token_gets_first_free_id() {
        let v = Vocab::build(&[triplet("a b a")], 16).unwrap();
        assert_eq!(v.id("a"), Some(4));
    }

    #[test]
    fn ties_break_lexicographically() {
        let v = Vocab::build(&[triplet("y x")], 16).unwrap();
        // "z" appears twice (binary + comment), then x < y.
        assert_eq!(v.id("z"), Some(4));
        assert!(v.id("x").unwrap() < v.id("y").unwrap());
    }

    #[test]
    fn build_is_deterministic_and_capped() {
        let corpus = generate_corpus(7, 4, 8).unwrap();
        let a = Vocab::build(&corpus, 64).unwrap();
        let b = Vocab::build(&corpus, 64).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn tiny_max_vocab_rejected() {
        assert!(Vocab::build(&[triplet("a")], 4).unwrap_err().is_config());
        assert!(Vocab::build(&[triplet("a")], 5).is_ok());
    }

    #[test]
    fn empty_text_is_bos_eos() {
        let v = Vocab::build(&[triplet("a")], 8).unwrap();
        let s = v.encode("", Modality::Comment, 16);
        assert_eq!(s.ids, vec![BOS, EOS]);
        assert!(!s.truncated);
        assert_eq!(v.decode(&s.ids).unwrap(), "");
    }

    #[test]
    fn long_ir_is_truncated_to_block() {
        let ir: String = (0..600).map(|i| format!("t{} ", i % 7)).collect();
        let v = Vocab::build(&[triplet(&ir)], 32).unwrap();
        let s = v.encode(&ir, Modality::Binary, 512);
        assert_eq!(s.len(), 512);
        assert!(s.truncated);
        assert_eq!(*s.ids.last().unwrap(), EOS);
    }

    #[test]
    fn out_of_range_id_errors() {
        let v = Vocab::build(&[triplet("a")], 8).unwrap();
        assert!(matches!(v.decode(&[1_000_000_000]), Err(Error::Range { .. })));
    }

    #[test]
    fn shared_ids_across_modalities() {
        let v = Vocab::build(&[triplet("int x")], 32).unwrap();
        let a = v.encode("int", Modality::Source, 8);
        let b = v.encode("int", Modality::Binary, 8);
        assert_eq!(a.ids, b.ids);
    }

    #[test]
    fn json_round_trip() {
        let corpus = generate_corpus(1, 3, 3).unwrap();
        let v = Vocab::build(&corpus, 200).unwrap();
        let back = Vocab::from_json(&v.to_json()).unwrap();
        assert_eq!(v, back);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn decode_inverts_encode_on_corpus(seed in 0u64..1000, fam in 0usize..8, modality in 0usize..3) {
            let corpus = generate_corpus(seed, 8, 2).unwrap();
            let v = Vocab::build(&corpus, 100_000).unwrap();
            let t = &corpus[fam * 2];
            let m = Modality::ALL[modality];
            let seq = v.encode(t.text(m), m, 4096);
            prop_assert!(!seq.truncated);
            prop_assert_eq!(v.decode(&seq.ids).unwrap(), normalize_whitespace(t.text(m)));
        }
    }
}

//! Uncased WordPiece tokenization compatible with BERT `vocab.txt` files.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use unicode_normalization::UnicodeNormalization;

use crate::util;
use crate::{Error, Result};

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const MASK: &str = "[MASK]";

const SPECIALS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];
const MAX_WORD_CHARS: usize = 100;

#[derive(Clone, Debug)]
pub struct WordPieceTokenizer {
    vocab: HashMap<String, u32>,
    tokens: Vec<String>,
    lowercase: bool,
    pad: u32,
    unk: u32,
    cls: u32,
    sep: u32,
    mask: u32,
}

impl WordPieceTokenizer {
    /// Builds a tokenizer from tokens in id order. All five special tokens
    /// must be present.
    pub fn from_tokens(tokens: Vec<String>, lowercase: bool) -> Result<Self> {
        let mut vocab = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            vocab.entry(t.clone()).or_insert(i as u32);
        }
        let id = |s: &str| {
            vocab.get(s).copied().ok_or_else(|| Error::Vocabulary {
                word: s.to_string(),
                reason: "special token missing from vocabulary".into(),
            })
        };
        Ok(Self {
            pad: id(PAD)?,
            unk: id(UNK)?,
            cls: id(CLS)?,
            sep: id(SEP)?,
            mask: id(MASK)?,
            vocab,
            tokens,
            lowercase,
        })
    }

    pub fn from_file(path: &Path, lowercase: bool) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(
            text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect(),
            lowercase,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = util::create(path)?;
        for t in &self.tokens {
            writeln!(w, "{t}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// A vocabulary covering `texts`: special tokens, every basic-tokenized
    /// word, and single characters with their continuation forms. Filler
    /// tokens pad it to `min_size`.
    pub fn build(texts: &[&str], min_size: usize) -> Result<Self> {
        let probe = Self::from_tokens(SPECIALS.iter().map(|s| s.to_string()).collect(), true)?;
        let mut words: BTreeMap<String, ()> = BTreeMap::new();
        let mut chars: BTreeMap<char, ()> = BTreeMap::new();
        for t in texts {
            for w in probe.basic_tokens(t) {
                if probe.vocab.contains_key(&w) {
                    continue;
                }
                chars.extend(w.chars().map(|c| (c, ())));
                words.insert(w, ());
            }
        }
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for c in chars.keys() {
            tokens.push(c.to_string());
            tokens.push(format!("##{c}"));
        }
        tokens.extend(words.into_keys().filter(|w| w.chars().count() > 1));
        let mut k = 0;
        while tokens.len() < min_size {
            tokens.push(format!("[unused{k}]"));
            k += 1;
        }
        Self::from_tokens(tokens, true)
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.vocab.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad_id(&self) -> u32 {
        self.pad
    }
    pub fn unk_id(&self) -> u32 {
        self.unk
    }
    pub fn cls_id(&self) -> u32 {
        self.cls
    }
    pub fn sep_id(&self) -> u32 {
        self.sep
    }
    pub fn mask_id(&self) -> u32 {
        self.mask
    }

    pub fn is_special(&self, id: u32) -> bool {
        [self.pad, self.unk, self.cls, self.sep, self.mask].contains(&id)
    }

    /// Token ids without `[CLS]`/`[SEP]` framing.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for word in self.basic_tokens(text) {
            if let Some(&id) = self.vocab.get(&word) {
                if SPECIALS.contains(&word.as_str()) {
                    ids.push(id);
                    continue;
                }
            }
            self.wordpiece(&word, &mut ids);
        }
        ids
    }

    pub fn tokenize(&self, text: &str) -> Vec<&str> {
        self.encode(text)
            .into_iter()
            .map(|id| self.tokens[id as usize].as_str())
            .collect()
    }

    /// `[CLS] text [SEP]`.
    pub fn encode_framed(&self, text: &str) -> Vec<u32> {
        let mut ids = vec![self.cls];
        ids.extend(self.encode(text));
        ids.push(self.sep);
        ids
    }

    /// `[CLS] first [SEP] second [SEP]` with segment ids.
    pub fn encode_pair(&self, first: &str, second: &str) -> (Vec<u32>, Vec<u32>) {
        let mut ids = self.encode_framed(first);
        let split = ids.len();
        ids.extend(self.encode(second));
        ids.push(self.sep);
        let types = (0..ids.len()).map(|k| u32::from(k >= split)).collect();
        (ids, types)
    }

    /// Id of a word that must encode to exactly one token.
    pub fn single_token(&self, word: &str) -> Result<u32> {
        match self.encode(word).as_slice() {
            [id] if *id != self.unk => Ok(*id),
            [] => Err(Error::Vocabulary {
                word: word.into(),
                reason: "encodes to no tokens".into(),
            }),
            [_] => Err(Error::Vocabulary {
                word: word.into(),
                reason: "absent from the tokenizer vocabulary".into(),
            }),
            many => Err(Error::Vocabulary {
                word: word.into(),
                reason: format!("splits into {} sub-tokens", many.len()),
            }),
        }
    }

    fn wordpiece(&self, word: &str, out: &mut Vec<u32>) {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_WORD_CHARS {
            out.push(self.unk);
            return;
        }
        let mark = out.len();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while start < end {
                let mut piece: String = chars[start..end].iter().collect();
                if start > 0 {
                    piece.insert_str(0, "##");
                }
                if let Some(&id) = self.vocab.get(&piece) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    out.push(id);
                    start = end;
                }
                None => {
                    out.truncate(mark);
                    out.push(self.unk);
                    return;
                }
            }
        }
    }

    /// Whitespace and punctuation splitting, case folding and accent
    /// stripping. Special tokens present in the vocabulary survive intact.
    fn basic_tokens(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            let next_special = SPECIALS.iter().filter_map(|s| rest.find(s).map(|at| (at, *s))).min();
            let (chunk, special) = match next_special {
                Some((at, s)) => (&rest[..at], Some(s)),
                None => (rest, None),
            };
            self.split_plain(chunk, &mut out);
            match special {
                Some(s) => {
                    out.push(s.to_string());
                    rest = &rest[chunk.len() + s.len()..];
                }
                None => break,
            }
        }
        out
    }

    fn split_plain(&self, text: &str, out: &mut Vec<String>) {
        let cleaned: String = text
            .chars()
            .filter(|&c| c != '\0' && c != '\u{fffd}' && !(c.is_control() && !c.is_whitespace()))
            .flat_map(|c| if is_cjk(c) { vec![' ', c, ' '] } else { vec![c] })
            .collect();
        for word in cleaned.split_whitespace() {
            let word = if self.lowercase {
                word.to_lowercase()
                    .nfd()
                    .filter(|c| !unicode_normalization::char::is_combining_mark(*c))
                    .collect::<String>()
            } else {
                word.to_string()
            };
            let mut current = String::new();
            for c in word.chars() {
                if is_punctuation(c) {
                    if !current.is_empty() {
                        out.push(std::mem::take(&mut current));
                    }
                    out.push(c.to_string());
                } else {
                    current.push(c);
                }
            }
            if !current.is_empty() {
                out.push(current);
            }
        }
    }
}

fn is_punctuation(c: char) -> bool {
    let cp = c as u32;
    (33..=47).contains(&cp)
        || (58..=64).contains(&cp)
        || (91..=96).contains(&cp)
        || (123..=126).contains(&cp)
        || matches!(
            c,
            '\u{2010}'..='\u{2027}' | '\u{2030}'..='\u{205E}' | '\u{3001}'..='\u{3003}' | '\u{00A1}' | '\u{00BF}' | '\u{00AB}' | '\u{00BB}'
        )
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x4E00..=0x9FFF | 0x3400..=0x4DBF | 0x20000..=0x2A6DF | 0x2A700..=0x2B73F
        | 0x2B740..=0x2B81F | 0x2B820..=0x2CEAF | 0xF900..=0xFAFF | 0x2F800..=0x2FA1F)
}

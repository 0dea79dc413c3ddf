use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const PAGE: usize = 4;
pub const BYTE_BASE: usize = 5;
pub const FIRST_LEARNED: usize = BYTE_BASE + 256;
pub const CONTINUATION: &str = "##";
const SPECIALS: [&str; 5] = ["<pad>", "<s>", "</s>", "<sep>", "<page>"];
const SPACE_BYTE: u8 = b' ';

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabConfig {
    pub size: usize,
    pub min_freq: usize,
    /// Add every corpus character as a word-initial and a continuation piece.
    pub include_chars: bool,
    /// Words that always get an id, frequency permitting or not.
    pub reserved: Vec<String>,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            size: 2048,
            min_freq: 2,
            include_chars: true,
            reserved: Vec::new(),
        }
    }
}

/// Sub-word vocabulary with greedy longest-match and byte fallback.
/// Word-initial pieces are stored bare, continuation pieces with a `##`
/// prefix, bytes as `<0xNN>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    max_piece_chars: usize,
}

fn byte_token(b: u8) -> String {
    format!("<0x{b:02X}>")
}

impl Tokenizer {
    /// Only specials and bytes.
    pub fn bytes_only() -> Self {
        Self::from_tokens(Self::base_tokens()).expect("base vocabulary is valid")
    }

    fn base_tokens() -> Vec<String> {
        let mut t: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        t.extend((0..=255u8).map(byte_token));
        t
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let base = Self::base_tokens();
        if tokens.len() < base.len() || tokens[..base.len()] != base[..] {
            return Err(Error::Format("vocabulary must start with specials and 256 byte tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token `{t}`")));
            }
        }
        let max_piece_chars = tokens[FIRST_LEARNED..]
            .iter()
            .map(|t| t.trim_start_matches(CONTINUATION).chars().count())
            .max()
            .unwrap_or(0);
        Ok(Self {
            tokens,
            index,
            max_piece_chars,
        })
    }

    /// Builds a vocabulary from whitespace-separated words of `corpus`.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, cfg: &VocabConfig) -> Self {
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for text in corpus {
            for w in text.split_whitespace() {
                *freq.entry(w).or_insert(0) += 1;
            }
        }
        let mut tokens = Self::base_tokens();
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        let budget = cfg.size.max(FIRST_LEARNED);
        let mut push = |t: String, tokens: &mut Vec<String>| {
            if tokens.len() < budget && seen.insert(t.clone()) {
                tokens.push(t);
            }
        };
        for r in &cfg.reserved {
            push(r.clone(), &mut tokens);
        }
        if cfg.include_chars {
            let mut chars: Vec<char> = freq.keys().flat_map(|w| w.chars()).collect();
            chars.sort_unstable();
            chars.dedup();
            for c in chars {
                push(c.to_string(), &mut tokens);
                push(format!("{CONTINUATION}{c}"), &mut tokens);
            }
        }
        let mut words: Vec<(&str, usize)> = freq
            .into_iter()
            .filter(|&(w, n)| n >= cfg.min_freq && w.chars().count() > 1 && !w.starts_with(CONTINUATION))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        for (w, _) in words {
            push(w.to_string(), &mut tokens);
        }
        Self::from_tokens(tokens).expect("built vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    fn longest(&self, chars: &[char], start: usize, initial: bool) -> Option<(usize, usize)> {
        let max = self.max_piece_chars.min(chars.len() - start);
        for len in (1..=max).rev() {
            let piece: String = chars[start..start + len].iter().collect();
            let key = if initial {
                piece
            } else {
                format!("{CONTINUATION}{piece}")
            };
            if let Some(&id) = self.index.get(&key) {
                return Some((id, len));
            }
        }
        None
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for (wi, word) in text.split_whitespace().enumerate() {
            let chars: Vec<char> = word.chars().collect();
            let mut pos = 0;
            while pos < chars.len() {
                match self.longest(&chars, pos, pos == 0) {
                    Some((id, len)) => {
                        out.push(id);
                        pos += len;
                    }
                    None => {
                        // a word that opens with raw bytes carries its own separator
                        if pos == 0 && wi > 0 {
                            out.push(BYTE_BASE + SPACE_BYTE as usize);
                        }
                        let mut buf = [0u8; 4];
                        for b in chars[pos].encode_utf8(&mut buf).bytes() {
                            out.push(BYTE_BASE + b as usize);
                        }
                        pos += 1;
                    }
                }
            }
        }
        out
    }

    /// Inverse of `encode` up to whitespace normalisation. Special ids are
    /// skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut bytes: Vec<u8> = Vec::new();
        for &id in ids {
            if id < BYTE_BASE {
                continue;
            }
            if id < FIRST_LEARNED {
                bytes.push((id - BYTE_BASE) as u8);
                continue;
            }
            let Some(tok) = self.tokens.get(id) else { continue };
            match tok.strip_prefix(CONTINUATION) {
                Some(piece) => bytes.extend_from_slice(piece.as_bytes()),
                None => {
                    if !bytes.is_empty() {
                        bytes.push(SPACE_BYTE);
                    }
                    bytes.extend_from_slice(tok.as_bytes());
                }
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.tokens)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(serde_json::from_str(&text)?)
    }
}

//! Vocabulary, styled examples and the line-delimited corpus format.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{StyleId, StyleSet};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Whitespace tokenization with lowercasing.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from an explicit token list; reserved tokens are prepended.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(Into::into));
        Self::from_full_list(all)
    }

    /// Rebuilds from a complete id-ordered list, reserved tokens included.
    pub fn from_full_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..4] != RESERVED {
            return Err(Error::InvalidArgument(
                "vocabulary must start with the reserved tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Surface form of `ids`, stopping at the first EOS and skipping PAD/BOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Keeps the `cap - 4` most frequent tokens, ties broken lexicographically.
pub fn build_vocab<'a, I>(texts: I, cap: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a str>,
{
    if cap < 5 {
        return Err(Error::InvalidArgument(format!("vocabulary cap {cap} < 5")));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in texts {
        for tok in tokenize(text) {
            if RESERVED.contains(&tok.as_str()) {
                continue;
            }
            *counts.entry(tok).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::InvalidArgument("empty corpus".into()));
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocabulary::from_tokens(ranked.into_iter().take(cap - 4).map(|(t, _)| t))
}

/// A corpus record as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawExample {
    pub source: String,
    pub target: String,
    #[serde(default)]
    pub style: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StyledExample {
    pub source: Vec<usize>,
    /// Ends with [`EOS`].
    pub target: Vec<usize>,
    pub style: Option<StyleId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Caps {
    pub max_source: usize,
    pub max_target: usize,
}

impl Default for Caps {
    fn default() -> Self {
        Caps {
            max_source: 40,
            max_target: 20,
        }
    }
}

/// Tokenizes, maps OOV tokens to UNK and truncates. The target keeps at most
/// `max_target - 1` tokens so that it fits the cap with EOS appended. Style
/// names outside `styles` become unknown.
pub fn encode_example(
    raw: &RawExample,
    vocab: &Vocabulary,
    styles: &StyleSet,
    caps: Caps,
) -> Result<StyledExample> {
    let mut source = vocab.encode(&raw.source);
    if source.is_empty() {
        return Err(Error::InvalidArgument("empty source".into()));
    }
    source.truncate(caps.max_source);
    let mut target = vocab.encode(&raw.target);
    target.truncate(caps.max_target.saturating_sub(1));
    target.push(EOS);
    let style = raw.style.as_deref().and_then(|s| styles.id(s).ok());
    Ok(StyledExample {
        source,
        target,
        style,
    })
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<RawExample>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawExample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_corpus(examples: &[RawExample], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for ex in examples {
        let line = serde_json::to_string(ex).expect("serializable record");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

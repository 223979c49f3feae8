//! Tokenization, vocabulary, bag-of-words features and profile one-hot vectors.
//!
//! Feature layout of the vocabulary, for `V` content words and `T` time
//! features:
//!
//! ```text
//! [0, V)          content words, lexicographic
//! [V, V+T)        time features t_0 .. t_{T-1}
//! V+T             speaker #u
//! V+T+1           speaker #r
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

pub const DEFAULT_TIME_FEATURES: usize = 1000;

/// Lowercases, splits on whitespace and strips trailing punctuation from each
/// token. Underscore-joined entity names stay single tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| {
            t.trim_end_matches(['.', ',', '!', '?', ';', ':'])
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Speaker {
    User,
    Bot,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    time_features: usize,
}

impl Vocabulary {
    pub fn from_texts<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        time_features: usize,
    ) -> Result<Self> {
        let mut words = BTreeSet::new();
        let mut seen_any = false;
        for text in texts {
            seen_any = true;
            words.extend(tokenize(text));
        }
        if !seen_any {
            return Err(Error::invalid(
                "cannot build a vocabulary from an empty corpus",
            ));
        }
        Ok(Self::from_words(words.into_iter().collect(), time_features))
    }

    /// `words` must be sorted and unique.
    fn from_words(words: Vec<String>, time_features: usize) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocabulary {
            words,
            index,
            time_features,
        }
    }

    /// Rebuilds the lookup table after deserialization.
    pub(crate) fn reindex(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
    }

    /// Number of content words `V`.
    pub fn base_size(&self) -> usize {
        self.words.len()
    }

    pub fn time_feature_count(&self) -> usize {
        self.time_features
    }

    /// `V + T + 2`
    pub fn dim(&self) -> usize {
        self.words.len() + self.time_features + 2
    }

    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn time_id(&self, t: usize) -> usize {
        self.words.len() + t
    }

    pub fn speaker_id(&self, speaker: Speaker) -> usize {
        let base = self.words.len() + self.time_features;
        match speaker {
            Speaker::User => base,
            Speaker::Bot => base + 1,
        }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Human-readable name of a feature id.
    pub fn feature_name(&self, id: usize) -> String {
        let v = self.words.len();
        let t = self.time_features;
        if id < v {
            self.words[id].clone()
        } else if id < v + t {
            format!("t_{}", id - v)
        } else if id == v + t {
            "#u".to_string()
        } else if id == v + t + 1 {
            "#r".to_string()
        } else {
            format!("<out-of-range {id}>")
        }
    }

    /// Tokens of `text` that are not in the vocabulary.
    pub fn unknown_tokens(&self, text: &str) -> Vec<String> {
        tokenize(text)
            .into_iter()
            .filter(|t| !self.index.contains_key(t))
            .collect()
    }

    /// Header `V T`, then one token per line in id order.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{} {}", self.words.len(), self.time_features)?;
        for word in &self.words {
            writeln!(w, "{word}")?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::Parse {
            line: 1,
            msg: "missing `V T` header".into(),
        })??;
        let parts: Vec<&str> = header.split_whitespace().collect();
        let parse = |s: &str| {
            s.parse::<usize>().map_err(|e| Error::Parse {
                line: 1,
                msg: format!("bad header field {s:?}: {e}"),
            })
        };
        if parts.len() != 2 {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected `V T`, got {header:?}"),
            });
        }
        let (v, t) = (parse(parts[0])?, parse(parts[1])?);
        let words: Vec<String> = lines.take(v).collect::<std::io::Result<_>>()?;
        if words.len() != v {
            return Err(Error::Parse {
                line: words.len() + 2,
                msg: format!("header promises {v} tokens, found {}", words.len()),
            });
        }
        if words.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::data("vocabulary tokens are not sorted and unique"));
        }
        Ok(Self::from_words(words, t))
    }
}

/// Sparse feature counts, sorted by feature id.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BagOfWords {
    entries: Vec<(u32, u32)>,
}

impl BagOfWords {
    pub fn from_ids(ids: impl IntoIterator<Item = usize>) -> Self {
        let mut counts: BTreeMap<u32, u32> = BTreeMap::new();
        for id in ids {
            *counts.entry(id as u32).or_default() += 1;
        }
        BagOfWords {
            entries: counts.into_iter().collect(),
        }
    }

    pub fn entries(&self) -> &[(u32, u32)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, id: usize) -> u32 {
        self.entries
            .binary_search_by_key(&(id as u32), |&(f, _)| f)
            .map(|i| self.entries[i].1)
            .unwrap_or(0)
    }

    pub fn max_feature(&self) -> Option<usize> {
        self.entries.last().map(|&(f, _)| f as usize)
    }

    /// Multiset union with summed counts.
    pub fn merged(&self, other: &BagOfWords) -> BagOfWords {
        let mut counts: BTreeMap<u32, u32> = self.entries.iter().copied().collect();
        for &(f, c) in &other.entries {
            *counts.entry(f).or_default() += c;
        }
        BagOfWords {
            entries: counts.into_iter().collect(),
        }
    }
}

fn word_ids<'a>(text: &str, vocab: &'a Vocabulary) -> impl Iterator<Item = usize> + 'a {
    tokenize(text)
        .into_iter()
        .filter_map(move |t| vocab.lookup(&t))
}

/// Bag for a memory slot: words plus one time feature and one speaker feature.
/// Unknown words contribute nothing.
pub fn encode_memory_utterance(
    text: &str,
    turn_index: usize,
    speaker: Speaker,
    vocab: &Vocabulary,
) -> Result<BagOfWords> {
    if turn_index >= vocab.time_feature_count() {
        return Err(Error::invalid(format!(
            "turn index {turn_index} exceeds the {} time features",
            vocab.time_feature_count()
        )));
    }
    let ids = word_ids(text, vocab).chain([vocab.time_id(turn_index), vocab.speaker_id(speaker)]);
    Ok(BagOfWords::from_ids(ids))
}

/// Bag for a query or a candidate: words only.
pub fn encode_candidate(text: &str, vocab: &Vocabulary) -> BagOfWords {
    BagOfWords::from_ids(word_ids(text, vocab))
}

/// `Σ count · embedding[:, feature]`
pub fn embed_bag(bag: &BagOfWords, embedding: &Matrix) -> Result<Vector> {
    if let Some(max) = bag.max_feature() {
        if max >= embedding.cols() {
            return Err(Error::invalid(format!(
                "feature id {max} outside embedding with {} columns",
                embedding.cols()
            )));
        }
    }
    let mut out = vec![0.0; embedding.rows()];
    embed_bag_into(bag, embedding, &mut out);
    Ok(out)
}

/// Unchecked accumulate: `out += embedding · bag`.
#[inline]
pub(crate) fn embed_bag_into(bag: &BagOfWords, embedding: &Matrix, out: &mut [f64]) {
    for &(f, c) in bag.entries() {
        embedding.add_column_to(f as usize, c as f64, out);
    }
}

/// A user profile: attribute key → value.
pub type Profile = BTreeMap<String, String>;

/// Ordered attribute keys and their admissible values.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileSchema {
    attributes: Vec<(String, Vec<String>)>,
}

impl ProfileSchema {
    pub fn new(attributes: Vec<(String, Vec<String>)>) -> Result<Self> {
        let mut keys = BTreeSet::new();
        for (key, values) in &attributes {
            if !keys.insert(key) {
                return Err(Error::invalid(format!("duplicate attribute key {key:?}")));
            }
            if values.is_empty() {
                return Err(Error::invalid(format!("attribute {key:?} has no values")));
            }
            let uniq: BTreeSet<_> = values.iter().collect();
            if uniq.len() != values.len() {
                return Err(Error::invalid(format!(
                    "attribute {key:?} lists a value twice"
                )));
            }
        }
        Ok(ProfileSchema { attributes })
    }

    pub fn attributes(&self) -> &[(String, Vec<String>)] {
        &self.attributes
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.attributes.iter().map(|(k, _)| k.as_str())
    }

    pub fn attribute_count(&self) -> usize {
        self.attributes.len()
    }

    /// `d^(p) = Σ d_i`
    pub fn dim(&self) -> usize {
        self.attributes.iter().map(|(_, v)| v.len()).sum()
    }

    /// Builds a profile from values listed in schema order.
    pub fn profile_from_values(&self, values: &[&str]) -> Result<Profile> {
        if values.len() != self.attributes.len() {
            return Err(Error::invalid(format!(
                "expected {} profile values, got {}",
                self.attributes.len(),
                values.len()
            )));
        }
        let profile: Profile = self
            .attributes
            .iter()
            .zip(values)
            .map(|((k, _), v)| (k.clone(), v.to_string()))
            .collect();
        self.encode(&profile)?;
        Ok(profile)
    }

    /// Values of `profile` in schema order.
    pub fn values_in_order<'a>(&self, profile: &'a Profile) -> Vec<&'a str> {
        self.attributes
            .iter()
            .filter_map(|(k, _)| profile.get(k).map(String::as_str))
            .collect()
    }

    /// Every admissible profile, in lexicographic order of schema indices.
    pub fn all_profiles(&self) -> Vec<Profile> {
        let mut out = vec![Profile::new()];
        for (key, values) in &self.attributes {
            out = out
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |v| {
                        let mut q = p.clone();
                        q.insert(key.clone(), v.clone());
                        q
                    })
                })
                .collect();
        }
        out
    }

    pub fn encode(&self, profile: &Profile) -> Result<ProfileOneHot> {
        encode_profile(profile, self)
    }

    /// One line per attribute: `<key> <value_1> ... <value_d>`.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        for (k, values) in &self.attributes {
            writeln!(w, "{k} {}", values.join(" "))?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut attributes = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            let mut parts = line.split_whitespace();
            let Some(key) = parts.next() else { continue };
            let values: Vec<String> = parts.map(str::to_string).collect();
            if values.is_empty() {
                return Err(Error::Parse {
                    line: n + 1,
                    msg: format!("attribute {key:?} has no values"),
                });
            }
            attributes.push((key.to_string(), values));
        }
        ProfileSchema::new(attributes)
    }
}

/// Concatenated one-hot blocks, one per schema attribute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileOneHot(Vec<f64>);

impl ProfileOneHot {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn active_indices(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &x)| x == 1.0)
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn encode_profile(profile: &Profile, schema: &ProfileSchema) -> Result<ProfileOneHot> {
    let mut out = vec![0.0; schema.dim()];
    let mut offset = 0;
    for (key, values) in &schema.attributes {
        let value = profile
            .get(key)
            .ok_or_else(|| Error::invalid(format!("profile is missing attribute {key}")))?;
        let idx = values.iter().position(|v| v == value).ok_or_else(|| {
            Error::invalid(format!("unknown value {value:?} for attribute {key}"))
        })?;
        out[offset + idx] = 1.0;
        offset += values.len();
    }
    Ok(ProfileOneHot(out))
}

use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::encoding::{encode_candidate, BagOfWords, Vocabulary};
use crate::error::{Error, Result};
use crate::kb::{candidate_entity, KnowledgeBase};

/// The fixed universe of bot responses, encoded once against a vocabulary.
#[derive(Clone, Debug)]
pub struct CandidateSet {
    texts: Vec<String>,
    bags: Vec<BagOfWords>,
    coords: Vec<Option<(usize, usize)>>,
    index: HashMap<String, usize>,
}

impl CandidateSet {
    pub fn new(texts: Vec<String>, vocab: &Vocabulary, kb: &KnowledgeBase) -> Result<Self> {
        let mut index = HashMap::with_capacity(texts.len());
        for (i, t) in texts.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::data(format!("candidate {t:?} listed twice")));
            }
        }
        let bags = texts.iter().map(|t| encode_candidate(t, vocab)).collect();
        let coords = texts
            .iter()
            .map(|t| candidate_entity(t, kb))
            .collect::<Result<_>>()?;
        Ok(CandidateSet {
            texts,
            bags,
            coords,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    pub fn text(&self, i: usize) -> &str {
        &self.texts[i]
    }

    pub fn bags(&self) -> &[BagOfWords] {
        &self.bags
    }

    /// KB coordinates of the entity each candidate carries.
    pub fn coords(&self) -> &[Option<(usize, usize)>] {
        &self.coords
    }

    pub fn index_of(&self, text: &str) -> Option<usize> {
        self.index.get(text.trim()).copied()
    }
}

/// One response per line. If every line starts with `1 ` (bAbI candidate
/// files), that prefix is dropped.
pub fn read_candidates(r: impl BufRead) -> Result<Vec<String>> {
    let lines: Vec<String> = r
        .lines()
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    if !lines.is_empty() && lines.iter().all(|l| l.starts_with("1 ")) {
        return Ok(lines.into_iter().map(|l| l[2..].to_string()).collect());
    }
    Ok(lines)
}

pub fn write_candidates(texts: &[String], mut w: impl Write) -> Result<()> {
    for t in texts {
        writeln!(w, "{t}")?;
    }
    Ok(())
}

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Synonym {
    pub synonym: String,
    pub score: f64,
}

/// Deterministic synonym source over a vocabulary.
pub trait Lexicon: Send + Sync {
    /// Related words of `word`, in lexicon order, with similarity scores.
    fn related(&self, word: &str) -> &[Synonym];
}

/// Lexicon backed by a JSON map `word -> [{ synonym, score }]`. Lookups try
/// the word as given, then lowercased.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MapLexicon {
    words: BTreeMap<String, Vec<Synonym>>,
}

impl MapLexicon {
    pub fn new(words: BTreeMap<String, Vec<Synonym>>) -> Self {
        Self { words }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn insert(&mut self, word: &str, synonyms: &[(&str, f64)]) {
        self.words.insert(
            word.to_string(),
            synonyms
                .iter()
                .map(|(s, score)| Synonym {
                    synonym: s.to_string(),
                    score: *score,
                })
                .collect(),
        );
    }
}

impl Lexicon for MapLexicon {
    fn related(&self, word: &str) -> &[Synonym] {
        self.words
            .get(word)
            .or_else(|| self.words.get(&word.to_lowercase()))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

/// `R(w)`: related words scoring at least `tau_syn`, in lexicon order.
fn related_above<'a>(word: &str, lex: &'a dyn Lexicon, tau_syn: f64) -> impl Iterator<Item = &'a str> {
    lex.related(word)
        .iter()
        .filter(move |s| s.score >= tau_syn)
        .map(|s| s.synonym.as_str())
}

/// First `n` synonyms of `word` at or above `tau_syn`; `[word]` when none
/// qualify.
pub fn retrieve_synonyms(word: &str, lex: &dyn Lexicon, tau_syn: f64, n: usize) -> Result<Vec<String>> {
    if n == 0 {
        return Err(Error::InvalidArgument("synonym count must be at least 1".into()));
    }
    let found: Vec<String> = related_above(word, lex, tau_syn)
        .take(n)
        .map(str::to_string)
        .collect();
    if found.is_empty() {
        Ok(vec![word.to_string()])
    } else {
        Ok(found)
    }
}

/// Replace each token with a synonym with probability `alpha`. One uniform
/// draw is made per token (in order) so the stream is reproducible; tokens
/// without synonyms are never changed.
pub fn perturb<R: Rng + ?Sized>(
    tokens: &[String],
    alpha: f64,
    lex: &dyn Lexicon,
    tau_syn: f64,
    rng: &mut R,
) -> Result<Vec<String>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    let mut out = Vec::with_capacity(tokens.len());
    for t in tokens {
        let replace = rng.random::<f64>() < alpha;
        let candidates: Vec<&str> = related_above(t, lex, tau_syn).collect();
        if replace && !candidates.is_empty() {
            let pick = rng.random_range(0..candidates.len());
            out.push(candidates[pick].to_string());
        } else {
            out.push(t.clone());
        }
    }
    Ok(out)
}

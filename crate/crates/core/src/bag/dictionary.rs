use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{argmax, cosine_sim, FeatureVec};
use crate::encoders::EncoderBackend;
use crate::error::{ensure_dim, Error, Result};
use crate::exec::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DictKind {
    Class,
    Attribute,
}

/// Pre-encoded dictionary of class names or attributes.
#[derive(Debug, Clone)]
pub struct Dictionary {
    kind: DictKind,
    entries: Vec<String>,
    embeddings: Vec<FeatureVec>,
}

/// Parse the line format: one entry per line, `#` starts a comment, blank
/// lines ignored, duplicates dropped (first occurrence wins).
pub fn parse_dictionary_lines(text: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for line in text.lines() {
        let entry = line.split('#').next().unwrap_or("").trim();
        if entry.is_empty() {
            continue;
        }
        if seen.insert(entry.to_string()) {
            out.push(entry.to_string());
        } else {
            log::warn!("dropping duplicate dictionary entry {entry:?}");
        }
    }
    out
}

impl Dictionary {
    /// Encode every entry once with `backend`.
    pub fn encode(
        kind: DictKind,
        entries: Vec<String>,
        backend: &dyn EncoderBackend,
        exec: Exec,
    ) -> Result<Self> {
        let embeddings = exec.try_map(&entries, |e| backend.encode_text(e))?;
        Self::from_parts(kind, entries, embeddings)
    }

    pub fn from_parts(kind: DictKind, entries: Vec<String>, embeddings: Vec<FeatureVec>) -> Result<Self> {
        if entries.len() != embeddings.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} entries but {} embeddings",
                entries.len(),
                embeddings.len()
            )));
        }
        let unique: BTreeSet<&String> = entries.iter().collect();
        if unique.len() != entries.len() {
            return Err(Error::InvalidArgument("duplicate dictionary entries".into()));
        }
        if let Some(first) = embeddings.first() {
            for e in &embeddings {
                ensure_dim(first.dim(), e.dim())?;
                if !e.is_unit() {
                    return Err(Error::InvalidArgument(
                        "dictionary embeddings must be unit-norm".into(),
                    ));
                }
            }
        }
        Ok(Self {
            kind,
            entries,
            embeddings,
        })
    }

    pub fn load(path: &Path, kind: DictKind, backend: &dyn EncoderBackend) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::encode(kind, parse_dictionary_lines(&text), backend, Exec::default())
    }

    pub fn kind(&self) -> DictKind {
        self.kind
    }
    pub fn len(&self) -> usize {
        self.entries.len()
    }
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
    pub fn entries(&self) -> &[String] {
        &self.entries
    }
    pub fn embeddings(&self) -> &[FeatureVec] {
        &self.embeddings
    }

    fn similarities(&self, feat: &[f64]) -> Result<Vec<f64>> {
        if self.is_empty() {
            return Err(Error::Empty("dictionary"));
        }
        self.embeddings.iter().map(|row| cosine_sim(feat, row)).collect()
    }
}

/// Best-matching entry by cosine similarity: `(index, score)`.
pub fn match_dictionary(image_feat: &[f64], dict: &Dictionary) -> Result<(usize, f64)> {
    let sims = dict.similarities(image_feat)?;
    let i = argmax(&sims)?;
    Ok((i, sims[i]))
}

/// The `k` best entries, best first; equal scores keep dictionary order.
pub fn top_k(image_feat: &[f64], dict: &Dictionary, k: usize) -> Result<Vec<(usize, f64)>> {
    let sims = dict.similarities(image_feat)?;
    let mut idx: Vec<usize> = (0..sims.len()).collect();
    idx.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    Ok(idx.into_iter().take(k.max(1)).map(|i| (i, sims[i])).collect())
}

/// Match many image features against one dictionary.
pub fn match_many(feats: &[FeatureVec], dict: &Dictionary, exec: Exec) -> Result<Vec<(usize, f64)>> {
    exec.try_map(feats, |f| match_dictionary(f, dict))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::l2_normalize;
    use crate::encoders::StubBackend;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dict(rng: &mut ChaCha8Rng, m: usize, q: usize) -> Dictionary {
        let entries = (0..m).map(|i| format!("e{i}")).collect();
        let emb = (0..m)
            .map(|_| l2_normalize(&(0..q).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap())
            .collect();
        Dictionary::from_parts(DictKind::Class, entries, emb).unwrap()
    }

    #[test]
    fn exact_row_matches_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = random_dict(&mut rng, 8, 16);
        let (i, s) = match_dictionary(&d.embeddings()[3].clone(), &d).unwrap();
        assert_eq!(i, 3);
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let d = Dictionary::from_parts(DictKind::Class, vec![], vec![]).unwrap();
        assert!(matches!(match_dictionary(&[1.0], &d), Err(Error::Empty(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = random_dict(&mut rng, 3, 4);
        assert!(matches!(match_dictionary(&[1.0, 0.0], &d), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn top_k_orders_by_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = random_dict(&mut rng, 20, 8);
        let f: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let top = top_k(&f, &d, 4).unwrap();
        assert_eq!(top.len(), 4);
        assert_eq!(top[0], match_dictionary(&f, &d).unwrap());
        assert!(top.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn parses_line_format() {
        let text = "# classes\nperson\n\nbird  # flying\nperson\n  car \n";
        assert_eq!(parse_dictionary_lines(text), vec!["person", "bird", "car"]);
    }

    #[test]
    fn encoded_rows_are_unit() {
        let b = StubBackend::with_dim(32, 0).unwrap();
        let d = Dictionary::encode(DictKind::Attribute, vec!["red".into(), "tall".into()], &b, Exec::Sequential)
            .unwrap();
        assert!(d.embeddings().iter().all(|e| e.is_unit()));
        assert!(Dictionary::from_parts(DictKind::Class, vec!["a".into(), "a".into()], d.embeddings().to_vec()).is_err());
    }

    #[test]
    fn batch_modes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = random_dict(&mut rng, 30, 8);
        let feats: Vec<FeatureVec> = (0..50)
            .map(|_| FeatureVec::new((0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        assert_eq!(
            match_many(&feats, &d, Exec::Sequential).unwrap(),
            match_many(&feats, &d, Exec::Parallel).unwrap()
        );
    }
}

use serde::Serialize;

use super::{BagOfDescriptions, DescriptionEntry, EntryKind, Provenance};
use crate::embedding::cosine_sim;
use crate::error::{Error, Result};

/// A rejected entry with the similarity that failed the threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Discard {
    pub index: usize,
    pub kind: EntryKind,
    pub provenance: Provenance,
    pub text: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationOutcome {
    pub bag: BagOfDescriptions,
    pub discarded: Vec<Discard>,
}

/// Keep exactly the entries with `cos(image_feat, embedding) >= tau_val`,
/// recording each survivor's similarity. Errors when nothing survives.
pub fn validate_bag(raw: &BagOfDescriptions, image_feat: &[f64], tau_val: f64) -> Result<ValidationOutcome> {
    if raw.is_empty() {
        return Err(Error::Empty("bag to validate"));
    }
    let (kept, discarded) = partition(&raw.entries, image_feat, tau_val)?;
    if kept.is_empty() {
        return Err(all_rejected(&discarded, tau_val));
    }
    Ok(ValidationOutcome {
        bag: BagOfDescriptions {
            frame_digest: raw.frame_digest.clone(),
            config: raw.config.clone(),
            entries: kept,
        },
        discarded,
    })
}

pub(crate) fn partition(
    entries: &[DescriptionEntry],
    image_feat: &[f64],
    tau_val: f64,
) -> Result<(Vec<DescriptionEntry>, Vec<Discard>)> {
    let mut kept = Vec::new();
    let mut discarded = Vec::new();
    for (index, entry) in entries.iter().enumerate() {
        let similarity = cosine_sim(image_feat, &entry.embedding)?;
        if similarity >= tau_val {
            let mut e = entry.clone();
            e.sim_to_image = similarity;
            kept.push(e);
        } else {
            discarded.push(Discard {
                index,
                kind: entry.kind,
                provenance: entry.provenance,
                text: entry.text.clone(),
                similarity,
            });
        }
    }
    Ok((kept, discarded))
}

pub(crate) fn all_rejected(discarded: &[Discard], tau_val: f64) -> Error {
    let best = discarded
        .iter()
        .map(|d| d.similarity)
        .fold(f64::NEG_INFINITY, f64::max);
    Error::AllRejected {
        rejected: discarded.len(),
        tau_val,
        best_similarity: best,
    }
}

/// Drop entries whose text appears in `exclusions` (manual review list).
/// Comparison ignores surrounding whitespace and case.
pub fn apply_exclusions(bag: &mut BagOfDescriptions, exclusions: &[String]) -> usize {
    if exclusions.is_empty() {
        return 0;
    }
    let norm = |s: &str| s.trim().to_lowercase();
    let excluded: Vec<String> = exclusions.iter().map(|s| norm(s)).collect();
    let before = bag.entries.len();
    bag.entries.retain(|e| !excluded.contains(&norm(&e.text)));
    before - bag.entries.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bag::BagConfig;
    use crate::embedding::FeatureVec;

    fn entry(text: &str, v: Vec<f64>) -> DescriptionEntry {
        DescriptionEntry {
            kind: EntryKind::Generated,
            text: text.into(),
            provenance: Provenance::Service,
            sim_to_image: 0.0,
            embedding: FeatureVec::new(v).unwrap(),
        }
    }

    /// Unit vector at angle `acos(sim)` from e0.
    fn at_sim(sim: f64) -> Vec<f64> {
        vec![sim, (1.0 - sim * sim).sqrt()]
    }

    #[test]
    fn threshold_is_inclusive() {
        let bag = BagOfDescriptions::new(
            "d",
            BagConfig::default(),
            vec![entry("hi", at_sim(0.85)), entry("edge", vec![0.8, 0.6]), entry("lo", at_sim(0.5))],
        );
        let out = validate_bag(&bag, &[1.0, 0.0], 0.8).unwrap();
        let kept: Vec<&str> = out.bag.entries.iter().map(|e| e.text.as_str()).collect();
        assert_eq!(kept, vec!["hi", "edge"]);
        assert_eq!(out.discarded.len(), 1);
        assert_eq!(out.discarded[0].index, 2);
        assert!((out.bag.entries[0].sim_to_image - 0.85).abs() < 1e-12);
    }

    #[test]
    fn all_rejected_reports_best() {
        let bag = BagOfDescriptions::new("d", BagConfig::default(), vec![entry("a", at_sim(0.3)), entry("b", at_sim(0.6))]);
        match validate_bag(&bag, &[1.0, 0.0], 0.8) {
            Err(Error::AllRejected { rejected: 2, best_similarity, .. }) => {
                assert!((best_similarity - 0.6).abs() < 1e-12)
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn validation_is_idempotent() {
        let bag = BagOfDescriptions::new(
            "d",
            BagConfig::default(),
            (0..10).map(|i| entry(&format!("e{i}"), at_sim(i as f64 / 10.0))).collect(),
        );
        let once = validate_bag(&bag, &[1.0, 0.0], 0.45).unwrap().bag;
        let twice = validate_bag(&once, &[1.0, 0.0], 0.45).unwrap();
        assert_eq!(once, twice.bag);
        assert!(twice.discarded.is_empty());
    }

    #[test]
    fn exclusions_drop_matching_text() {
        let mut bag = BagOfDescriptions::new("d", BagConfig::default(), vec![entry("Keep", at_sim(0.9)), entry("Drop me", at_sim(0.9))]);
        assert_eq!(apply_exclusions(&mut bag, &[" drop ME ".to_string()]), 1);
        assert_eq!(bag.entries.len(), 1);
    }
}

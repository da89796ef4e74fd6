use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dictionary::{match_dictionary, top_k, Dictionary};
use super::enrich::{enrich_semantic_context, EnrichInput};
use super::lexicon::Lexicon;
use super::validate::{all_rejected, apply_exclusions, partition, Discard};
use super::{BagConfig, BagOfDescriptions, DescriptionEntry, EntryKind, Provenance};
use crate::embedding::FeatureVec;
use crate::encoders::{EncoderBackend, GenerativeClient, PROMPT_DESCRIPTION, PROMPT_REGENERATE};
use crate::error::{Error, Result};
use crate::hashing::derive_seed;
use crate::image::ImagePatch;

#[derive(Debug, Clone, Copy)]
pub struct Dictionaries<'a> {
    pub class: &'a Dictionary,
    pub attribute: &'a Dictionary,
}

#[derive(Debug, Clone)]
pub struct BuildOutcome {
    pub bag: BagOfDescriptions,
    /// Every rejection, including failed regenerations.
    pub discarded: Vec<Discard>,
    pub regenerated: usize,
    pub excluded: usize,
    pub warnings: Vec<String>,
    /// Embedding of the boxed target region the bag was validated against.
    pub image_feat: FeatureVec,
}

/// Build the validated bag for the target boxed in `first_frame`:
/// embed, match class and attributes, describe, enrich, validate
/// (regenerating rejected service text a bounded number of times), apply
/// the manual exclusion list. Every entry is encoded exactly once.
pub fn build_bag(
    first_frame: &ImagePatch,
    dicts: Dictionaries<'_>,
    client: &GenerativeClient,
    lex: &dyn Lexicon,
    backend: &dyn EncoderBackend,
    cfg: &BagConfig,
    exclusions: &[String],
) -> Result<BuildOutcome> {
    let bbox = first_frame
        .bbox()
        .ok_or_else(|| Error::InvalidArgument("first frame needs a target box".into()))?;

    let image_feat = first_frame
        .crop_box(&bbox)
        .and_then(|target| backend.encode_image(&target))
        .map_err(|e| Error::stage("embed", e))?;

    let (class_entry, attr_entries) = (|| -> Result<_> {
        let (ci, _) = match_dictionary(&image_feat, dicts.class)?;
        let class = DescriptionEntry {
            kind: EntryKind::Class,
            text: dicts.class.entries()[ci].clone(),
            provenance: Provenance::DictionaryMatch,
            sim_to_image: 0.0,
            embedding: dicts.class.embeddings()[ci].clone(),
        };
        let attrs: Vec<DescriptionEntry> = top_k(&image_feat, dicts.attribute, cfg.top_k_attributes)?
            .into_iter()
            .map(|(ai, _)| DescriptionEntry {
                kind: EntryKind::Attribute,
                text: dicts.attribute.entries()[ai].clone(),
                provenance: Provenance::DictionaryMatch,
                sim_to_image: 0.0,
                embedding: dicts.attribute.embeddings()[ai].clone(),
            })
            .collect();
        Ok((class, attrs))
    })()
    .map_err(|e| Error::stage("match", e))?;

    let description = client
        .generate_description(first_frame, PROMPT_DESCRIPTION)
        .and_then(|d| DescriptionEntry::encode(EntryKind::Generated, Provenance::Service, d, backend))
        .map_err(|e| Error::stage("describe", e))?;

    let attr_texts: Vec<String> = attr_entries.iter().map(|e| e.text.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "perturbation"));
    let enriched = enrich_semantic_context(
        EnrichInput {
            class_name: &class_entry.text,
            attributes: &attr_texts,
            description: &description.text,
            frame: first_frame,
        },
        client,
        lex,
        backend,
        cfg,
        &mut rng,
    )
    .map_err(|e| Error::stage("enrich", e))?;

    let mut raw = vec![class_entry];
    raw.extend(attr_entries);
    raw.push(description);
    raw.extend(enriched.entries);

    let (mut kept, mut discarded) =
        partition(&raw, &image_feat, cfg.tau_val).map_err(|e| Error::stage("validate", e))?;

    let mut regenerated = 0;
    let mut pending: Vec<Discard> = discarded
        .iter()
        .filter(|d| d.provenance.is_generated())
        .cloned()
        .collect();
    for _ in 0..cfg.regeneration_rounds {
        if pending.is_empty() {
            break;
        }
        let mut next = Vec::new();
        for d in &pending {
            let prompt = PROMPT_REGENERATE.replace("{description}", &d.text);
            let entry = client
                .generate_description(first_frame, &prompt)
                .and_then(|t| DescriptionEntry::encode(d.kind, d.provenance, t, backend))
                .map_err(|e| Error::stage("regenerate", e))?;
            regenerated += 1;
            let (ok, bad) = partition(std::slice::from_ref(&entry), &image_feat, cfg.tau_val)
                .map_err(|e| Error::stage("validate", e))?;
            kept.extend(ok);
            for mut b in bad {
                b.index = d.index;
                next.push(b.clone());
                discarded.push(b);
            }
        }
        pending = next;
    }

    let mut bag = BagOfDescriptions::new(format!("{:016x}", first_frame.digest()), cfg.clone(), kept);
    let excluded = apply_exclusions(&mut bag, exclusions);
    if bag.is_empty() {
        return Err(Error::stage("validate", all_rejected(&discarded, cfg.tau_val)));
    }
    bag.sort_by_kind();

    Ok(BuildOutcome {
        bag,
        discarded,
        regenerated,
        excluded,
        warnings: enriched.warnings,
        image_feat,
    })
}

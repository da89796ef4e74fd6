use rand::Rng;

use super::lexicon::{perturb, retrieve_synonyms, Lexicon};
use super::{BagConfig, DescriptionEntry, EntryKind, Provenance};
use crate::encoders::{EncoderBackend, GenerativeClient, PROMPT_CONCEPT, PROMPT_TASK};
use crate::error::Result;
use crate::image::ImagePatch;

/// What the semantic/contextual enrichment starts from.
#[derive(Debug, Clone, Copy)]
pub struct EnrichInput<'a> {
    pub class_name: &'a str,
    pub attributes: &'a [String],
    pub description: &'a str,
    /// First frame with the target box, sent along with service prompts.
    pub frame: &'a ImagePatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnrichOutput {
    pub entries: Vec<DescriptionEntry>,
    pub warnings: Vec<String>,
}

/// Split a list-style service reply into phrases, dropping numbering,
/// bullets and wrapping quotes.
pub(crate) fn parse_phrases(reply: &str) -> Vec<String> {
    reply
        .lines()
        .map(|line| {
            let t = line.trim();
            let t = t.trim_start_matches(|c: char| c.is_ascii_digit());
            let t = t.trim_start_matches(['.', ')', '-', '*', '•', ':']);
            t.trim()
                .trim_matches(|c| c == '"' || c == '\u{201c}' || c == '\u{201d}')
                .trim_end_matches(',')
                .trim_matches(|c| c == '"' || c == '\u{201c}' || c == '\u{201d}')
                .trim()
                .to_string()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

/// Synonyms, perturbed copies, task phrases, their concatenation and a
/// short concept name, in that order. All entries are semantic context.
pub fn enrich_semantic_context<R: Rng + ?Sized>(
    input: EnrichInput<'_>,
    client: &GenerativeClient,
    lex: &dyn Lexicon,
    backend: &dyn EncoderBackend,
    cfg: &BagConfig,
    rng: &mut R,
) -> Result<EnrichOutput> {
    let mut entries = Vec::new();
    let mut warnings = Vec::new();
    let sc = EntryKind::SemanticContext;

    for syn in retrieve_synonyms(input.class_name, lex, cfg.tau_syn, cfg.n_synonyms)? {
        entries.push(DescriptionEntry::encode(sc, Provenance::Synonym, syn, backend)?);
    }

    let originals = std::iter::once(input.class_name)
        .chain(input.attributes.iter().map(String::as_str))
        .chain(std::iter::once(input.description));
    let mut perturbed_texts = Vec::new();
    for original in originals {
        let tokens: Vec<String> = original.split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            continue;
        }
        let text = perturb(&tokens, cfg.alpha, lex, cfg.tau_syn, rng)?.join(" ");
        entries.push(DescriptionEntry::encode(sc, Provenance::Perturbation, text.clone(), backend)?);
        perturbed_texts.push(text);
    }

    let task_prompt = PROMPT_TASK.replace("{class}", input.class_name);
    let phrases = parse_phrases(&client.generate_description(input.frame, &task_prompt)?);
    if phrases.is_empty() {
        warnings.push("task-phrase reply contained no phrases".to_string());
    }
    for p in &phrases {
        entries.push(DescriptionEntry::encode(sc, Provenance::TaskPhrase, p.clone(), backend)?);
    }

    let combined: Vec<&str> = perturbed_texts
        .iter()
        .chain(phrases.iter())
        .map(String::as_str)
        .collect();
    if !combined.is_empty() {
        entries.push(DescriptionEntry::encode(sc, Provenance::Perturbation, combined.join("; "), backend)?);
    }

    let concept_prompt = PROMPT_CONCEPT.replace("{description}", input.description);
    let reply = client.generate_description(input.frame, &concept_prompt)?;
    let first_line = reply.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let words: Vec<&str> = first_line.split_whitespace().collect();
    if words.is_empty() {
        warnings.push("concept reply was empty".to_string());
    } else {
        let keep = cfg.max_concept_words.max(1);
        if words.len() > keep {
            warnings.push(format!(
                "concept {first_line:?} has {} words; truncated to {keep}",
                words.len()
            ));
        }
        let concept = words[..words.len().min(keep)].join(" ");
        entries.push(DescriptionEntry::encode(sc, Provenance::Concept, concept, backend)?);
    }

    Ok(EnrichOutput { entries, warnings })
}

//! Simulated user instructions, vision chain-of-thought generation, and the
//! string-level ID hygiene that keeps every "image N" reference pointing at
//! a real subject.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotate::{render_block, SubjectAnnotation};
use crate::gateway::{Gateway, GatewayError};
use crate::imaging::ImageData;
use crate::rng::derive_seed_indexed;
use crate::templates::TemplateId;

#[derive(Debug, Error)]
pub enum NarrativeError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("chain-of-thought too short: {words} words, minimum {min}")]
    CotTooShort { words: usize, min: usize },
    #[error("instruction invalid: {0}")]
    InstructionInvalid(String),
}

/// A simulated user instruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionText {
    pub text: String,
    pub with_ids: bool,
    pub referenced_ids: BTreeSet<usize>,
}

/// A chain-of-thought reasoning sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoTText {
    pub text: String,
    pub referenced_ids: BTreeSet<usize>,
    pub word_count: usize,
}

/// One `image N` mention found in text, as char offsets.
#[derive(Debug, Clone, Copy, PartialEq)]
struct IdMention {
    /// Char index of the first char of the mention (the `i` of `image`,
    /// or of a preceding `from` when one directly precedes it).
    start: usize,
    /// Char index one past the last digit.
    end: usize,
    /// Char index where the digits start.
    digits_start: usize,
    id: usize,
}

/// Find every `image {k}` token: the word `image` (case-insensitive, not
/// preceded by an alphanumeric char) followed by a single whitespace char
/// and a digit run. A directly preceding `from ` is folded into the span.
fn find_id_mentions(chars: &[char]) -> Vec<IdMention> {
    const WORD: [char; 5] = ['i', 'm', 'a', 'g', 'e'];
    const FROM: [char; 4] = ['f', 'r', 'o', 'm'];
    let mut mentions = Vec::new();
    let mut i = 0usize;
    while i + WORD.len() < chars.len() {
        let word_matches = chars[i..i + WORD.len()]
            .iter()
            .zip(WORD.iter())
            .all(|(c, w)| c.to_ascii_lowercase() == *w);
        let boundary_ok = i == 0 || !chars[i - 1].is_alphanumeric();
        if !(word_matches && boundary_ok) {
            i += 1;
            continue;
        }
        let ws = i + WORD.len();
        if !(chars[ws].is_whitespace() && ws + 1 < chars.len() && chars[ws + 1].is_ascii_digit()) {
            i += 1;
            continue;
        }
        let digits_start = ws + 1;
        let mut digits_end = digits_start;
        while digits_end < chars.len() && chars[digits_end].is_ascii_digit() {
            digits_end += 1;
        }
        let id: usize = chars[digits_start..digits_end]
            .iter()
            .collect::<String>()
            .parse()
            .unwrap_or(usize::MAX);
        // Fold a directly preceding "from " into the span.
        let mut start = i;
        if i >= 5 {
            let prefix_matches = chars[i - 5..i - 1]
                .iter()
                .zip(FROM.iter())
                .all(|(c, w)| c.to_ascii_lowercase() == *w);
            let from_boundary = i == 5 || !chars[i - 6].is_alphanumeric();
            if prefix_matches && chars[i - 1].is_whitespace() && from_boundary {
                start = i - 5;
            }
        }
        mentions.push(IdMention { start, end: digits_end, digits_start, id });
        i = digits_end;
    }
    mentions
}

/// Collect every subject id referenced as `image {k}` in the text.
pub fn extract_ids(text: &str) -> BTreeSet<usize> {
    let chars: Vec<char> = text.chars().collect();
    find_id_mentions(&chars).into_iter().map(|m| m.id).collect()
}

/// Remove every `image {k}` reference whose id is not in `valid_ids`,
/// together with one adjacent space. A `from` directly preceding the
/// reference is removed with it. Applied to a fixpoint so the result is
/// idempotent even when a deletion butts two fragments into a new match.
pub fn sanitize_ids(text: &str, valid_ids: &BTreeSet<usize>) -> String {
    let mut current: Vec<char> = text.chars().collect();
    loop {
        let mentions = find_id_mentions(&current);
        let invalid: Vec<IdMention> =
            mentions.into_iter().filter(|m| !valid_ids.contains(&m.id)).collect();
        if invalid.is_empty() {
            return current.into_iter().collect();
        }
        let mut out: Vec<char> = Vec::with_capacity(current.len());
        let mut cursor = 0usize;
        for m in &invalid {
            if m.start < cursor {
                continue;
            }
            let mut start = m.start;
            let mut end = m.end;
            // Delete one adjacent space: prefer the one before the span.
            if start > cursor && current[start - 1] == ' ' {
                start -= 1;
            } else if end < current.len() && current[end] == ' ' {
                end += 1;
            }
            out.extend_from_slice(&current[cursor..start]);
            cursor = end;
        }
        out.extend_from_slice(&current[cursor..]);
        current = out;
    }
}

/// Split text into sentences. A sentence ends at a run of `.?!` followed by
/// whitespace (the whitespace stays with the sentence), or at end of text.
fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut sentences = Vec::new();
    let mut start = 0usize;
    let mut i = 0usize;
    while i < chars.len() {
        if matches!(chars[i], '.' | '?' | '!') {
            let mut j = i;
            while j < chars.len() && matches!(chars[j], '.' | '?' | '!') {
                j += 1;
            }
            if j >= chars.len() || chars[j].is_whitespace() {
                while j < chars.len() && chars[j].is_whitespace() {
                    j += 1;
                }
                sentences.push(chars[start..j].iter().collect());
                start = j;
                i = j;
                continue;
            }
            i = j;
            continue;
        }
        i += 1;
    }
    if start < chars.len() {
        sentences.push(chars[start..].iter().collect());
    }
    sentences
}

/// Rewrite subject ids after a subject-set change. Sentences whose only
/// subject references are removed ids are deleted whole; in mixed
/// sentences the removed references are deleted phrase-wise; surviving
/// `image {old}` tokens are renumbered through `id_map` in a single pass.
pub fn remap_ids(
    text: &str,
    id_map: &BTreeMap<usize, usize>,
    removed: &BTreeSet<usize>,
) -> String {
    let survivors: BTreeSet<usize> = id_map.keys().copied().collect();
    let mut out = String::new();
    for sentence in split_sentences(text) {
        let ids = extract_ids(&sentence);
        if !ids.is_empty() && ids.iter().all(|id| removed.contains(id)) {
            continue;
        }
        let cleaned = sanitize_ids(&sentence, &survivors);
        out.push_str(&renumber_mentions(&cleaned, id_map));
    }
    out
}

fn renumber_mentions(text: &str, id_map: &BTreeMap<usize, usize>) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mentions = find_id_mentions(&chars);
    let mut out = String::new();
    let mut cursor = 0usize;
    for m in &mentions {
        let Some(new_id) = id_map.get(&m.id) else { continue };
        out.extend(chars[cursor..m.digits_start].iter());
        out.push_str(&new_id.to_string());
        cursor = m.end;
    }
    out.extend(chars[cursor..].iter());
    out
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Generate a simulated user instruction from the annotated target.
///
/// In with-ids mode every subject should be referenced at least once; a
/// response that misses subjects (or that emits ids in no-ids mode) is
/// regenerated once, then sanitized. A with-ids instruction that ends up
/// referencing no valid subject at all is rejected.
pub fn gen_instruction(
    gateway: &Gateway,
    target: &ImageData,
    annotations: &[SubjectAnnotation],
    with_ids: bool,
    seed: u64,
) -> Result<InstructionText, NarrativeError> {
    if annotations.is_empty() {
        return Err(NarrativeError::InstructionInvalid("no subjects to describe".into()));
    }
    let valid_ids: BTreeSet<usize> = annotations.iter().map(|a| a.id).collect();
    let classes: Vec<&str> = annotations.iter().map(|a| a.category.as_str()).collect();
    let template =
        if with_ids { TemplateId::InstructionWithIds } else { TemplateId::InstructionWithoutIds };
    let prompt = format!(
        "{}\n\n{}",
        template.fill(&[("classes_str", &classes.join(", "))]),
        render_block(annotations)
    );

    let attempts = 2;
    let mut text = String::new();
    for attempt in 0..attempts {
        text = gateway.analyze_image(
            &[target],
            &prompt,
            derive_seed_indexed(seed, "instruction", attempt),
        )?;
        let ids = extract_ids(&text);
        let acceptable = if with_ids {
            valid_ids.iter().all(|id| ids.contains(id))
        } else {
            ids.is_empty()
        };
        if acceptable {
            break;
        }
    }

    let sanitized =
        if with_ids { sanitize_ids(&text, &valid_ids) } else { sanitize_ids(&text, &BTreeSet::new()) };
    let referenced_ids = extract_ids(&sanitized);
    if with_ids && referenced_ids.is_empty() {
        return Err(NarrativeError::InstructionInvalid(
            "with-ids instruction references no valid subject".into(),
        ));
    }
    Ok(InstructionText { text: sanitized, with_ids, referenced_ids })
}

/// Generate the chain-of-thought for an instruction. Under-length responses
/// are regenerated twice before the scene is failed.
pub fn gen_cot(
    gateway: &Gateway,
    instruction: &InstructionText,
    target: &ImageData,
    annotations: &[SubjectAnnotation],
    min_words: usize,
    seed: u64,
) -> Result<CoTText, NarrativeError> {
    let valid_ids: BTreeSet<usize> = annotations.iter().map(|a| a.id).collect();
    let prompt = format!(
        "{}\n\n{}",
        TemplateId::CotGeneration.fill(&[("initial_prompt", &instruction.text)]),
        render_block(annotations)
    );

    let attempts = 3; // initial try plus two regenerations
    let mut last_words = 0;
    for attempt in 0..attempts {
        let text =
            gateway.analyze_image(&[target], &prompt, derive_seed_indexed(seed, "cot", attempt))?;
        let sanitized = sanitize_ids(&text, &valid_ids);
        let words = word_count(&sanitized);
        if words >= min_words {
            let referenced_ids = extract_ids(&sanitized);
            return Ok(CoTText { text: sanitized, referenced_ids, word_count: words });
        }
        last_words = words;
    }
    Err(NarrativeError::CotTooShort { words: last_words, min: min_words })
}

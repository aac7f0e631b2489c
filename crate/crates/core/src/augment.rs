//! Dataset enrichment: the category-similarity dictionary behind complex
//! transform prompts, and subject-count reduction with instruction
//! rewriting.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Gateway, GatewayError};
use crate::layout::{assign_patches, serialize_layout, PlacedSubject};
use crate::narrative::{extract_ids, remap_ids, word_count, CoTText, InstructionText};
use crate::rng::derive_seed_indexed;
use crate::store::TrainingRecord;
use crate::templates::TemplateId;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("similarity dictionary build failed: {0}")]
    DictBuild(#[from] GatewayError),
    #[error("record {scene_id}: {detail}")]
    BadRecord { scene_id: String, detail: String },
}

/// Maps a category to an ordered list of semantically related categories.
/// No category maps to itself, and every related category is a vocabulary
/// entry.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimilarityDict {
    pub entries: BTreeMap<String, Vec<String>>,
}

impl SimilarityDict {
    pub fn related(&self, category: &str) -> Option<&[String]> {
        self.entries.get(category).map(Vec::as_slice)
    }

    pub fn check_invariants(&self, vocabulary: &[String]) -> Result<(), String> {
        for (key, related) in &self.entries {
            for class in related {
                if class.eq_ignore_ascii_case(key) {
                    return Err(format!("{key:?} maps to itself"));
                }
                if !vocabulary.contains(class) {
                    return Err(format!("{key:?} maps to unknown class {class:?}"));
                }
            }
        }
        Ok(())
    }
}

/// Ask the text model for related categories per vocabulary entry. Replies
/// that violate the invariants (self-references, classes outside the
/// vocabulary) are dropped; a category whose reply yields nothing valid is
/// omitted from the dictionary.
pub fn build_similarity_dict(
    gateway: &Gateway,
    categories: &[String],
    related_count: usize,
    seed: u64,
) -> Result<SimilarityDict, AugmentError> {
    let pool = categories.join(", ");
    let mut entries = BTreeMap::new();
    for (i, category) in categories.iter().enumerate() {
        let prompt = TemplateId::SimilarityDict.fill(&[
            ("class_name", category.as_str()),
            ("count", &related_count.to_string()),
            ("pool", &pool),
        ]);
        let reply =
            gateway.generate_text(&prompt, derive_seed_indexed(seed, "simdict", i as u64))?;
        let related: Vec<String> = reply
            .split(',')
            .map(|c| c.trim().to_string())
            .filter(|c| !c.is_empty())
            .filter(|c| !c.eq_ignore_ascii_case(category))
            .filter(|c| categories.contains(c))
            .collect();
        if !related.is_empty() {
            entries.insert(category.clone(), related);
        }
    }
    Ok(SimilarityDict { entries })
}

/// Derive reduced-subject records: repeatedly remove the subject with the
/// smallest box area (ties broken by removing the higher subject id) until
/// two subjects remain, renumbering survivors and rewriting the instruction
/// and chain-of-thought at each step. A record with S subjects yields
/// max(S-2, 0) derived records with subject counts S-1 down to 2.
pub fn reduce_subjects(
    record: &TrainingRecord,
    rewrite_cot: bool,
) -> Result<Vec<TrainingRecord>, AugmentError> {
    let mut derived = Vec::new();
    let mut current = record.clone();
    let mut step: u32 = 1;
    while current.subjects.len() > 2 {
        current = reduce_once(&current, record, step, rewrite_cot)?;
        derived.push(current.clone());
        step += 1;
    }
    Ok(derived)
}

fn reduce_once(
    current: &TrainingRecord,
    base: &TrainingRecord,
    step: u32,
    rewrite_cot: bool,
) -> Result<TrainingRecord, AugmentError> {
    let bad = |detail: String| AugmentError::BadRecord {
        scene_id: base.scene_id.clone(),
        detail,
    };

    // Smallest area loses; equal areas drop the higher subject id.
    let victim = current
        .subjects
        .iter()
        .enumerate()
        .min_by(|(ia, a), (ib, b)| {
            a.bbox.area().cmp(&b.bbox.area()).then(ib.cmp(ia))
        })
        .map(|(i, _)| i)
        .ok_or_else(|| bad("no subjects".into()))?;

    let removed: BTreeSet<usize> = [victim].into_iter().collect();
    let mut id_map = BTreeMap::new();
    let mut subjects = Vec::with_capacity(current.subjects.len() - 1);
    let mut subject_images = Vec::with_capacity(current.subjects.len() - 1);
    for subject in &current.subjects {
        if subject.subject_id == victim {
            continue;
        }
        let new_id = subjects.len();
        id_map.insert(subject.subject_id, new_id);
        let mut survivor = subject.clone();
        survivor.subject_id = new_id;
        subject_images.push(current.subject_images[subject.subject_id].clone());
        subjects.push(survivor);
    }

    let instruction_text = remap_ids(&current.instruction.text, &id_map, &removed);
    let instruction = InstructionText {
        referenced_ids: extract_ids(&instruction_text),
        text: instruction_text,
        with_ids: current.instruction.with_ids,
    };
    let cot = if rewrite_cot {
        let cot_text = remap_ids(&current.cot.text, &id_map, &removed);
        CoTText {
            referenced_ids: extract_ids(&cot_text),
            word_count: word_count(&cot_text),
            text: cot_text,
        }
    } else {
        current.cot.clone()
    };

    let placed: Vec<PlacedSubject> = subjects
        .iter()
        .map(|s| {
            s.region().map(|region| PlacedSubject { category: s.category.clone(), region })
        })
        .collect::<Result<_, _>>()
        .map_err(bad)?;
    let grid = assign_patches(
        &placed,
        current.width,
        current.height,
        current.provenance.config.m,
        current.provenance.config.lambda,
    )
    .map_err(|e| bad(e.to_string()))?;

    let mut provenance = current.provenance.clone();
    provenance.parent_scene_id = Some(base.scene_id.clone());
    provenance.derivation_step = Some(step);

    Ok(TrainingRecord {
        scene_id: format!("{}_d{step:02}", base.scene_id),
        width: current.width,
        height: current.height,
        subject_images,
        target_image: current.target_image.clone(),
        instruction,
        cot,
        layout_prompt: serialize_layout(&grid),
        subjects,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::MockConfig;
    use crate::gateway::{ModelBackend, ModelRequest, ModelResponse, ModelRole};

    #[test]
    fn dict_entries_obey_invariants() {
        let gateway = Gateway::mock(MockConfig::default());
        let vocab: Vec<String> =
            ["chair", "stool", "bench", "couch", "bottle", "cup", "glass", "jar"]
                .iter()
                .map(|s| s.to_string())
                .collect();
        let dict = build_similarity_dict(&gateway, &vocab, 3, 11).unwrap();
        assert!(!dict.entries.is_empty());
        dict.check_invariants(&vocab).unwrap();
        let again = build_similarity_dict(&gateway, &vocab, 3, 11).unwrap();
        assert_eq!(dict, again);
    }

    #[test]
    fn scripted_replies_parse_into_expected_entries() {
        struct Scripted;
        impl ModelBackend for Scripted {
            fn call(&self, request: &ModelRequest) -> Result<ModelResponse, crate::gateway::GatewayError> {
                let ModelRequest::GenerateText { prompt, .. } = request else { unreachable!() };
                let reply = if prompt.contains("\"Chair\"") {
                    "Stool, Bench, Couch"
                } else if prompt.contains("\"Bottle\"") {
                    "Cup, Glass, Jar"
                } else {
                    // A self-reference that must be filtered out.
                    "Stool, Stool"
                };
                Ok(ModelResponse::Text(reply.to_string()))
            }
            fn backend_id(&self) -> String {
                "scripted".into()
            }
        }
        let gateway = Gateway::mock(MockConfig::default())
            .with_backend(ModelRole::TextGen, std::sync::Arc::new(Scripted));
        let vocab: Vec<String> =
            ["Chair", "Stool", "Bench", "Couch", "Bottle", "Cup", "Glass", "Jar"]
                .iter()
                .map(|s| s.to_string())
                .collect();
        let dict = build_similarity_dict(&gateway, &vocab, 3, 0).unwrap();
        assert_eq!(
            dict.related("Chair").unwrap(),
            &["Stool".to_string(), "Bench".to_string(), "Couch".to_string()]
        );
        assert_eq!(
            dict.related("Bottle").unwrap(),
            &["Cup".to_string(), "Glass".to_string(), "Jar".to_string()]
        );
        // "Stool" got only a self-reference back; the valid remainder keeps
        // the entry, the self-reference itself is gone.
        if let Some(related) = dict.related("Stool") {
            assert!(!related.iter().any(|c| c.eq_ignore_ascii_case("Stool")));
        }
    }
}

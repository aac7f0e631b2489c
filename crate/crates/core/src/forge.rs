//! Scene synthesis: category sampling, caption and target-image
//! generation, detection post-processing, box verification, segmentation
//! and layout planning, subject transforms, and narrative assembly.
//!
//! Scenes are independent: everything a scene does is keyed off its own
//! seed, so a batch is a data-parallel map followed by an ordered commit.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::annotate::{render_block, SubjectAnnotation};
use crate::augment::SimilarityDict;
use crate::gateway::{Detection, Gateway, GatewayError, ModelRole};
use crate::geometry::{passes_area_filter, RasterMask, Region};
use crate::imaging::{crop_decoded, crop_masked_decoded, ImageData};
use crate::layout::{assign_patches, choose_region_mode, serialize_layout, PlacedSubject, RegionMode};
use crate::narrative::{gen_cot, gen_instruction, NarrativeError};
use crate::rng::{derive_seed, derive_seed_indexed, Rng};
use crate::store::{
    ConfigSnapshot, PipelineStats, Provenance, RecordSink, Stage, StoreError, SubjectRecord,
    TrainingRecord, TransformKind,
};
use crate::templates::TemplateId;

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Per-stage scene failure probabilities for accounting experiments. Each
/// stage draws independently from a scene-keyed stream, so measured rates
/// converge to the injected ones over many scenes.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FaultProfile {
    pub t2i_mismatch: f64,
    pub ovd_verify: f64,
    pub vlm_validation: f64,
    pub segmentation: f64,
}

#[derive(Debug, Clone)]
pub struct ForgeConfig {
    pub n_min: u32,
    pub n_max: u32,
    pub delta: f64,
    pub m: u32,
    pub lambda: f64,
    pub complex_prob: f64,
    pub with_ids_ratio: f64,
    pub cot_min_words: usize,
    pub caption_attempts: u32,
    pub fault_profile: Option<FaultProfile>,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        Self {
            n_min: 1,
            n_max: 12,
            delta: 0.01,
            m: 8,
            lambda: 0.05,
            complex_prob: 0.3,
            with_ids_ratio: 0.5,
            cot_min_words: 30,
            caption_attempts: 3,
            fault_profile: None,
        }
    }
}

impl ForgeConfig {
    pub fn validate(&self, vocabulary_len: usize) -> Result<(), ForgeError> {
        if self.n_min < 1 || self.n_min > self.n_max {
            return Err(ForgeError::InvalidConfig(format!(
                "need 1 <= n_min <= n_max, got {} and {}",
                self.n_min, self.n_max
            )));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(ForgeError::InvalidConfig(format!("delta {} outside [0,1]", self.delta)));
        }
        if self.lambda < 0.0 {
            return Err(ForgeError::InvalidConfig(format!("lambda {} negative", self.lambda)));
        }
        if self.m < 1 {
            return Err(ForgeError::InvalidConfig("grid side must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.complex_prob) || !(0.0..=1.0).contains(&self.with_ids_ratio)
        {
            return Err(ForgeError::InvalidConfig("probabilities must lie in [0,1]".into()));
        }
        if vocabulary_len < 2 * self.n_max as usize {
            return Err(ForgeError::InvalidConfig(format!(
                "vocabulary of {} categories is smaller than 2 * n_max = {}",
                vocabulary_len,
                2 * self.n_max
            )));
        }
        Ok(())
    }

    pub fn snapshot(&self) -> ConfigSnapshot {
        ConfigSnapshot {
            n_min: self.n_min,
            n_max: self.n_max,
            delta: self.delta,
            m: self.m,
            lambda: self.lambda,
            complex_prob: self.complex_prob,
            with_ids_ratio: self.with_ids_ratio,
        }
    }
}

/// One scene's identity within a run.
#[derive(Debug, Clone)]
pub struct ScenePlan {
    pub index: u64,
    pub scene_id: String,
    pub seed: u64,
}

impl ScenePlan {
    pub fn for_indices(global_seed: u64, indices: impl Iterator<Item = u64>) -> Vec<ScenePlan> {
        indices
            .map(|index| ScenePlan {
                index,
                scene_id: format!("scene_{index:06}"),
                seed: derive_seed_indexed(global_seed, "scene", index),
            })
            .collect()
    }
}

/// A fully processed scene ready to commit.
#[derive(Debug)]
pub struct SceneOutput {
    pub record: TrainingRecord,
    pub images: Vec<(String, ImageData)>,
}

#[derive(Debug)]
pub struct SceneFailure {
    pub scene_id: String,
    pub stage: Stage,
    pub detail: String,
}

/// Composed scene before detection: the sampled candidate pool, the
/// caption-selected subset, and the synthesized target image.
#[derive(Debug, Clone)]
pub struct SceneDraft {
    pub scene_id: String,
    pub candidate_categories: Vec<String>,
    pub chosen_categories: Vec<String>,
    pub caption: String,
    pub target_image: ImageData,
    pub rng_seed: u64,
}

/// Mid-pipeline scene state between detection and record assembly.
struct SubjectDraft {
    category: String,
    bbox: crate::geometry::BBox,
    score: f64,
    mask: RasterMask,
    region_mode: RegionMode,
    crop: ImageData,
    transformed: Option<ImageData>,
    transform_kind: TransformKind,
    template: TemplateId,
}

/// Draw `k` in `[2*n_min, 2*n_max]` and sample that many distinct
/// categories without replacement.
pub fn sample_candidates(
    vocabulary: &[String],
    n_min: u32,
    n_max: u32,
    seed: u64,
) -> Result<Vec<String>, ForgeError> {
    if vocabulary.len() < 2 * n_max as usize {
        return Err(ForgeError::InvalidConfig(format!(
            "vocabulary of {} categories cannot cover 2 * n_max = {}",
            vocabulary.len(),
            2 * n_max
        )));
    }
    let mut rng = Rng::new(derive_seed(seed, "candidates"));
    let k = rng.next_range(2 * n_min as u64, 2 * n_max as u64) as usize;
    Ok(rng.choose_indices(vocabulary.len(), k).into_iter().map(|i| vocabulary[i].clone()).collect())
}

/// Candidate categories the caption actually mentions, in candidate order.
pub fn mentioned_categories(caption: &str, candidates: &[String]) -> Vec<String> {
    let lowered = caption.to_lowercase();
    candidates.iter().filter(|c| lowered.contains(&c.to_lowercase())).cloned().collect()
}

/// Generate a caption over the candidate pool and synthesize the target
/// image. The text model chooses the scene's classes implicitly: a caption
/// must mention at least half of the candidates or it is regenerated, up to
/// the configured attempt cap.
pub fn compose_scene(
    gateway: &Gateway,
    scene_id: &str,
    candidates: Vec<String>,
    config: &ForgeConfig,
    seed: u64,
) -> Result<SceneDraft, SceneFailure> {
    let fail = |detail: String| SceneFailure {
        scene_id: scene_id.to_string(),
        stage: Stage::T2iMismatch,
        detail,
    };
    let caption_prompt =
        TemplateId::CaptionGeneration.fill(&[("classes_str", &candidates.join(", "))]);
    let minimum_chosen = candidates.len().div_ceil(2);
    let mut caption = String::new();
    let mut chosen: Vec<String> = Vec::new();
    let mut caption_ok = false;
    for attempt in 0..config.caption_attempts {
        caption = gateway
            .generate_text(&caption_prompt, derive_seed_indexed(seed, "caption", attempt as u64))
            .map_err(|e| fail(e.to_string()))?;
        chosen = mentioned_categories(&caption, &candidates);
        if chosen.len() >= minimum_chosen {
            caption_ok = true;
            break;
        }
    }
    if !caption_ok {
        return Err(fail(format!(
            "caption mentions {} of {} candidates after {} attempts",
            chosen.len(),
            candidates.len(),
            config.caption_attempts
        )));
    }
    let target_image = gateway
        .generate_image(&caption, derive_seed(seed, "t2i"))
        .map_err(|e| fail(e.to_string()))?;
    Ok(SceneDraft {
        scene_id: scene_id.to_string(),
        candidate_categories: candidates,
        chosen_categories: chosen,
        caption,
        target_image,
        rng_seed: seed,
    })
}

/// Diversity-then-size subject selection: after the area filter, pick
/// round-robin over categories (in first-appearance order), largest box
/// first within each category, stopping at `n_max`. Duplicates of a
/// category are admitted only once every category has a representative.
pub fn select_subjects(
    detections: &[Detection],
    image_w: u32,
    image_h: u32,
    delta: f64,
    n_max: u32,
) -> Vec<Detection> {
    let surviving: Vec<&Detection> = detections
        .iter()
        .filter(|d| passes_area_filter(&d.bbox, image_w, image_h, delta))
        .collect();

    let mut category_order: Vec<&str> = Vec::new();
    for d in &surviving {
        if !category_order.contains(&d.category.as_str()) {
            category_order.push(&d.category);
        }
    }
    let mut grouped: Vec<Vec<&Detection>> = category_order
        .iter()
        .map(|cat| {
            let mut group: Vec<&Detection> =
                surviving.iter().filter(|d| d.category == *cat).copied().collect();
            group.sort_by_key(|d| std::cmp::Reverse(d.bbox.area()));
            group
        })
        .collect();

    let mut selected = Vec::new();
    let mut round = 0usize;
    while selected.len() < n_max as usize {
        let mut took_any = false;
        for group in &mut grouped {
            if round < group.len() {
                selected.push(group[round].clone());
                took_any = true;
                if selected.len() == n_max as usize {
                    break;
                }
            }
        }
        if !took_any {
            break;
        }
        round += 1;
    }
    selected
}

/// Ask the vision-language model to judge the annotated boxes; drop the
/// ones it rejects. The reply is either `OK` or `REMOVE: <ids>`.
pub fn verify_subjects(
    gateway: &Gateway,
    target: &ImageData,
    selected: &[Detection],
    seed: u64,
) -> Result<Vec<Detection>, GatewayError> {
    let annotations: Vec<SubjectAnnotation> = selected
        .iter()
        .enumerate()
        .map(|(i, d)| SubjectAnnotation {
            id: i,
            category: d.category.clone(),
            bbox: d.bbox,
            score: d.score,
        })
        .collect();
    let prompt = TemplateId::BoxVerification.fill(&[("annotations", &render_block(&annotations))]);
    let reply = gateway.analyze_image(&[target], &prompt, seed)?;
    let reply = reply.trim();
    if reply == "OK" {
        return Ok(selected.to_vec());
    }
    let Some(list) = reply.strip_prefix("REMOVE:") else {
        return Err(GatewayError::Protocol {
            role: ModelRole::VisionLanguage,
            detail: format!("unrecognized verification reply {reply:?}"),
        });
    };
    let mut rejected = BTreeSet::new();
    for token in list.split(',') {
        let token = token.trim();
        if token.is_empty() {
            continue;
        }
        let id: usize = token.parse().map_err(|_| GatewayError::Protocol {
            role: ModelRole::VisionLanguage,
            detail: format!("bad id {token:?} in verification reply"),
        })?;
        rejected.insert(id);
    }
    Ok(selected
        .iter()
        .enumerate()
        .filter(|(i, _)| !rejected.contains(i))
        .map(|(_, d)| d.clone())
        .collect())
}

/// Build the image-to-image prompt for one subject. Complex mode samples
/// one of the multi-object templates plus 1-3 related classes from the
/// similarity dictionary; a subject whose category has no dictionary entry
/// falls back to the simple perspective prompt.
pub fn transform_prompt(
    category: &str,
    want_complex: bool,
    simdict: &SimilarityDict,
    seed: u64,
) -> (String, TransformKind, TemplateId) {
    let related = simdict.related(category).unwrap_or(&[]);
    if !want_complex || related.is_empty() {
        let prompt = TemplateId::TransformSimple.fill(&[("class_name", category)]);
        return (prompt, TransformKind::Simple, TemplateId::TransformSimple);
    }
    let mut rng = Rng::new(derive_seed(seed, "transform-prompt"));
    let take = 1 + rng.next_below(related.len().min(3) as u64) as usize;
    let picks: Vec<&str> = rng
        .choose_indices(related.len(), take)
        .into_iter()
        .map(|i| related[i].as_str())
        .collect();
    let (template, bindings): (TemplateId, Vec<(&str, &str)>) = match picks.len() {
        1 => (
            TemplateId::TransformComplexOne,
            vec![("class_name", category), ("random_class", picks[0])],
        ),
        2 => (
            TemplateId::TransformComplexTwo,
            vec![
                ("class_name", category),
                ("random_class_1", picks[0]),
                ("random_class_2", picks[1]),
            ],
        ),
        _ => (
            TemplateId::TransformComplexThree,
            vec![
                ("class_name", category),
                ("random_class_1", picks[0]),
                ("random_class_2", picks[1]),
                ("random_class_3", picks[2]),
            ],
        ),
    };
    (template.fill(&bindings), TransformKind::Complex, template)
}

struct FaultDraws {
    t2i_mismatch: bool,
    ovd_verify: bool,
    vlm_validation: bool,
    segmentation: bool,
}

impl FaultDraws {
    fn draw(profile: Option<&FaultProfile>, scene_seed: u64) -> Self {
        let roll = |label: &str, rate: f64| {
            rate > 0.0 && Rng::new(derive_seed(scene_seed, label)).next_bool(rate)
        };
        match profile {
            None => Self {
                t2i_mismatch: false,
                ovd_verify: false,
                vlm_validation: false,
                segmentation: false,
            },
            Some(p) => Self {
                t2i_mismatch: roll("fault-t2i", p.t2i_mismatch),
                ovd_verify: roll("fault-ovd", p.ovd_verify),
                vlm_validation: roll("fault-vlm", p.vlm_validation),
                segmentation: roll("fault-seg", p.segmentation),
            },
        }
    }
}

pub struct ForgeContext<'a> {
    pub gateway: &'a Gateway,
    pub vocabulary: &'a [String],
    pub simdict: &'a SimilarityDict,
    pub config: &'a ForgeConfig,
    pub global_seed: u64,
}

/// Run the full pipeline for one scene.
pub fn run_scene(ctx: &ForgeContext, plan: &ScenePlan) -> Result<SceneOutput, SceneFailure> {
    let seed = plan.seed;
    let fail = |stage: Stage, detail: String| SceneFailure {
        scene_id: plan.scene_id.clone(),
        stage,
        detail,
    };
    let faults = FaultDraws::draw(ctx.config.fault_profile.as_ref(), seed);
    let mut template_ids: Vec<TemplateId> = Vec::new();
    let note_template = |ids: &mut Vec<TemplateId>, id: TemplateId| {
        if !ids.contains(&id) {
            ids.push(id);
        }
    };

    // Stage: caption + target image.
    if faults.t2i_mismatch {
        return Err(fail(Stage::T2iMismatch, "injected fault".into()));
    }
    let candidates = sample_candidates(ctx.vocabulary, ctx.config.n_min, ctx.config.n_max, seed)
        .map_err(|e| fail(Stage::T2iMismatch, e.to_string()))?;
    note_template(&mut template_ids, TemplateId::CaptionGeneration);
    let draft = compose_scene(ctx.gateway, &plan.scene_id, candidates, ctx.config, seed)?;
    let target = draft.target_image.clone();

    // Stage: detection, area filter, diversity selection.
    let detections = ctx
        .gateway
        .detect(&target, ctx.vocabulary, derive_seed(seed, "detect"))
        .map_err(|e| fail(Stage::DetectionSparse, e.to_string()))?;
    let selected = select_subjects(
        &detections,
        target.width,
        target.height,
        ctx.config.delta,
        ctx.config.n_max,
    );
    if selected.len() < 2 {
        return Err(fail(
            Stage::DetectionSparse,
            format!("{} subjects survive the area filter", selected.len()),
        ));
    }

    // Stage: box verification.
    if faults.ovd_verify {
        return Err(fail(Stage::OvdVerify, "injected fault".into()));
    }
    note_template(&mut template_ids, TemplateId::BoxVerification);
    let verified = verify_subjects(ctx.gateway, &target, &selected, derive_seed(seed, "verify"))
        .map_err(|e| fail(Stage::OvdVerify, e.to_string()))?;
    if verified.is_empty() {
        return Err(fail(Stage::OvdVerify, "verifier rejected every box".into()));
    }

    // Stage: segmentation, region-mode choice, layout assignment.
    if faults.segmentation {
        return Err(fail(Stage::Segmentation, "injected fault".into()));
    }
    let target_pixels = target
        .decode_rgb()
        .map_err(|e| fail(Stage::Segmentation, e.to_string()))?;
    let mut drafts: Vec<SubjectDraft> = Vec::with_capacity(verified.len());
    for (i, detection) in verified.iter().enumerate() {
        let mask = ctx
            .gateway
            .segment(&target, &detection.bbox, derive_seed_indexed(seed, "segment", i as u64))
            .map_err(|e| fail(Stage::Segmentation, e.to_string()))?;
        let crop = crop_decoded(&target_pixels, &detection.bbox)
            .map_err(|e| fail(Stage::Segmentation, e.to_string()))?;
        let masked_crop = crop_masked_decoded(&target_pixels, &detection.bbox, &mask)
            .map_err(|e| fail(Stage::Segmentation, e.to_string()))?;
        let class_vec = ctx
            .gateway
            .embed_text(&detection.category)
            .map_err(|e| fail(Stage::Segmentation, e.to_string()))?;
        let mask_vec = ctx
            .gateway
            .embed_image(&masked_crop)
            .map_err(|e| fail(Stage::Segmentation, e.to_string()))?;
        let unmask_vec = ctx
            .gateway
            .embed_image(&crop)
            .map_err(|e| fail(Stage::Segmentation, e.to_string()))?;
        let region_mode = choose_region_mode(&class_vec, &mask_vec, &unmask_vec)
            .map_err(|e| fail(Stage::Segmentation, e.to_string()))?;
        drafts.push(SubjectDraft {
            category: detection.category.clone(),
            bbox: detection.bbox,
            score: detection.score,
            mask,
            region_mode,
            crop,
            transformed: None,
            transform_kind: TransformKind::Simple,
            template: TemplateId::TransformSimple,
        });
    }
    let placed: Vec<PlacedSubject> = drafts
        .iter()
        .map(|d| PlacedSubject {
            category: d.category.clone(),
            region: match d.region_mode {
                RegionMode::Mask => Region::Mask(d.mask.clone()),
                RegionMode::Box => Region::Box(d.bbox),
            },
        })
        .collect();
    let grid = assign_patches(&placed, target.width, target.height, ctx.config.m, ctx.config.lambda)
        .map_err(|e| fail(Stage::Segmentation, e.to_string()))?;
    let layout_prompt = serialize_layout(&grid);

    // Stage: similarity-dictionary availability for complex transforms.
    // Entries are validated at build time; a missing entry downgrades the
    // subject to a simple transform rather than failing the scene, so this
    // stage only fails under injected faults.

    // Stage: per-subject view transforms.
    for (i, draft) in drafts.iter_mut().enumerate() {
        let want_complex =
            Rng::new(derive_seed_indexed(seed, "transform-mode", i as u64))
                .next_bool(ctx.config.complex_prob);
        let (prompt, kind, template) = transform_prompt(
            &draft.category,
            want_complex,
            ctx.simdict,
            derive_seed_indexed(seed, "transform", i as u64),
        );
        note_template(&mut template_ids, template);
        let transformed = ctx
            .gateway
            .transform_image(&draft.crop, &prompt, derive_seed_indexed(seed, "transform", i as u64))
            .map_err(|e| fail(Stage::Transform, e.to_string()))?;
        draft.transformed = Some(transformed);
        draft.transform_kind = kind;
        draft.template = template;
    }

    // Stage: simulated user instruction with ID hygiene.
    if faults.vlm_validation {
        return Err(fail(Stage::VlmValidation, "injected fault".into()));
    }
    let annotations: Vec<SubjectAnnotation> = drafts
        .iter()
        .enumerate()
        .map(|(i, d)| SubjectAnnotation {
            id: i,
            category: d.category.clone(),
            bbox: d.bbox,
            score: d.score,
        })
        .collect();
    let with_ids =
        Rng::new(derive_seed(seed, "with-ids")).next_bool(ctx.config.with_ids_ratio);
    note_template(
        &mut template_ids,
        if with_ids { TemplateId::InstructionWithIds } else { TemplateId::InstructionWithoutIds },
    );
    let instruction = gen_instruction(
        ctx.gateway,
        &target,
        &annotations,
        with_ids,
        derive_seed(seed, "instruction"),
    )
    .map_err(|e| fail(Stage::VlmValidation, e.to_string()))?;

    // Stage: chain-of-thought with length floor.
    note_template(&mut template_ids, TemplateId::CotGeneration);
    let cot = gen_cot(
        ctx.gateway,
        &instruction,
        &target,
        &annotations,
        ctx.config.cot_min_words,
        derive_seed(seed, "cot"),
    )
    .map_err(|e| match e {
        NarrativeError::CotTooShort { .. } => fail(Stage::CotShort, e.to_string()),
        other => fail(Stage::CotShort, other.to_string()),
    })?;

    // Assemble the record and its image files.
    let scene_id = &plan.scene_id;
    let target_path = format!("{scene_id}/target.png");
    let mut images = vec![(target_path.clone(), target.clone())];
    let mut subjects = Vec::with_capacity(drafts.len());
    let mut subject_images = Vec::with_capacity(drafts.len());
    for (i, draft) in drafts.into_iter().enumerate() {
        let crop_path = format!("{scene_id}/subject_{i}_crop.png");
        let transformed_path = format!("{scene_id}/subject_{i}_transformed.png");
        let transformed = draft.transformed.expect("transform stage filled every draft");
        images.push((crop_path.clone(), draft.crop));
        images.push((transformed_path.clone(), transformed));
        subject_images.push(transformed_path.clone());
        subjects.push(SubjectRecord {
            subject_id: i,
            category: draft.category,
            bbox: draft.bbox,
            mask: Some(draft.mask.to_rle()),
            region_mode: draft.region_mode,
            score: draft.score,
            crop: crop_path,
            transformed: transformed_path,
            transform_kind: draft.transform_kind,
        });
    }

    let backends: Vec<String> = {
        let mut ids: Vec<String> =
            ModelRole::ALL.iter().filter_map(|r| ctx.gateway.backend_id(*r)).collect();
        ids.sort();
        ids.dedup();
        ids
    };
    let record = TrainingRecord {
        scene_id: scene_id.clone(),
        width: target.width,
        height: target.height,
        subject_images,
        target_image: target_path,
        instruction,
        cot,
        layout_prompt,
        subjects,
        provenance: Provenance {
            global_seed: ctx.global_seed,
            scene_seed: seed,
            scene_index: plan.index,
            template_ids: template_ids.iter().map(|t| t.as_str().to_string()).collect(),
            backends,
            parent_scene_id: None,
            derivation_step: None,
            config: ctx.config.snapshot(),
        },
    };
    Ok(SceneOutput { record, images })
}

fn commit_outcomes(
    outcomes: Vec<Result<SceneOutput, SceneFailure>>,
    sink: &mut dyn RecordSink,
    stats: &mut PipelineStats,
) -> Result<(), ForgeError> {
    for outcome in outcomes {
        match outcome {
            Ok(output) => {
                sink.commit(&output.record, &output.images)?;
                stats.record_scene(None);
            }
            Err(failure) => {
                sink.scene_failed(&failure.scene_id, failure.stage, &failure.detail);
                stats.record_scene(Some(failure.stage));
            }
        }
    }
    Ok(())
}

/// Process scenes sequentially, committing in plan order.
pub fn run_batch_sequential(
    ctx: &ForgeContext,
    plans: &[ScenePlan],
    sink: &mut dyn RecordSink,
) -> Result<PipelineStats, ForgeError> {
    ctx.config.validate(ctx.vocabulary.len())?;
    let mut stats = PipelineStats::new();
    for chunk in plans.chunks(COMMIT_CHUNK) {
        let outcomes: Vec<_> = chunk.iter().map(|plan| run_scene(ctx, plan)).collect();
        commit_outcomes(outcomes, sink, &mut stats)?;
    }
    Ok(stats)
}

const COMMIT_CHUNK: usize = 64;

/// Process scenes on a bounded worker pool. Scene work is parallel; commits
/// stay in plan order, so manifests are identical to a sequential run.
#[cfg(feature = "parallel")]
pub fn run_batch_parallel(
    ctx: &ForgeContext,
    plans: &[ScenePlan],
    workers: usize,
    sink: &mut dyn RecordSink,
) -> Result<PipelineStats, ForgeError> {
    use rayon::prelude::*;

    ctx.config.validate(ctx.vocabulary.len())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| ForgeError::InvalidConfig(format!("worker pool: {e}")))?;
    let mut stats = PipelineStats::new();
    for chunk in plans.chunks(COMMIT_CHUNK.max(workers * 4)) {
        let outcomes: Vec<_> =
            pool.install(|| chunk.par_iter().map(|plan| run_scene(ctx, plan)).collect());
        commit_outcomes(outcomes, sink, &mut stats)?;
    }
    Ok(stats)
}

/// Dispatch to the parallel driver when built with the `parallel` feature
/// and more than one worker is requested; otherwise run sequentially.
pub fn run_batch(
    ctx: &ForgeContext,
    plans: &[ScenePlan],
    workers: usize,
    sink: &mut dyn RecordSink,
) -> Result<PipelineStats, ForgeError> {
    #[cfg(feature = "parallel")]
    {
        if workers > 1 {
            return run_batch_parallel(ctx, plans, workers, sink);
        }
    }
    let _ = workers;
    run_batch_sequential(ctx, plans, sink)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::MockConfig;
    use crate::geometry::BBox;
    use crate::store::NullSink;

    fn vocab() -> Vec<String> {
        [
            "microwave", "desk", "potted plant", "desk cabinet", "trolley", "vase", "carpet",
            "piano", "person", "flower", "chair", "stool", "frame", "cabinet", "blackboard",
            "ship", "sports car", "lamp", "pineapple", "plate", "couch", "toaster", "radiator",
            "book", "sneakers", "orange", "bottle", "cup",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect()
    }

    fn detection(category: &str, bbox: BBox, score: f64) -> Detection {
        Detection { category: category.into(), bbox, score }
    }

    #[test]
    fn candidate_count_stays_in_range() {
        let vocabulary = vocab();
        for seed in 0..50 {
            let candidates = sample_candidates(&vocabulary, 1, 12, seed).unwrap();
            assert!((2..=24).contains(&candidates.len()), "k = {}", candidates.len());
            let set: BTreeSet<&String> = candidates.iter().collect();
            assert_eq!(set.len(), candidates.len(), "duplicates drawn");
        }
    }

    #[test]
    fn degenerate_range_draws_fixed_count() {
        let vocabulary = vocab();
        for seed in 0..10 {
            assert_eq!(sample_candidates(&vocabulary, 2, 2, seed).unwrap().len(), 4);
        }
    }

    #[test]
    fn candidates_deterministic_under_seed() {
        let vocabulary = vocab();
        assert_eq!(
            sample_candidates(&vocabulary, 1, 12, 99).unwrap(),
            sample_candidates(&vocabulary, 1, 12, 99).unwrap()
        );
    }

    #[test]
    fn small_vocabulary_rejected() {
        let tiny: Vec<String> = vocab().into_iter().take(5).collect();
        assert!(sample_candidates(&tiny, 1, 12, 0).is_err());
    }

    #[test]
    fn duplicate_categories_kept_after_diversity_pass() {
        // Eight detections with two of one category: all eight fit under
        // n_max = 12, so both duplicates survive.
        let detections = vec![
            detection("microwave", BBox::new(0, 0, 20, 20).unwrap(), 0.9),
            detection("desk", BBox::new(10, 10, 40, 30).unwrap(), 0.9),
            detection("potted plant", BBox::new(5, 30, 25, 60).unwrap(), 0.8),
            detection("desk cabinet", BBox::new(30, 0, 64, 25).unwrap(), 0.8),
            detection("trolley", BBox::new(40, 30, 60, 55).unwrap(), 0.7),
            detection("vase", BBox::new(2, 2, 12, 14).unwrap(), 0.7),
            detection("carpet", BBox::new(0, 40, 40, 64).unwrap(), 0.9),
            detection("carpet", BBox::new(44, 44, 64, 64).unwrap(), 0.6),
        ];
        let selected = select_subjects(&detections, 64, 64, 0.0, 12);
        assert_eq!(selected.len(), 8);
        let carpets = selected.iter().filter(|d| d.category == "carpet").count();
        assert_eq!(carpets, 2);
        // The second carpet joins only after every category has one slot.
        assert_eq!(selected[7].category, "carpet");
        assert_eq!(selected[7].bbox, BBox::new(44, 44, 64, 64).unwrap());
    }

    #[test]
    fn selection_caps_at_n_max() {
        let mut detections = Vec::new();
        for i in 0..15u32 {
            detections.push(detection(
                ["a", "b", "c", "d", "e"][i as usize % 5],
                BBox::new(i, i, i + 20, i + 20).unwrap(),
                0.9,
            ));
        }
        assert_eq!(select_subjects(&detections, 64, 64, 0.0, 12).len(), 12);
    }

    #[test]
    fn all_small_boxes_filtered() {
        let detections = vec![
            detection("a", BBox::new(0, 0, 3, 3).unwrap(), 0.9),
            detection("b", BBox::new(5, 5, 8, 8).unwrap(), 0.9),
        ];
        assert!(select_subjects(&detections, 64, 64, 0.01, 12).is_empty());
    }

    #[test]
    fn transform_prompt_is_deterministic() {
        let mut dict = SimilarityDict::default();
        dict.entries.insert(
            "chair".into(),
            vec!["stool".into(), "bench".into(), "couch".into()],
        );
        let (p1, k1, t1) = transform_prompt("chair", true, &dict, 7);
        let (p2, k2, t2) = transform_prompt("chair", true, &dict, 7);
        assert_eq!((p1.clone(), k1, t1), (p2, k2, t2));
        assert_eq!(k1, TransformKind::Complex);
        assert!(p1.contains("chair"));
    }

    #[test]
    fn transform_falls_back_to_simple_without_dict_entry() {
        let dict = SimilarityDict::default();
        let (prompt, kind, template) = transform_prompt("lamp", true, &dict, 1);
        assert_eq!(kind, TransformKind::Simple);
        assert_eq!(template, TemplateId::TransformSimple);
        assert_eq!(
            prompt,
            "A lamp viewed from a different perspective, maintaining its core features and details."
        );
    }

    #[test]
    fn compose_scene_names_at_least_half_the_candidates() {
        let gateway = Gateway::mock(MockConfig::default());
        let config = ForgeConfig::default();
        let candidates: Vec<String> =
            ["ship", "sports car", "vase", "lamp"].iter().map(|s| s.to_string()).collect();
        let draft =
            compose_scene(&gateway, "scene_test", candidates.clone(), &config, 5).unwrap();
        assert!(draft.chosen_categories.len() >= 2);
        for chosen in &draft.chosen_categories {
            assert!(candidates.contains(chosen), "chosen {chosen:?} outside candidates");
            assert!(
                draft.caption.to_lowercase().contains(&chosen.to_lowercase()),
                "caption misses {chosen:?}"
            );
        }
        let again = compose_scene(&gateway, "scene_test", candidates, &config, 5).unwrap();
        assert_eq!(draft.caption, again.caption);
        assert_eq!(draft.target_image.png, again.target_image.png);
    }

    #[test]
    fn compose_scene_fails_after_bounded_regeneration() {
        struct OmitsClasses;
        impl crate::gateway::ModelBackend for OmitsClasses {
            fn call(
                &self,
                request: &crate::gateway::ModelRequest,
            ) -> Result<crate::gateway::ModelResponse, GatewayError> {
                match request {
                    crate::gateway::ModelRequest::GenerateText { .. } => Ok(
                        crate::gateway::ModelResponse::Text("a scene with nothing relevant".into()),
                    ),
                    _ => unreachable!(),
                }
            }
            fn backend_id(&self) -> String {
                "omits".into()
            }
        }
        let gateway = Gateway::mock(MockConfig::default())
            .with_backend(ModelRole::TextGen, std::sync::Arc::new(OmitsClasses));
        let config = ForgeConfig::default();
        let candidates: Vec<String> =
            ["ship", "sports car"].iter().map(|s| s.to_string()).collect();
        let failure = compose_scene(&gateway, "scene_x", candidates, &config, 1).unwrap_err();
        assert_eq!(failure.stage, Stage::T2iMismatch);
        assert!(failure.detail.contains("3 attempts"), "detail: {}", failure.detail);
    }

    #[test]
    fn scene_runs_end_to_end_on_mock() {
        let gateway = Gateway::mock(MockConfig::default());
        let vocabulary = vocab();
        let simdict = crate::augment::build_similarity_dict(&gateway, &vocabulary, 3, 5).unwrap();
        let config = ForgeConfig::default();
        let ctx = ForgeContext {
            gateway: &gateway,
            vocabulary: &vocabulary,
            simdict: &simdict,
            config: &config,
            global_seed: 42,
        };
        let plans = ScenePlan::for_indices(42, 0..8);
        let mut sink = NullSink::default();
        let stats = run_batch_sequential(&ctx, &plans, &mut sink).unwrap();
        assert!(stats.check_identity());
        assert!(sink.committed >= 1, "no scene survived the mock pipeline");
        assert_eq!(stats.scenes_requested, 8);
    }

    #[test]
    fn verify_drops_rejected_and_reindexes() {
        struct RejectOne;
        impl crate::gateway::ModelBackend for RejectOne {
            fn call(
                &self,
                request: &crate::gateway::ModelRequest,
            ) -> Result<crate::gateway::ModelResponse, GatewayError> {
                match request {
                    crate::gateway::ModelRequest::AnalyzeImage { .. } => {
                        Ok(crate::gateway::ModelResponse::Text("REMOVE: 2".into()))
                    }
                    _ => unreachable!(),
                }
            }
            fn backend_id(&self) -> String {
                "reject-one".into()
            }
        }
        let gateway = Gateway::mock(MockConfig::default())
            .with_backend(ModelRole::VisionLanguage, std::sync::Arc::new(RejectOne));
        let target = crate::imaging::synthesize_image(64, 64, 0);
        let selected: Vec<Detection> = (0..5)
            .map(|i| {
                detection(
                    "vase",
                    BBox::new(i * 10, 0, i * 10 + 9, 9).unwrap(),
                    0.9,
                )
            })
            .collect();
        let survivors = verify_subjects(&gateway, &target, &selected, 1).unwrap();
        assert_eq!(survivors.len(), 4);
        assert!(!survivors.iter().any(|d| d.bbox.x_min == 20));
    }
}

//! Test-time scaling: generate N candidate planning branches, realize each
//! into an image, and keep the one whose image best matches the user
//! instruction under the verifier embedding.

use thiserror::Error;

use crate::gateway::{Embedder, Gateway, GatewayError};
use crate::geometry::BBox;
use crate::imaging::{synthesize_image, ImageData};
use crate::layout::{assign_patches, parse_layout, serialize_layout, PatchGrid, PlacedSubject};
use crate::narrative::{extract_ids, word_count, CoTText};
use crate::rng::{derive_seed, derive_seed_indexed, fnv1a, Rng};

#[derive(Debug, Error)]
pub enum TtsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("all {attempted} planning branches failed")]
    AllBranchesFailed { attempted: usize },
    #[error("planner output unusable: {0}")]
    PlanUnusable(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// One planning branch: its chain-of-thought and layout, plus the realized
/// image and verifier score once those stages have run.
#[derive(Debug, Clone)]
pub struct PlanCandidate {
    pub branch_index: usize,
    pub cot: CoTText,
    pub layout: PatchGrid,
    pub image: Option<ImageData>,
    pub score: Option<f64>,
}

/// Maps an instruction and subject images to a (chain-of-thought, layout)
/// plan. The trained planning model stays behind this contract.
pub trait Planner {
    fn plan(
        &self,
        instruction: &str,
        subjects: &[ImageData],
        branch_seed: u64,
    ) -> Result<(CoTText, PatchGrid), TtsError>;
}

/// Realizes a plan into an image. The trained generation model stays behind
/// this contract.
pub trait Generator {
    fn realize(&self, cot: &CoTText, layout: &PatchGrid) -> Result<ImageData, TtsError>;
}

/// Deterministic planner: each branch seed places every category at a
/// seed-keyed position, so different branches propose different layouts.
pub struct MockPlanner {
    pub categories: Vec<String>,
    pub image_size: u32,
    pub m: u32,
    pub lambda: f64,
}

impl MockPlanner {
    pub fn new(categories: Vec<String>) -> Self {
        Self { categories, image_size: 64, m: 8, lambda: 0.05 }
    }
}

impl Planner for MockPlanner {
    fn plan(
        &self,
        instruction: &str,
        _subjects: &[ImageData],
        branch_seed: u64,
    ) -> Result<(CoTText, PatchGrid), TtsError> {
        if self.categories.is_empty() {
            return Err(TtsError::InvalidArgument("planner has no categories".into()));
        }
        let size = self.image_size;
        let mut rng = Rng::new(derive_seed(branch_seed, "mock-plan"));
        let mut placed = Vec::with_capacity(self.categories.len());
        for category in &self.categories {
            let w = rng.next_range((size / 8) as u64, (size / 2) as u64) as u32;
            let h = rng.next_range((size / 8) as u64, (size / 2) as u64) as u32;
            let x0 = rng.next_below((size - w) as u64 + 1) as u32;
            let y0 = rng.next_below((size - h) as u64 + 1) as u32;
            placed.push(PlacedSubject {
                category: category.clone(),
                region: crate::geometry::Region::Box(
                    BBox::new(x0, y0, x0 + w, y0 + h).expect("non-degenerate by construction"),
                ),
            });
        }
        let grid = assign_patches(&placed, size, size, self.m, self.lambda)
            .map_err(|e| TtsError::PlanUnusable(e.to_string()))?;
        let text = format!(
            "Step 1: read the request: {instruction} Step 2: place {} so the arrangement stays \
             readable, variant {:x}. Step 3: settle depth ordering and commit the layout.",
            self.categories.join(", "),
            rng.next_u64()
        );
        let cot = CoTText {
            referenced_ids: extract_ids(&text),
            word_count: word_count(&text),
            text,
        };
        Ok((cot, grid))
    }
}

/// Deterministic generator: the realized image is a pure function of the
/// plan, so equal plans realize identically.
pub struct MockGenerator {
    pub image_size: u32,
}

impl Default for MockGenerator {
    fn default() -> Self {
        Self { image_size: 64 }
    }
}

impl Generator for MockGenerator {
    fn realize(&self, cot: &CoTText, layout: &PatchGrid) -> Result<ImageData, TtsError> {
        let key = fnv1a(cot.text.as_bytes()) ^ fnv1a(serialize_layout(layout).as_bytes());
        Ok(synthesize_image(self.image_size, self.image_size, key))
    }
}

/// Planner served by the vision-language role: the model is asked for a
/// chain-of-thought followed by a layout block in the exact grid format,
/// which is parsed back out of the reply.
pub struct GatewayPlanner<'a> {
    pub gateway: &'a Gateway,
}

impl Planner for GatewayPlanner<'_> {
    fn plan(
        &self,
        instruction: &str,
        subjects: &[ImageData],
        branch_seed: u64,
    ) -> Result<(CoTText, PatchGrid), TtsError> {
        let prompt = format!(
            "Plan one composition for this request: {instruction}\nWrite step-by-step reasoning, \
             then output the spatial layout in the exact segmentation-map format, starting with \
             \"Here is the segmentation map focusing on\"."
        );
        let images: Vec<&ImageData> = subjects.iter().collect();
        let reply = self.gateway.analyze_image(&images, &prompt, branch_seed)?;
        let split = reply
            .find("Here is the segmentation map focusing")
            .ok_or_else(|| TtsError::PlanUnusable("reply carries no layout block".into()))?;
        let cot_text = reply[..split].trim().to_string();
        let grid = parse_layout(reply[split..].trim())
            .map_err(|e| TtsError::PlanUnusable(e.to_string()))?;
        let cot = CoTText {
            referenced_ids: extract_ids(&cot_text),
            word_count: word_count(&cot_text),
            text: cot_text,
        };
        Ok((cot, grid))
    }
}

/// Generator served by the image-generation role: the plan text becomes the
/// conditioning prompt.
pub struct GatewayGenerator<'a> {
    pub gateway: &'a Gateway,
}

impl Generator for GatewayGenerator<'_> {
    fn realize(&self, cot: &CoTText, layout: &PatchGrid) -> Result<ImageData, TtsError> {
        let prompt = format!("{}\n{}", cot.text, serialize_layout(layout));
        Ok(self.gateway.generate_image(&prompt, fnv1a(prompt.as_bytes()))?)
    }
}

/// Generate N planning branches. Branch j derives its seed from (seed, j);
/// branches that fail are excluded (their indices simply never appear), and
/// a run where every branch fails is an error.
pub fn generate_branches(
    planner: &dyn Planner,
    instruction: &str,
    subjects: &[ImageData],
    n: usize,
    seed: u64,
) -> Result<Vec<PlanCandidate>, TtsError> {
    if n < 1 {
        return Err(TtsError::InvalidArgument("branch count must be >= 1".into()));
    }
    let mut candidates = Vec::with_capacity(n);
    for j in 0..n {
        match planner.plan(instruction, subjects, derive_seed_indexed(seed, "branch", j as u64)) {
            Ok((cot, layout)) => candidates.push(PlanCandidate {
                branch_index: j,
                cot,
                layout,
                image: None,
                score: None,
            }),
            Err(_) => continue,
        }
    }
    if candidates.is_empty() {
        return Err(TtsError::AllBranchesFailed { attempted: n });
    }
    Ok(candidates)
}

/// Realize every candidate and score it against the instruction:
/// `score = cos(embed(image), embed(instruction))`. Candidates whose
/// realization or scoring fails stay unscored and drop out of selection.
pub fn realize_and_score(
    candidates: &mut [PlanCandidate],
    generator: &dyn Generator,
    embedder: &dyn Embedder,
    instruction: &str,
) -> Result<(), TtsError> {
    let instruction_vec = embedder.embed_text(instruction)?;
    for candidate in candidates.iter_mut() {
        let Ok(image) = generator.realize(&candidate.cot, &candidate.layout) else {
            continue;
        };
        let Ok(image_vec) = embedder.embed_image(&image) else {
            continue;
        };
        candidate.score = Some(image_vec.cosine(&instruction_vec));
        candidate.image = Some(image);
    }
    Ok(())
}

/// Pick the scored candidate with the highest verifier score. Ties break
/// toward the lowest branch index.
pub fn select_best(candidates: &[PlanCandidate]) -> Result<(usize, &PlanCandidate), TtsError> {
    let mut best: Option<(usize, &PlanCandidate, f64)> = None;
    for (i, candidate) in candidates.iter().enumerate() {
        let Some(score) = candidate.score else { continue };
        let better = match best {
            None => true,
            Some((_, current, best_score)) => {
                score > best_score
                    || (score == best_score && candidate.branch_index < current.branch_index)
            }
        };
        if better {
            best = Some((i, candidate, score));
        }
    }
    best.map(|(i, c, _)| (i, c))
        .ok_or_else(|| TtsError::InvalidArgument("no scored candidates to select from".into()))
}

/// Best score over the first `n` branches, for each requested n. Prefix
/// membership goes by branch index, so the curve is monotone by
/// construction.
pub fn best_score_curve(candidates: &[PlanCandidate], ns: &[usize]) -> Vec<(usize, Option<f64>)> {
    ns.iter()
        .map(|&n| {
            let best = candidates
                .iter()
                .filter(|c| c.branch_index < n)
                .filter_map(|c| c.score)
                .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.max(s))));
            (n, best)
        })
        .collect()
}

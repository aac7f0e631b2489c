//! Seeded deterministic mock backend.
//!
//! For a fixed (seed, inputs) pair every response is byte-stable across runs
//! and platforms: all draws come from splitmix64 streams keyed by FNV hashes
//! of the request payload, never from global state. The text handlers
//! understand the pipeline's own prompt templates, which is what lets the
//! whole pipeline run end-to-end without any live model.

use crate::annotate::parse_block;
use crate::geometry::{BBox, RasterMask};
use crate::imaging::{synthesize_image, ImageData};
use crate::narrative::extract_ids;
use crate::rng::{derive_seed, fnv1a, Rng};

use super::{Detection, GatewayError, ModelBackend, ModelRequest, ModelResponse};

#[derive(Debug, Clone)]
pub struct MockConfig {
    /// Mixed into every hash; lets two mock instances (e.g. the two eval
    /// embedders) disagree deterministically.
    pub salt: String,
    /// Side length of synthesized square images.
    pub image_size: u32,
    /// Dimension of mock embeddings.
    pub embed_dim: usize,
    /// Per-box probability that the verifier rejects a listed box.
    pub verify_reject_prob: f64,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self { salt: String::new(), image_size: 64, embed_dim: 64, verify_reject_prob: 0.08 }
    }
}

pub struct MockBackend {
    config: MockConfig,
}

impl MockBackend {
    pub fn new(config: MockConfig) -> Self {
        Self { config }
    }

    fn keyed(&self, seed: u64, label: &str, payload: &[u8]) -> Rng {
        let mut key = derive_seed(seed, label);
        key ^= fnv1a(payload);
        key ^= fnv1a(self.config.salt.as_bytes()).rotate_left(31);
        Rng::new(key)
    }

    fn generate_text(&self, prompt: &str, seed: u64) -> String {
        if prompt.contains("Create a scene for an image generation model") {
            return self.caption_reply(prompt, seed);
        }
        if prompt.contains("semantically related object categories") {
            return self.similarity_reply(prompt, seed);
        }
        // Generic deterministic paragraph for unrecognized prompts.
        let mut rng = self.keyed(seed, "text", prompt.as_bytes());
        format!(
            "A quiet arrangement of familiar objects fills the frame, described in plain terms and \
             lit evenly from the left, variant {:x}.",
            rng.next_u64()
        )
    }

    /// Reply to the caption template: pick at least half of the candidate
    /// classes and mention each chosen class verbatim.
    fn caption_reply(&self, prompt: &str, seed: u64) -> String {
        let classes = extract_between(prompt, "these objects: ", " to fit")
            .map(|s| s.split(", ").map(str::to_string).collect::<Vec<_>>())
            .unwrap_or_default();
        if classes.is_empty() {
            return "An empty room with bare walls and even light.".to_string();
        }
        let mut rng = self.keyed(seed, "caption", prompt.as_bytes());
        let minimum = classes.len().div_ceil(2);
        let extra = rng.next_below((classes.len() - minimum + 1) as u64) as usize;
        let mut picked = rng.choose_indices(classes.len(), minimum + extra);
        picked.sort_unstable();
        let chosen: Vec<&str> = picked.iter().map(|&i| classes[i].as_str()).collect();
        let listed = join_with_articles(&chosen);
        format!(
            "The composition brings together {listed} in one coherent setting, arranged on a \
             neutral ground with soft window light and simple staging."
        )
    }

    fn similarity_reply(&self, prompt: &str, seed: u64) -> String {
        let class = extract_between(prompt, "category \"", "\"").unwrap_or_default();
        let pool: Vec<String> = extract_between(prompt, "from this list: ", ". Reply")
            .map(|s| s.split(", ").map(str::to_string).collect())
            .unwrap_or_default();
        let count: usize = extract_between(prompt, "list ", " semantically")
            .and_then(|s| s.parse().ok())
            .unwrap_or(3);
        let candidates: Vec<&String> =
            pool.iter().filter(|c| !c.eq_ignore_ascii_case(class)).collect();
        if candidates.is_empty() {
            return String::from("none");
        }
        let mut rng = self.keyed(seed, "simdict", class.as_bytes());
        let take = count.min(candidates.len());
        let picked = rng.choose_indices(candidates.len(), take);
        picked.iter().map(|&i| candidates[i].clone()).collect::<Vec<_>>().join(", ")
    }

    fn analyze_image(&self, prompt: &str, seed: u64) -> String {
        if prompt.contains("Reply with exactly 'OK'") {
            return self.verify_reply(prompt, seed);
        }
        if prompt.contains("Create a scene description for image annotation") {
            return self.instruction_reply(prompt, seed, true);
        }
        if prompt.contains("depicting a harmonious scene") {
            return self.instruction_reply(prompt, seed, false);
        }
        if prompt.contains("step-by-step reasoning (CoT)") {
            return self.cot_reply(prompt, seed);
        }
        let mut rng = self.keyed(seed, "vlm", prompt.as_bytes());
        format!("The image shows an evenly lit scene, observation {:x}.", rng.next_u64())
    }

    fn verify_reply(&self, prompt: &str, seed: u64) -> String {
        let annotations = parse_block(prompt);
        let mut rejected = Vec::new();
        for a in &annotations {
            let mut rng = self.keyed(seed, "verify", &a.id.to_le_bytes());
            if rng.next_bool(self.config.verify_reject_prob) {
                rejected.push(a.id.to_string());
            }
        }
        if rejected.is_empty() {
            "OK".to_string()
        } else {
            format!("REMOVE: {}", rejected.join(", "))
        }
    }

    fn instruction_reply(&self, prompt: &str, seed: u64, with_ids: bool) -> String {
        let annotations = parse_block(prompt);
        if annotations.is_empty() {
            return "A plain scene with no marked subjects.".to_string();
        }
        let verbs =
            ["rests beside", "stands near", "leans against", "sits in front of", "faces"];
        let landmarks =
            ["the window", "a wooden table", "the doorway", "a low stone wall", "the shelf"];
        let mut sentences = Vec::new();
        for a in &annotations {
            let mut rng = self.keyed(seed, "instr", &(a.id as u64).to_le_bytes());
            let verb = verbs[rng.next_below(verbs.len() as u64) as usize];
            let landmark = landmarks[rng.next_below(landmarks.len() as u64) as usize];
            if with_ids {
                sentences.push(format!(
                    "The {} from image {} {} {}.",
                    a.category, a.id, verb, landmark
                ));
            } else {
                sentences.push(format!("A {} {} {}.", a.category, verb, landmark));
            }
        }
        sentences.join(" ")
    }

    fn cot_reply(&self, prompt: &str, seed: u64) -> String {
        let annotations = parse_block(prompt);
        let initial = extract_between(prompt, "- **Initial Prompt**: \"", "\"").unwrap_or_default();
        let instruction_ids = extract_ids(initial);
        let positions = ["left", "right", "central", "upper", "lower"];
        let verbs = ["anchoring", "balancing", "framing", "grounding"];
        let mut rng = self.keyed(seed, "cot", prompt.as_bytes());
        let mut out = String::from(
            "### Scene Composition\nStep 1: The background establishes a calm interior with even \
             light, a clear horizon line across the upper third, and enough open floor to place \
             every subject without crowding.",
        );
        for (offset, a) in annotations.iter().enumerate() {
            let step = offset + 2;
            let position = positions[rng.next_below(positions.len() as u64) as usize];
            let verb = verbs[rng.next_below(verbs.len() as u64) as usize];
            let reference = if instruction_ids.contains(&a.id) {
                format!("{} from image {}", a.category, a.id)
            } else {
                a.category.clone()
            };
            out.push_str(&format!(
                "\nStep {step}: The {reference} occupies the {position} region of the frame, \
                 {verb} the arrangement while keeping its scale consistent with its neighbors."
            ));
        }
        out.push_str(
            "\nFinal step: all subjects share one consistent perspective, spacing stays balanced, \
             occlusions resolve cleanly, and the palette unifies into a single coherent scene.",
        );
        out
    }

    fn detect(&self, image: &ImageData, vocabulary: &[String], seed: u64) -> Vec<Detection> {
        let mut rng = self.keyed(seed, "detect", &[]);
        let count = rng.next_range(2, 13) as usize;
        let mut detections: Vec<Detection> = Vec::with_capacity(count);
        for _ in 0..count {
            let category = if !detections.is_empty() && rng.next_bool(0.25) {
                // Occasionally repeat an earlier category so multi-instance
                // scenes occur.
                detections[rng.next_below(detections.len() as u64) as usize].category.clone()
            } else {
                vocabulary[rng.next_below(vocabulary.len() as u64) as usize].clone()
            };
            let small = rng.next_bool(0.15);
            let (min_side, max_side) = if small {
                (3u64, 6u64)
            } else {
                (
                    (image.width as u64 / 6).max(4),
                    (image.width as u64 / 2).max(6),
                )
            };
            let w = rng.next_range(min_side, max_side) as u32;
            let h = rng.next_range(min_side, max_side) as u32;
            let w = w.min(image.width - 1).max(1);
            let h = h.min(image.height - 1).max(1);
            let x0 = rng.next_below((image.width - w) as u64 + 1) as u32;
            let y0 = rng.next_below((image.height - h) as u64 + 1) as u32;
            let score = 0.5 + rng.next_f64() * 0.5;
            detections.push(Detection {
                category,
                bbox: BBox { x_min: x0, y_min: y0, x_max: x0 + w, y_max: y0 + h },
                score: (score * 10000.0).round() / 10000.0,
            });
        }
        detections
    }

    /// Mask contract: the detected box shrunk by one pixel per side. A box
    /// too thin to shrink is returned unshrunk so the mask is never empty.
    fn segment(&self, image: &ImageData, bbox: &BBox) -> RasterMask {
        let shrunk = if bbox.width() > 2 && bbox.height() > 2 {
            BBox {
                x_min: bbox.x_min + 1,
                y_min: bbox.y_min + 1,
                x_max: bbox.x_max - 1,
                y_max: bbox.y_max - 1,
            }
        } else {
            *bbox
        };
        RasterMask::from_box(image.width, image.height, &shrunk)
    }

    fn embed(&self, payload: &[u8], kind_label: &str) -> Vec<f64> {
        let mut rng = self.keyed(0, kind_label, payload);
        let mut values = Vec::with_capacity(self.config.embed_dim);
        // Box-Muller over deterministic uniforms: directions spread evenly
        // over the sphere after normalization.
        while values.len() < self.config.embed_dim {
            let u1 = rng.next_f64().max(1e-12);
            let u2 = rng.next_f64();
            let radius = (-2.0 * u1.ln()).sqrt();
            let angle = 2.0 * std::f64::consts::PI * u2;
            values.push(radius * angle.cos());
            if values.len() < self.config.embed_dim {
                values.push(radius * angle.sin());
            }
        }
        values
    }
}

impl ModelBackend for MockBackend {
    fn call(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        Ok(match request {
            ModelRequest::GenerateText { prompt, seed } => {
                ModelResponse::Text(self.generate_text(prompt, *seed))
            }
            ModelRequest::GenerateImage { prompt, seed } => {
                let key = derive_seed(*seed, "image_gen") ^ fnv1a(prompt.as_bytes());
                ModelResponse::Image(synthesize_image(
                    self.config.image_size,
                    self.config.image_size,
                    key,
                ))
            }
            ModelRequest::TransformImage { image, prompt, seed } => {
                let key = derive_seed(*seed, "transform")
                    ^ fnv1a(&image.png)
                    ^ fnv1a(prompt.as_bytes()).rotate_left(13);
                ModelResponse::Image(synthesize_image(image.width, image.height, key))
            }
            ModelRequest::AnalyzeImage { prompt, seed, .. } => {
                ModelResponse::Text(self.analyze_image(prompt, *seed))
            }
            ModelRequest::Detect { image, vocabulary, seed } => {
                ModelResponse::Detections(self.detect(image, vocabulary, *seed))
            }
            ModelRequest::Segment { image, bbox, .. } => {
                ModelResponse::Mask(self.segment(image, bbox))
            }
            ModelRequest::EmbedText { text } => {
                ModelResponse::Embedding(self.embed(text.as_bytes(), "embed_text"))
            }
            ModelRequest::EmbedImage { image } => {
                ModelResponse::Embedding(self.embed(&image.png, "embed_image"))
            }
        })
    }

    fn backend_id(&self) -> String {
        if self.config.salt.is_empty() {
            "mock".to_string()
        } else {
            format!("mock:{}", self.config.salt)
        }
    }
}

fn extract_between<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let begin = text.find(start)? + start.len();
    let rest = &text[begin..];
    let stop = rest.find(end)?;
    Some(&rest[..stop])
}

fn join_with_articles(items: &[&str]) -> String {
    let with_article: Vec<String> = items.iter().map(|c| format!("a {c}")).collect();
    match with_article.len() {
        0 => String::new(),
        1 => with_article[0].clone(),
        2 => format!("{} and {}", with_article[0], with_article[1]),
        _ => {
            let head = &with_article[..with_article.len() - 1];
            format!("{}, and {}", head.join(", "), with_article.last().unwrap())
        }
    }
}

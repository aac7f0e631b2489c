//! Uniform clients for the seven external model roles used by the pipeline.
//!
//! Every role speaks the same wire protocol (a single JSON POST, see
//! [`http`]) and has a seeded deterministic mock (see [`mock`]). The
//! [`Gateway`] facade validates inputs before dispatch and schema-checks
//! every response before it crosses the module boundary, so downstream
//! stages never see a partially-validated payload.

pub mod http;
pub mod mock;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, RasterMask};
use crate::imaging::ImageData;

/// The seven model roles of the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    TextGen,
    ImageGen,
    VisionLanguage,
    ImageTransform,
    Detector,
    Segmenter,
    Embedder,
}

impl ModelRole {
    pub const ALL: [ModelRole; 7] = [
        ModelRole::TextGen,
        ModelRole::ImageGen,
        ModelRole::VisionLanguage,
        ModelRole::ImageTransform,
        ModelRole::Detector,
        ModelRole::Segmenter,
        ModelRole::Embedder,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelRole::TextGen => "text_gen",
            ModelRole::ImageGen => "image_gen",
            ModelRole::VisionLanguage => "vision_language",
            ModelRole::ImageTransform => "image_transform",
            ModelRole::Detector => "detector",
            ModelRole::Segmenter => "segmenter",
            ModelRole::Embedder => "embedder",
        }
    }
}

impl std::fmt::Display for ModelRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Configuration for one live model endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub role: ModelRole,
    pub base_url: String,
    /// Name of the env var holding the bearer token; empty means no auth.
    #[serde(default)]
    pub auth_token_env: String,
    /// Request timeout in seconds.
    pub timeout_secs: u64,
    /// Maximum number of re-issues after the initial attempt.
    pub max_retries: u32,
}

impl ModelEndpoint {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.timeout_secs == 0 {
            return Err(GatewayError::InvalidArgument("endpoint timeout must be > 0".into()));
        }
        Ok(())
    }
}

/// One detection from the open-vocabulary detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub category: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

/// A unit-normalized embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    /// Build from raw values, normalizing to unit L2 norm.
    pub fn normalized(values: Vec<f64>) -> Result<Self, GatewayError> {
        if values.is_empty() {
            return Err(GatewayError::InvalidArgument("embedding must be non-empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GatewayError::InvalidArgument("embedding has non-finite values".into()));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(GatewayError::InvalidArgument("embedding has zero norm".into()));
        }
        Ok(Self { values: values.into_iter().map(|v| v / norm).collect() })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    /// Cosine similarity. Inputs are unit vectors, so this is the dot
    /// product; kept as a named operation for call-site clarity.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        self.dot(other)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedKind {
    Text,
    Image,
}

/// A typed request to a model backend.
#[derive(Debug, Clone)]
pub enum ModelRequest {
    GenerateText { prompt: String, seed: u64 },
    GenerateImage { prompt: String, seed: u64 },
    TransformImage { image: ImageData, prompt: String, seed: u64 },
    AnalyzeImage { images: Vec<ImageData>, prompt: String, seed: u64 },
    Detect { image: ImageData, vocabulary: Vec<String>, seed: u64 },
    Segment { image: ImageData, bbox: BBox, seed: u64 },
    EmbedText { text: String },
    EmbedImage { image: ImageData },
}

impl ModelRequest {
    pub fn role(&self) -> ModelRole {
        match self {
            ModelRequest::GenerateText { .. } => ModelRole::TextGen,
            ModelRequest::GenerateImage { .. } => ModelRole::ImageGen,
            ModelRequest::TransformImage { .. } => ModelRole::ImageTransform,
            ModelRequest::AnalyzeImage { .. } => ModelRole::VisionLanguage,
            ModelRequest::Detect { .. } => ModelRole::Detector,
            ModelRequest::Segment { .. } => ModelRole::Segmenter,
            ModelRequest::EmbedText { .. } | ModelRequest::EmbedImage { .. } => ModelRole::Embedder,
        }
    }
}

/// A typed response from a model backend.
#[derive(Debug, Clone)]
pub enum ModelResponse {
    Text(String),
    Image(ImageData),
    Detections(Vec<Detection>),
    Mask(RasterMask),
    Embedding(Vec<f64>),
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{role} transport failure after {attempts} attempt(s): {detail}")]
    Transport { role: ModelRole, attempts: u32, detail: String },
    #[error("{role} protocol error: {detail}")]
    Protocol { role: ModelRole, detail: String },
}

/// A backend serving all or some of the model roles.
pub trait ModelBackend: Send + Sync {
    fn call(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError>;
    /// Short identifier recorded in provenance metadata.
    fn backend_id(&self) -> String;
}

/// Role-dispatching facade over one or more backends.
#[derive(Clone)]
pub struct Gateway {
    backends: BTreeMap<ModelRole, Arc<dyn ModelBackend>>,
}

impl Gateway {
    /// All seven roles served by one seeded mock backend.
    pub fn mock(config: mock::MockConfig) -> Self {
        let backend: Arc<dyn ModelBackend> = Arc::new(mock::MockBackend::new(config));
        let mut backends = BTreeMap::new();
        for role in ModelRole::ALL {
            backends.insert(role, Arc::clone(&backend));
        }
        Self { backends }
    }

    /// Live gateway over per-role HTTP endpoints.
    pub fn live(endpoints: Vec<ModelEndpoint>) -> Result<Self, GatewayError> {
        let mut backends: BTreeMap<ModelRole, Arc<dyn ModelBackend>> = BTreeMap::new();
        for endpoint in endpoints {
            endpoint.validate()?;
            let role = endpoint.role;
            backends.insert(role, Arc::new(http::HttpBackend::new(endpoint)));
        }
        Ok(Self { backends })
    }

    pub fn with_backend(mut self, role: ModelRole, backend: Arc<dyn ModelBackend>) -> Self {
        self.backends.insert(role, backend);
        self
    }

    pub fn backend_id(&self, role: ModelRole) -> Option<String> {
        self.backends.get(&role).map(|b| b.backend_id())
    }

    fn dispatch(&self, request: ModelRequest) -> Result<ModelResponse, GatewayError> {
        let role = request.role();
        let backend = self.backends.get(&role).ok_or_else(|| {
            GatewayError::InvalidArgument(format!("no backend configured for role {role}"))
        })?;
        backend.call(&request)
    }

    pub fn generate_text(&self, prompt: &str, seed: u64) -> Result<String, GatewayError> {
        require_non_empty(prompt, "prompt")?;
        match self.dispatch(ModelRequest::GenerateText { prompt: prompt.to_string(), seed })? {
            ModelResponse::Text(t) if !t.is_empty() => Ok(t),
            ModelResponse::Text(_) => Err(GatewayError::Protocol {
                role: ModelRole::TextGen,
                detail: "empty text response".into(),
            }),
            _ => Err(protocol_mismatch(ModelRole::TextGen)),
        }
    }

    pub fn generate_image(&self, prompt: &str, seed: u64) -> Result<ImageData, GatewayError> {
        require_non_empty(prompt, "prompt")?;
        match self.dispatch(ModelRequest::GenerateImage { prompt: prompt.to_string(), seed })? {
            ModelResponse::Image(img) => Ok(img),
            _ => Err(protocol_mismatch(ModelRole::ImageGen)),
        }
    }

    pub fn transform_image(
        &self,
        image: &ImageData,
        prompt: &str,
        seed: u64,
    ) -> Result<ImageData, GatewayError> {
        require_non_empty(prompt, "prompt")?;
        let request =
            ModelRequest::TransformImage { image: image.clone(), prompt: prompt.to_string(), seed };
        match self.dispatch(request)? {
            ModelResponse::Image(img) => Ok(img),
            _ => Err(protocol_mismatch(ModelRole::ImageTransform)),
        }
    }

    pub fn analyze_image(
        &self,
        images: &[&ImageData],
        prompt: &str,
        seed: u64,
    ) -> Result<String, GatewayError> {
        require_non_empty(prompt, "prompt")?;
        if images.is_empty() {
            return Err(GatewayError::InvalidArgument("analyze_image needs an image".into()));
        }
        let request = ModelRequest::AnalyzeImage {
            images: images.iter().map(|i| (*i).clone()).collect(),
            prompt: prompt.to_string(),
            seed,
        };
        match self.dispatch(request)? {
            ModelResponse::Text(t) if !t.is_empty() => Ok(t),
            ModelResponse::Text(_) => Err(GatewayError::Protocol {
                role: ModelRole::VisionLanguage,
                detail: "empty text response".into(),
            }),
            _ => Err(protocol_mismatch(ModelRole::VisionLanguage)),
        }
    }

    pub fn detect(
        &self,
        image: &ImageData,
        vocabulary: &[String],
        seed: u64,
    ) -> Result<Vec<Detection>, GatewayError> {
        if vocabulary.is_empty() {
            return Err(GatewayError::InvalidArgument("vocabulary must be non-empty".into()));
        }
        let request = ModelRequest::Detect {
            image: image.clone(),
            vocabulary: vocabulary.to_vec(),
            seed,
        };
        let detections = match self.dispatch(request)? {
            ModelResponse::Detections(d) => d,
            _ => return Err(protocol_mismatch(ModelRole::Detector)),
        };
        for d in &detections {
            if !vocabulary.contains(&d.category) {
                return Err(GatewayError::Protocol {
                    role: ModelRole::Detector,
                    detail: format!("category {:?} outside vocabulary", d.category),
                });
            }
            if !(0.0..=1.0).contains(&d.score) {
                return Err(GatewayError::Protocol {
                    role: ModelRole::Detector,
                    detail: format!("score {} outside [0,1]", d.score),
                });
            }
            if !d.bbox.contains_within(image.width, image.height) {
                return Err(GatewayError::Protocol {
                    role: ModelRole::Detector,
                    detail: format!("box {:?} outside image bounds", d.bbox),
                });
            }
        }
        Ok(detections)
    }

    pub fn segment(
        &self,
        image: &ImageData,
        bbox: &BBox,
        seed: u64,
    ) -> Result<RasterMask, GatewayError> {
        if !bbox.contains_within(image.width, image.height) {
            return Err(GatewayError::InvalidArgument(format!(
                "box {bbox:?} outside image {}x{}",
                image.width, image.height
            )));
        }
        let request = ModelRequest::Segment { image: image.clone(), bbox: *bbox, seed };
        let mask = match self.dispatch(request)? {
            ModelResponse::Mask(m) => m,
            _ => return Err(protocol_mismatch(ModelRole::Segmenter)),
        };
        if mask.width != image.width || mask.height != image.height {
            return Err(GatewayError::Protocol {
                role: ModelRole::Segmenter,
                detail: format!(
                    "mask dimensions {}x{} do not match image {}x{}",
                    mask.width, mask.height, image.width, image.height
                ),
            });
        }
        Ok(mask)
    }

    pub fn embed_text(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        require_non_empty(text, "payload")?;
        match self.dispatch(ModelRequest::EmbedText { text: text.to_string() })? {
            ModelResponse::Embedding(values) => EmbeddingVector::normalized(values),
            _ => Err(protocol_mismatch(ModelRole::Embedder)),
        }
    }

    pub fn embed_image(&self, image: &ImageData) -> Result<EmbeddingVector, GatewayError> {
        match self.dispatch(ModelRequest::EmbedImage { image: image.clone() })? {
            ModelResponse::Embedding(values) => EmbeddingVector::normalized(values),
            _ => Err(protocol_mismatch(ModelRole::Embedder)),
        }
    }
}

/// Anything that can embed text and images into the same space. The two
/// evaluation embedders and the plan verifier all come in through this
/// trait, so mock and live backends are interchangeable.
pub trait Embedder: Send + Sync {
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, GatewayError>;
    fn embed_image(&self, image: &ImageData) -> Result<EmbeddingVector, GatewayError>;
}

impl Embedder for Gateway {
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        Gateway::embed_text(self, text)
    }

    fn embed_image(&self, image: &ImageData) -> Result<EmbeddingVector, GatewayError> {
        Gateway::embed_image(self, image)
    }
}

fn require_non_empty(value: &str, what: &str) -> Result<(), GatewayError> {
    if value.trim().is_empty() {
        return Err(GatewayError::InvalidArgument(format!("{what} must be non-empty")));
    }
    Ok(())
}

fn protocol_mismatch(role: ModelRole) -> GatewayError {
    GatewayError::Protocol { role, detail: "response variant does not match role".into() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_is_normalized() {
        let v = EmbeddingVector::normalized(vec![3.0, 4.0]).unwrap();
        assert!((v.values()[0] - 0.6).abs() < 1e-12);
        assert!((v.values()[1] - 0.8).abs() < 1e-12);
        let norm: f64 = v.values().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_norm_embedding_rejected() {
        assert!(EmbeddingVector::normalized(vec![0.0, 0.0]).is_err());
        assert!(EmbeddingVector::normalized(vec![]).is_err());
        assert!(EmbeddingVector::normalized(vec![f64::NAN]).is_err());
    }

    #[test]
    fn cosine_of_identical_is_one() {
        let v = EmbeddingVector::normalized(vec![0.2, -0.4, 0.9]).unwrap();
        assert!((v.cosine(&v) - 1.0).abs() < 1e-12);
    }
}

//! Live HTTP backend. Every role speaks one wire protocol: a JSON POST
//!
//! ```text
//! {"role": "...", "inputs": {"prompt"?, "images"?: [base64 PNG], "box"?,
//!  "vocabulary"?, "seed"?}, "request_id": "..."}
//! ```
//!
//! answered by `{"output": {"text"? | "image_base64"? | "detections"? |
//! "mask_rle"? | "embedding"?}}`. Transport failures are retried up to the
//! endpoint's `max_retries` with exponential backoff; requests are
//! idempotent by construction (fully seed-keyed), so re-issue is safe.
//! Malformed response bodies are protocol errors and are not retried.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};

use crate::geometry::{BBox, RleMask};
use crate::imaging::ImageData;

use super::{
    Detection, GatewayError, ModelBackend, ModelEndpoint, ModelRequest, ModelResponse, ModelRole,
};

const RETRY_BASE_DELAY_MS: u64 = 50;
const DEFAULT_MAX_INFLIGHT: usize = 8;

/// Counting gate bounding concurrent requests to one endpoint.
struct InflightGate {
    capacity: usize,
    state: Mutex<usize>,
    signal: Condvar,
}

impl InflightGate {
    fn new(capacity: usize) -> Self {
        Self { capacity, state: Mutex::new(0), signal: Condvar::new() }
    }

    fn enter(&self) -> InflightTicket<'_> {
        let mut active = self.state.lock().unwrap();
        while *active >= self.capacity {
            active = self.signal.wait(active).unwrap();
        }
        *active += 1;
        InflightTicket { gate: self }
    }
}

struct InflightTicket<'a> {
    gate: &'a InflightGate,
}

impl Drop for InflightTicket<'_> {
    fn drop(&mut self) {
        let mut active = self.gate.state.lock().unwrap();
        *active -= 1;
        self.gate.signal.notify_one();
    }
}

pub struct HttpBackend {
    endpoint: ModelEndpoint,
    agent: ureq::Agent,
    gate: InflightGate,
    request_counter: AtomicU64,
}

impl HttpBackend {
    pub fn new(endpoint: ModelEndpoint) -> Self {
        Self::with_inflight_cap(endpoint, DEFAULT_MAX_INFLIGHT)
    }

    pub fn with_inflight_cap(endpoint: ModelEndpoint, max_inflight: usize) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(endpoint.timeout_secs))
            .build();
        Self {
            endpoint,
            agent,
            gate: InflightGate::new(max_inflight.max(1)),
            request_counter: AtomicU64::new(0),
        }
    }

    fn auth_token(&self) -> Result<Option<String>, GatewayError> {
        if self.endpoint.auth_token_env.is_empty() {
            return Ok(None);
        }
        std::env::var(&self.endpoint.auth_token_env).map(Some).map_err(|_| {
            GatewayError::InvalidArgument(format!(
                "auth token env var {} not set",
                self.endpoint.auth_token_env
            ))
        })
    }

    fn post_once(&self, body: &str) -> Result<String, PostFailure> {
        let mut request = self
            .agent
            .post(&self.endpoint.base_url)
            .set("Content-Type", "application/json");
        match self.auth_token() {
            Ok(Some(token)) => request = request.set("Authorization", &format!("Bearer {token}")),
            Ok(None) => {}
            Err(e) => return Err(PostFailure::Fatal(e)),
        }
        match request.send_string(body) {
            Ok(response) => response
                .into_string()
                .map_err(|e| PostFailure::Retryable(format!("body read failed: {e}"))),
            Err(ureq::Error::Status(code, _)) if code >= 500 => {
                Err(PostFailure::Retryable(format!("server returned {code}")))
            }
            Err(ureq::Error::Status(code, _)) => Err(PostFailure::Fatal(GatewayError::Protocol {
                role: self.endpoint.role,
                detail: format!("server returned {code}"),
            })),
            Err(e) => Err(PostFailure::Retryable(e.to_string())),
        }
    }

    fn post_with_retries(&self, body: &str) -> Result<String, GatewayError> {
        let _ticket = self.gate.enter();
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            match self.post_once(body) {
                Ok(text) => return Ok(text),
                Err(PostFailure::Fatal(e)) => return Err(e),
                Err(PostFailure::Retryable(detail)) => {
                    if attempts > self.endpoint.max_retries {
                        return Err(GatewayError::Transport {
                            role: self.endpoint.role,
                            attempts,
                            detail,
                        });
                    }
                    let backoff = RETRY_BASE_DELAY_MS << (attempts - 1).min(6);
                    std::thread::sleep(Duration::from_millis(backoff));
                }
            }
        }
    }
}

enum PostFailure {
    Retryable(String),
    Fatal(GatewayError),
}

pub fn encode_request(request: &ModelRequest, request_id: &str) -> Value {
    let b64 = |img: &ImageData| base64::engine::general_purpose::STANDARD.encode(&img.png);
    let inputs = match request {
        ModelRequest::GenerateText { prompt, seed } => json!({"prompt": prompt, "seed": seed}),
        ModelRequest::GenerateImage { prompt, seed } => json!({"prompt": prompt, "seed": seed}),
        ModelRequest::TransformImage { image, prompt, seed } => {
            json!({"prompt": prompt, "images": [b64(image)], "seed": seed})
        }
        ModelRequest::AnalyzeImage { images, prompt, seed } => {
            let encoded: Vec<String> = images.iter().map(b64).collect();
            json!({"prompt": prompt, "images": encoded, "seed": seed})
        }
        ModelRequest::Detect { image, vocabulary, seed } => {
            json!({"images": [b64(image)], "vocabulary": vocabulary, "seed": seed})
        }
        ModelRequest::Segment { image, bbox, seed } => {
            json!({
                "images": [b64(image)],
                "box": [bbox.x_min, bbox.y_min, bbox.x_max, bbox.y_max],
                "seed": seed
            })
        }
        ModelRequest::EmbedText { text } => json!({"prompt": text}),
        ModelRequest::EmbedImage { image } => json!({"images": [b64(image)]}),
    };
    json!({"role": request.role().as_str(), "inputs": inputs, "request_id": request_id})
}

pub fn decode_response(role: ModelRole, body: &str) -> Result<ModelResponse, GatewayError> {
    let protocol = |detail: String| GatewayError::Protocol { role, detail };
    let value: Value =
        serde_json::from_str(body).map_err(|e| protocol(format!("invalid JSON body: {e}")))?;
    let output = value
        .get("output")
        .ok_or_else(|| protocol("missing output field".to_string()))?;

    if let Some(text) = output.get("text") {
        let text = text.as_str().ok_or_else(|| protocol("text is not a string".into()))?;
        return Ok(ModelResponse::Text(text.to_string()));
    }
    if let Some(b64) = output.get("image_base64") {
        let b64 = b64.as_str().ok_or_else(|| protocol("image_base64 is not a string".into()))?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(b64)
            .map_err(|e| protocol(format!("invalid base64 image: {e}")))?;
        let image =
            ImageData::from_png(bytes).map_err(|e| protocol(format!("invalid PNG: {e}")))?;
        return Ok(ModelResponse::Image(image));
    }
    if let Some(detections) = output.get("detections") {
        let parsed: Vec<WireDetection> = serde_json::from_value(detections.clone())
            .map_err(|e| protocol(format!("invalid detections: {e}")))?;
        let mut out = Vec::with_capacity(parsed.len());
        for d in parsed {
            let bbox = BBox::new(d.bbox[0], d.bbox[1], d.bbox[2], d.bbox[3])
                .map_err(|e| protocol(format!("invalid detection box: {e}")))?;
            out.push(Detection { category: d.category, bbox, score: d.score });
        }
        return Ok(ModelResponse::Detections(out));
    }
    if let Some(mask) = output.get("mask_rle") {
        let rle: RleMask = serde_json::from_value(mask.clone())
            .map_err(|e| protocol(format!("invalid mask_rle: {e}")))?;
        let mask = rle.decode().map_err(|e| protocol(format!("invalid RLE runs: {e}")))?;
        return Ok(ModelResponse::Mask(mask));
    }
    if let Some(embedding) = output.get("embedding") {
        let values: Vec<f64> = serde_json::from_value(embedding.clone())
            .map_err(|e| protocol(format!("invalid embedding: {e}")))?;
        return Ok(ModelResponse::Embedding(values));
    }
    Err(protocol("output carries no recognized payload".to_string()))
}

#[derive(serde::Deserialize)]
struct WireDetection {
    category: String,
    #[serde(rename = "box")]
    bbox: [u32; 4],
    score: f64,
}

impl ModelBackend for HttpBackend {
    fn call(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        let counter = self.request_counter.fetch_add(1, Ordering::Relaxed);
        let request_id = format!("{}-{counter}", self.endpoint.role.as_str());
        let body = encode_request(request, &request_id).to_string();
        let response_body = self.post_with_retries(&body)?;
        decode_response(self.endpoint.role, &response_body)
    }

    fn backend_id(&self) -> String {
        format!("http:{}", self.endpoint.base_url)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_wire_shape() {
        let request = ModelRequest::Segment {
            image: crate::imaging::synthesize_image(8, 8, 1),
            bbox: BBox::new(1, 2, 5, 6).unwrap(),
            seed: 9,
        };
        let value = encode_request(&request, "segmenter-0");
        assert_eq!(value["role"], "segmenter");
        assert_eq!(value["request_id"], "segmenter-0");
        assert_eq!(value["inputs"]["box"], json!([1, 2, 5, 6]));
        assert_eq!(value["inputs"]["seed"], 9);
        assert!(value["inputs"]["images"][0].is_string());
    }

    #[test]
    fn decode_text_response() {
        let response = decode_response(ModelRole::TextGen, r#"{"output":{"text":"hi"}}"#).unwrap();
        assert!(matches!(response, ModelResponse::Text(t) if t == "hi"));
    }

    #[test]
    fn decode_rejects_malformed_body() {
        let err = decode_response(ModelRole::TextGen, "not json").unwrap_err();
        assert!(matches!(err, GatewayError::Protocol { .. }));
        let err = decode_response(ModelRole::TextGen, r#"{"output":{}}"#).unwrap_err();
        assert!(matches!(err, GatewayError::Protocol { .. }));
    }

    #[test]
    fn decode_mask_round_trips_rle() {
        let body = r#"{"output":{"mask_rle":{"width":4,"height":1,"counts":[1,2,1]}}}"#;
        let response = decode_response(ModelRole::Segmenter, body).unwrap();
        let ModelResponse::Mask(mask) = response else { panic!("expected mask") };
        assert!(!mask.get(0, 0) && mask.get(1, 0) && mask.get(2, 0) && !mask.get(3, 0));
    }
}

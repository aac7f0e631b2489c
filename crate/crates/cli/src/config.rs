//! Run configuration: built-in defaults, overlaid by a flat TOML config
//! file, overlaid by command-line flags.

use std::collections::BTreeMap;
use std::path::PathBuf;

use subjectforge_core::forge::{FaultProfile, ForgeConfig};
use subjectforge_core::gateway::mock::MockConfig;
use subjectforge_core::gateway::{Gateway, ModelEndpoint, ModelRole};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendMode {
    Mock,
    Live,
}

impl BackendMode {
    pub fn parse(value: &str) -> Result<Self, String> {
        match value {
            "mock" => Ok(BackendMode::Mock),
            "live" => Ok(BackendMode::Live),
            other => Err(format!("backend must be 'mock' or 'live', got {other:?}")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub vocabulary_path: PathBuf,
    pub output_root: PathBuf,
    pub n_min: u32,
    pub n_max: u32,
    pub delta: f64,
    pub m: u32,
    pub lambda: f64,
    pub complex_prob: f64,
    pub with_ids_ratio: f64,
    pub workers: usize,
    pub global_seed: u64,
    pub backend: BackendMode,
    pub mock_image_size: u32,
    /// Minimum chain-of-thought words; defaults to 30 for mock backends and
    /// 300 for live ones when unset.
    pub cot_min_words: Option<usize>,
    pub endpoints: BTreeMap<String, String>,
    pub endpoint_auth_env: String,
    pub endpoint_timeout_secs: u64,
    pub endpoint_max_retries: u32,
    pub fault: Option<FaultProfile>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            vocabulary_path: PathBuf::from("assets/vocabulary.txt"),
            output_root: PathBuf::from("dataset"),
            n_min: 1,
            n_max: 12,
            delta: 0.01,
            m: 8,
            lambda: 0.05,
            complex_prob: 0.3,
            with_ids_ratio: 0.5,
            workers: 4,
            global_seed: 42,
            backend: BackendMode::Mock,
            mock_image_size: 64,
            cot_min_words: None,
            endpoints: BTreeMap::new(),
            endpoint_auth_env: String::new(),
            endpoint_timeout_secs: 30,
            endpoint_max_retries: 2,
            fault: None,
        }
    }
}

impl RunConfig {
    /// Overlay flat `key = value` entries from a TOML document.
    pub fn apply_file(&mut self, text: &str) -> Result<(), String> {
        let table: toml::Table = text.parse().map_err(|e| format!("config parse: {e}"))?;
        for (key, value) in table {
            self.apply_entry(&key, &value)
                .map_err(|e| format!("config key {key:?}: {e}"))?;
        }
        Ok(())
    }

    fn apply_entry(&mut self, key: &str, value: &toml::Value) -> Result<(), String> {
        let as_str = || value.as_str().map(str::to_string).ok_or("expected string".to_string());
        let as_u64 = || {
            value
                .as_integer()
                .and_then(|v| u64::try_from(v).ok())
                .ok_or("expected non-negative integer".to_string())
        };
        let as_f64 = || {
            value
                .as_float()
                .or_else(|| value.as_integer().map(|v| v as f64))
                .ok_or("expected number".to_string())
        };
        match key {
            "vocabulary_path" => self.vocabulary_path = PathBuf::from(as_str()?),
            "output_root" => self.output_root = PathBuf::from(as_str()?),
            "n_min" => self.n_min = as_u64()? as u32,
            "n_max" => self.n_max = as_u64()? as u32,
            "delta" => self.delta = as_f64()?,
            "m" => self.m = as_u64()? as u32,
            "lambda" => self.lambda = as_f64()?,
            "complex_prob" => self.complex_prob = as_f64()?,
            "with_ids_ratio" => self.with_ids_ratio = as_f64()?,
            "workers" => self.workers = as_u64()? as usize,
            "global_seed" => self.global_seed = as_u64()?,
            "backend" => self.backend = BackendMode::parse(&as_str()?)?,
            "mock_image_size" => self.mock_image_size = as_u64()? as u32,
            "cot_min_words" => self.cot_min_words = Some(as_u64()? as usize),
            "endpoint_auth_env" => self.endpoint_auth_env = as_str()?,
            "endpoint_timeout_secs" => self.endpoint_timeout_secs = as_u64()?,
            "endpoint_max_retries" => self.endpoint_max_retries = as_u64()? as u32,
            other => {
                if let Some(role) = other.strip_prefix("endpoint_") {
                    self.endpoints.insert(role.to_string(), as_str()?);
                } else {
                    return Err("unknown key".to_string());
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n_min < 1 || self.n_min > self.n_max {
            return Err(format!("need 1 <= n_min <= n_max, got {} and {}", self.n_min, self.n_max));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(format!("delta {} outside [0,1]", self.delta));
        }
        if self.lambda < 0.0 {
            return Err(format!("lambda {} negative", self.lambda));
        }
        if self.m < 1 {
            return Err("m must be >= 1".to_string());
        }
        if self.workers < 1 {
            return Err("workers must be >= 1".to_string());
        }
        if self.backend == BackendMode::Live {
            for role in ModelRole::ALL {
                if !self.endpoints.contains_key(role.as_str()) {
                    return Err(format!("live backend needs endpoint_{}", role.as_str()));
                }
            }
        }
        Ok(())
    }

    pub fn resolved_cot_min_words(&self) -> usize {
        self.cot_min_words.unwrap_or(match self.backend {
            BackendMode::Mock => 30,
            BackendMode::Live => 300,
        })
    }

    pub fn forge_config(&self) -> ForgeConfig {
        ForgeConfig {
            n_min: self.n_min,
            n_max: self.n_max,
            delta: self.delta,
            m: self.m,
            lambda: self.lambda,
            complex_prob: self.complex_prob,
            with_ids_ratio: self.with_ids_ratio,
            cot_min_words: self.resolved_cot_min_words(),
            caption_attempts: 3,
            fault_profile: self.fault,
        }
    }

    pub fn build_gateway(&self) -> Result<Gateway, String> {
        match self.backend {
            BackendMode::Mock => Ok(Gateway::mock(MockConfig {
                image_size: self.mock_image_size,
                ..MockConfig::default()
            })),
            BackendMode::Live => {
                let endpoints: Vec<ModelEndpoint> = ModelRole::ALL
                    .iter()
                    .map(|role| ModelEndpoint {
                        role: *role,
                        base_url: self.endpoints[role.as_str()].clone(),
                        auth_token_env: self.endpoint_auth_env.clone(),
                        timeout_secs: self.endpoint_timeout_secs,
                        max_retries: self.endpoint_max_retries,
                    })
                    .collect();
                Gateway::live(endpoints).map_err(|e| e.to_string())
            }
        }
    }

    /// Second embedder for evaluation: a salted mock, or the
    /// `endpoint_embedder_b` URL under the live backend.
    pub fn build_embedder_b(&self) -> Result<Gateway, String> {
        match self.backend {
            BackendMode::Mock => Ok(Gateway::mock(MockConfig {
                image_size: self.mock_image_size,
                salt: "embedder-b".to_string(),
                ..MockConfig::default()
            })),
            BackendMode::Live => {
                let url = self
                    .endpoints
                    .get("embedder_b")
                    .ok_or("live eval needs endpoint_embedder_b")?;
                Gateway::live(vec![ModelEndpoint {
                    role: ModelRole::Embedder,
                    base_url: url.clone(),
                    auth_token_env: self.endpoint_auth_env.clone(),
                    timeout_secs: self.endpoint_timeout_secs,
                    max_retries: self.endpoint_max_retries,
                }])
                .map_err(|e| e.to_string())
            }
        }
    }
}

pub fn load_vocabulary(path: &std::path::Path) -> Result<Vec<String>, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("vocabulary {}: {e}", path.display()))?;
    let vocabulary: Vec<String> =
        text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect();
    if vocabulary.is_empty() {
        return Err(format!("vocabulary {} is empty", path.display()));
    }
    Ok(vocabulary)
}

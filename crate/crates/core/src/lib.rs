//! Dataset-construction and plan-selection engine for multi-subject
//! image-generation training data.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`geometry`] — boxes, masks, patch tilings, IoU, dynamic thresholds
//! - [`gateway`] — clients for the seven external model roles (mock + HTTP)
//! - [`forge`] — scene synthesis: sampling, captioning, detection, transforms
//! - [`layout`] — semantics-driven patch-grid planning and its text format
//! - [`narrative`] — instruction / chain-of-thought generation and ID hygiene
//! - [`augment`] — subject-count reduction and the category-similarity dictionary
//! - [`store`] — record schema, JSONL manifest, resume, failure accounting
//! - [`tts`] — best-of-N planning branch selection
//! - [`evalkit`] — embedding-based metrics and layout agreement

pub mod annotate;
pub mod augment;
pub mod gateway;
pub mod geometry;
pub mod imaging;
pub mod evalkit;
pub mod forge;
pub mod layout;
pub mod narrative;
pub mod rng;
pub mod store;
pub mod tts;
pub mod templates;

//! Embedding-based evaluation: image-image and image-text cosine metrics
//! under two embedders, per-subject-count sweeps, and layout agreement.
//!
//! The layout-agreement formulas are per-class cell-set Jaccard averaged
//! over the classes present in either grid, and reference-normalized
//! category coverage. These are the minimal definitions consistent with the
//! metric names; treat cross-system comparisons accordingly.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Embedder, GatewayError};
use crate::imaging::ImageData;
use crate::layout::PatchGrid;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Reference values rendered alongside measured metrics in reports.
/// Informational labels only; never asserted.
pub const REFERENCE_IMAGE_IMAGE_A: f64 = 0.622;
pub const REFERENCE_IMAGE_IMAGE_B: f64 = 0.812;
pub const REFERENCE_IMAGE_TEXT: f64 = 0.322;
pub const REFERENCE_PATCH_IOU: f64 = 0.47;
pub const REFERENCE_CATEGORY_COVERAGE: f64 = 0.76;

pub const MIN_SUBJECT_COUNT: u32 = 1;
pub const MAX_SUBJECT_COUNT: u32 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub image_image_a: f64,
    pub image_image_b: f64,
    pub image_text: f64,
}

/// Score one generated image: mean cosine against the references under each
/// image embedder, plus cosine against the instruction under embedder A.
pub fn score_sample(
    generated: &ImageData,
    references: &[ImageData],
    instruction: &str,
    embedder_a: &dyn Embedder,
    embedder_b: &dyn Embedder,
) -> Result<SampleMetrics, EvalError> {
    if references.is_empty() {
        return Err(EvalError::InvalidArgument("at least one reference image required".into()));
    }
    let gen_a = embedder_a.embed_image(generated)?;
    let gen_b = embedder_b.embed_image(generated)?;
    let mut sum_a = 0.0;
    let mut sum_b = 0.0;
    for reference in references {
        sum_a += gen_a.cosine(&embedder_a.embed_image(reference)?);
        sum_b += gen_b.cosine(&embedder_b.embed_image(reference)?);
    }
    let count = references.len() as f64;
    let text_vec = embedder_a.embed_text(instruction)?;
    Ok(SampleMetrics {
        image_image_a: sum_a / count,
        image_image_b: sum_b / count,
        image_text: gen_a.cosine(&text_vec),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub subject_count: u32,
    pub metrics: SampleMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub subject_count: u32,
    pub count: usize,
    pub mean: Option<SampleMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sample_count: usize,
    pub mean: Option<SampleMetrics>,
    pub buckets: Vec<BucketReport>,
}

fn mean_of(samples: &[&SampleMetrics]) -> Option<SampleMetrics> {
    if samples.is_empty() {
        return None;
    }
    let n = samples.len() as f64;
    Some(SampleMetrics {
        image_image_a: samples.iter().map(|m| m.image_image_a).sum::<f64>() / n,
        image_image_b: samples.iter().map(|m| m.image_image_b).sum::<f64>() / n,
        image_text: samples.iter().map(|m| m.image_text).sum::<f64>() / n,
    })
}

/// Bucket scored samples by subject count (domain 1..=12) and report bucket
/// and global means. Empty buckets appear with count 0 and no mean.
pub fn sweep_by_subject_count(samples: &[ScoredSample]) -> Result<MetricReport, EvalError> {
    for sample in samples {
        if !(MIN_SUBJECT_COUNT..=MAX_SUBJECT_COUNT).contains(&sample.subject_count) {
            return Err(EvalError::InvalidArgument(format!(
                "subject count {} outside [{MIN_SUBJECT_COUNT}, {MAX_SUBJECT_COUNT}]",
                sample.subject_count
            )));
        }
    }
    let buckets = (MIN_SUBJECT_COUNT..=MAX_SUBJECT_COUNT)
        .map(|s| {
            let members: Vec<&SampleMetrics> = samples
                .iter()
                .filter(|x| x.subject_count == s)
                .map(|x| &x.metrics)
                .collect();
            BucketReport { subject_count: s, count: members.len(), mean: mean_of(&members) }
        })
        .collect();
    let all: Vec<&SampleMetrics> = samples.iter().map(|x| &x.metrics).collect();
    Ok(MetricReport { sample_count: samples.len(), mean: mean_of(&all), buckets })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayoutAgreement {
    pub patch_iou: f64,
    pub category_coverage: f64,
}

/// Agreement between a predicted and a reference grid.
///
/// `patch_iou` is the mean over classes (present in either grid) of the
/// Jaccard index of their labeled cell sets; it is symmetric under swapping
/// the grids. `category_coverage` is the fraction of reference classes the
/// prediction mentions at all; it is reference-normalized and therefore
/// not symmetric. Two grids with no labeled cells agree vacuously at
/// (1.0, 1.0).
pub fn layout_agreement(
    predicted: &PatchGrid,
    reference: &PatchGrid,
) -> Result<LayoutAgreement, EvalError> {
    if predicted.m() != reference.m() {
        return Err(EvalError::InvalidArgument(format!(
            "grid sides differ: {} vs {}",
            predicted.m(),
            reference.m()
        )));
    }
    let predicted_classes = predicted.present_classes();
    let reference_classes = reference.present_classes();
    let union: BTreeSet<&String> = predicted_classes.union(&reference_classes).collect();

    let patch_iou = if union.is_empty() {
        1.0
    } else {
        let mut sum = 0.0;
        for class in &union {
            let p = predicted.cells_with(class);
            let r = reference.cells_with(class);
            let intersection = p.intersection(&r).count() as f64;
            let union_cells = p.union(&r).count() as f64;
            sum += intersection / union_cells;
        }
        sum / union.len() as f64
    };

    let category_coverage = if reference_classes.is_empty() {
        1.0
    } else {
        predicted_classes.intersection(&reference_classes).count() as f64
            / reference_classes.len() as f64
    };

    Ok(LayoutAgreement { patch_iou, category_coverage })
}

/// Text table mirroring the benchmark column structure, with reference
/// labels alongside measured means.
pub fn render_metric_table(report: &MetricReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<16} {:>10} {:>11}\n", "Metric", "Mean", "Reference"));
    let rows = [
        ("image-image A", report.mean.map(|m| m.image_image_a), REFERENCE_IMAGE_IMAGE_A),
        ("image-image B", report.mean.map(|m| m.image_image_b), REFERENCE_IMAGE_IMAGE_B),
        ("image-text", report.mean.map(|m| m.image_text), REFERENCE_IMAGE_TEXT),
    ];
    for (name, mean, reference) in rows {
        match mean {
            Some(v) => out.push_str(&format!("{name:<16} {v:>10.4} {reference:>11.3}\n")),
            None => out.push_str(&format!("{name:<16} {:>10} {reference:>11.3}\n", "-")),
        }
    }
    out.push_str(&format!("Samples scored: {}\n", report.sample_count));
    out.push_str(&format!(
        "{:>2} {:>6} {:>12} {:>12} {:>12}\n",
        "S", "count", "img-img A", "img-img B", "img-text"
    ));
    for bucket in &report.buckets {
        match bucket.mean {
            Some(m) => out.push_str(&format!(
                "{:>2} {:>6} {:>12.4} {:>12.4} {:>12.4}\n",
                bucket.subject_count, bucket.count, m.image_image_a, m.image_image_b, m.image_text
            )),
            None => out.push_str(&format!(
                "{:>2} {:>6} {:>12} {:>12} {:>12}\n",
                bucket.subject_count, bucket.count, "-", "-", "-"
            )),
        }
    }
    out
}

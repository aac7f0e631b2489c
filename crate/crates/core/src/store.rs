//! Record schema, on-disk layout, resumable manifests, and per-stage
//! failure accounting.
//!
//! The manifest is append-only JSONL: one schema-validated record per line,
//! images persisted as PNG files under `{root}/{scene_id}/`. Records carry
//! no timestamps, so determinism checks can compare manifests byte for
//! byte.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{passes_area_filter, RleMask};
use crate::imaging::ImageData;
use crate::layout::{assign_patches, parse_layout, serialize_layout, PlacedSubject, RegionMode};
use crate::narrative::{extract_ids, CoTText, InstructionText};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("record {scene_id} invalid at {path}: {message}")]
    Validation { scene_id: String, path: String, message: String },
    #[error("manifest line {line}: {detail}")]
    Corrupt { line: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization failed: {0}")]
    Serde(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Simple,
    Complex,
}

/// One detected subject within a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: usize,
    pub category: String,
    #[serde(rename = "box")]
    pub bbox: crate::geometry::BBox,
    pub mask: Option<RleMask>,
    pub region_mode: RegionMode,
    pub score: f64,
    pub crop: String,
    pub transformed: String,
    pub transform_kind: TransformKind,
}

impl SubjectRecord {
    /// The region used for layout assignment, per the record's region mode.
    pub fn region(&self) -> Result<crate::geometry::Region, String> {
        match self.region_mode {
            RegionMode::Box => Ok(crate::geometry::Region::Box(self.bbox)),
            RegionMode::Mask => {
                let rle = self.mask.as_ref().ok_or("region_mode is mask but mask is absent")?;
                let mask = rle.decode().map_err(|e| e.to_string())?;
                Ok(crate::geometry::Region::Mask(mask))
            }
        }
    }
}

/// Pipeline configuration snapshot embedded in provenance so a record can
/// be revalidated without the original run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub n_min: u32,
    pub n_max: u32,
    pub delta: f64,
    pub m: u32,
    pub lambda: f64,
    pub complex_prob: f64,
    pub with_ids_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub global_seed: u64,
    pub scene_seed: u64,
    pub scene_index: u64,
    pub template_ids: Vec<String>,
    pub backends: Vec<String>,
    pub parent_scene_id: Option<String>,
    pub derivation_step: Option<u32>,
    pub config: ConfigSnapshot,
}

/// One complete training instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub scene_id: String,
    pub width: u32,
    pub height: u32,
    pub subject_images: Vec<String>,
    pub target_image: String,
    pub instruction: InstructionText,
    pub cot: CoTText,
    pub layout_prompt: String,
    pub subjects: Vec<SubjectRecord>,
    pub provenance: Provenance,
}

/// Check every record invariant. The error names the failing field path.
pub fn validate_record(record: &TrainingRecord) -> Result<(), StoreError> {
    let fail = |path: &str, message: String| StoreError::Validation {
        scene_id: record.scene_id.clone(),
        path: path.to_string(),
        message,
    };

    let subject_count = record.subjects.len();
    if subject_count == 0 {
        return Err(fail("subjects", "record has no subjects".into()));
    }
    if subject_count > record.provenance.config.n_max as usize {
        return Err(fail(
            "subjects",
            format!("{subject_count} subjects exceed n_max {}", record.provenance.config.n_max),
        ));
    }
    if record.subject_images.len() != subject_count {
        return Err(fail(
            "subject_images",
            format!("{} images for {subject_count} subjects", record.subject_images.len()),
        ));
    }
    if record.width == 0 || record.height == 0 {
        return Err(fail("width", "zero image dimension".into()));
    }

    for (i, subject) in record.subjects.iter().enumerate() {
        let path = format!("subjects[{i}]");
        if subject.subject_id != i {
            return Err(fail(
                &format!("{path}.subject_id"),
                format!("expected {i}, found {}", subject.subject_id),
            ));
        }
        if subject.category.trim().is_empty() {
            return Err(fail(&format!("{path}.category"), "empty category".into()));
        }
        let b = subject.bbox;
        if b.x_min >= b.x_max || b.y_min >= b.y_max {
            return Err(fail(&format!("{path}.box"), format!("degenerate box {b:?}")));
        }
        if !b.contains_within(record.width, record.height) {
            return Err(fail(
                &format!("{path}.box"),
                format!("box {b:?} outside {}x{}", record.width, record.height),
            ));
        }
        if !passes_area_filter(&b, record.width, record.height, record.provenance.config.delta) {
            return Err(fail(
                &format!("{path}.box"),
                format!("area {} below delta threshold", b.area()),
            ));
        }
        if !(0.0..=1.0).contains(&subject.score) {
            return Err(fail(&format!("{path}.score"), format!("{} outside [0,1]", subject.score)));
        }
        if let Some(mask) = &subject.mask {
            if mask.width != record.width || mask.height != record.height {
                return Err(fail(
                    &format!("{path}.mask"),
                    format!("mask {}x{} does not match image", mask.width, mask.height),
                ));
            }
            if mask.decode().is_err() {
                return Err(fail(&format!("{path}.mask"), "RLE runs do not sum to area".into()));
            }
        }
        if subject.region_mode == RegionMode::Mask && subject.mask.is_none() {
            return Err(fail(&format!("{path}.mask"), "region_mode is mask but mask absent".into()));
        }
    }

    let valid_ids: BTreeSet<usize> = (0..subject_count).collect();
    check_text_ids(&record.instruction.text, &record.instruction.referenced_ids, &valid_ids)
        .map_err(|m| fail("instruction", m))?;
    if record.instruction.with_ids && record.instruction.referenced_ids.is_empty() {
        return Err(fail("instruction.referenced_ids", "with_ids set but no ids referenced".into()));
    }
    if !record.instruction.with_ids && !record.instruction.referenced_ids.is_empty() {
        return Err(fail("instruction.referenced_ids", "ids referenced in no-ids mode".into()));
    }
    check_text_ids(&record.cot.text, &record.cot.referenced_ids, &valid_ids)
        .map_err(|m| fail("cot", m))?;
    if record.cot.word_count != crate::narrative::word_count(&record.cot.text) {
        return Err(fail("cot.word_count", "stored word count does not match text".into()));
    }

    let grid = parse_layout(&record.layout_prompt)
        .map_err(|e| fail("layout_prompt", e.to_string()))?;
    if grid.m() != record.provenance.config.m {
        return Err(fail(
            "layout_prompt",
            format!("grid side {} does not match configured {}", grid.m(), record.provenance.config.m),
        ));
    }
    let categories: BTreeSet<&str> =
        record.subjects.iter().map(|s| s.category.as_str()).collect();
    for class in grid.focus_classes() {
        if !categories.contains(class.as_str()) {
            return Err(fail(
                "layout_prompt",
                format!("focus class {class:?} is not a subject category"),
            ));
        }
    }

    // Assignment soundness: the grid must equal a fresh assignment computed
    // from the stored regions under the stored configuration.
    let mut placed = Vec::with_capacity(subject_count);
    for (i, subject) in record.subjects.iter().enumerate() {
        let region =
            subject.region().map_err(|m| fail(&format!("subjects[{i}].mask"), m))?;
        placed.push(PlacedSubject { category: subject.category.clone(), region });
    }
    let recomputed = assign_patches(
        &placed,
        record.width,
        record.height,
        record.provenance.config.m,
        record.provenance.config.lambda,
    )
    .map_err(|e| fail("layout_prompt", e.to_string()))?;
    if serialize_layout(&recomputed) != record.layout_prompt {
        return Err(fail(
            "layout_prompt",
            "layout does not match recomputed assignment from stored regions".into(),
        ));
    }
    Ok(())
}

fn check_text_ids(
    text: &str,
    stored: &BTreeSet<usize>,
    valid: &BTreeSet<usize>,
) -> Result<(), String> {
    let found = extract_ids(text);
    if &found != stored {
        return Err(format!("referenced_ids {stored:?} do not match text ids {found:?}"));
    }
    if !found.is_subset(valid) {
        return Err(format!("text references ids {found:?} outside valid {valid:?}"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommitReceipt {
    /// Byte offset of the committed line within the manifest.
    pub offset: u64,
}

/// Validate and atomically append one record line. On a partial write the
/// manifest is truncated back to its previous length.
pub fn append_record(manifest: &Path, record: &TrainingRecord) -> Result<CommitReceipt, StoreError> {
    validate_record(record)?;
    let mut file = OpenOptions::new().create(true).append(true).open(manifest)?;
    let offset = file.seek(std::io::SeekFrom::End(0))?;
    let mut line = serde_json::to_string(record)?;
    line.push('\n');
    if let Err(e) = file.write_all(line.as_bytes()).and_then(|_| file.flush()) {
        let _ = file.set_len(offset);
        return Err(e.into());
    }
    Ok(CommitReceipt { offset })
}

/// Stream-parse a manifest. A corrupt line halts with its line number.
pub fn read_manifest(manifest: &Path) -> Result<Vec<TrainingRecord>, StoreError> {
    if !manifest.exists() {
        return Ok(Vec::new());
    }
    let reader = BufReader::new(File::open(manifest)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TrainingRecord = serde_json::from_str(&line)
            .map_err(|e| StoreError::Corrupt { line: i + 1, detail: e.to_string() })?;
        records.push(record);
    }
    Ok(records)
}

/// Scene ids in `requested` that have no committed record yet, in request
/// order.
pub fn resume_plan(manifest: &Path, requested: &[String]) -> Result<Vec<String>, StoreError> {
    let committed: BTreeSet<String> =
        read_manifest(manifest)?.into_iter().map(|r| r.scene_id).collect();
    Ok(requested.iter().filter(|id| !committed.contains(*id)).cloned().collect())
}

/// Revalidate every record of a manifest. Returns the record count, or the
/// first failure.
pub fn validate_manifest(manifest: &Path) -> Result<usize, StoreError> {
    let records = read_manifest(manifest)?;
    for record in &records {
        validate_record(record)?;
    }
    Ok(records.len())
}

// ---------------------------------------------------------------------------
// Failure accounting
// ---------------------------------------------------------------------------

/// Pipeline stages in execution order. A scene passes through each stage in
/// turn and is dropped at the first failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    T2iMismatch,
    DetectionSparse,
    OvdVerify,
    Segmentation,
    Simdict,
    Transform,
    VlmValidation,
    CotShort,
}

impl Stage {
    pub const ORDER: [Stage; 8] = [
        Stage::T2iMismatch,
        Stage::DetectionSparse,
        Stage::OvdVerify,
        Stage::Segmentation,
        Stage::Simdict,
        Stage::Transform,
        Stage::VlmValidation,
        Stage::CotShort,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::T2iMismatch => "t2i_mismatch",
            Stage::DetectionSparse => "detection_sparse",
            Stage::OvdVerify => "ovd_verify",
            Stage::Segmentation => "segmentation",
            Stage::Simdict => "simdict",
            Stage::Transform => "transform",
            Stage::VlmValidation => "vlm_validation",
            Stage::CotShort => "cot_short",
        }
    }

    fn position(&self) -> usize {
        Stage::ORDER.iter().position(|s| s == self).unwrap()
    }

    fn mitigation(&self) -> &'static str {
        match self {
            Stage::T2iMismatch => "caption class check and bounded regeneration",
            Stage::DetectionSparse => "area threshold and diversity selection",
            Stage::OvdVerify => "annotated overlay verification",
            Stage::Segmentation => "cosine mask-vs-box fallback",
            Stage::Simdict => "dictionary entry validation",
            Stage::Transform => "per-subject transform isolation",
            Stage::VlmValidation => "ID-string consistency check",
            Stage::CotShort => "length floor with regeneration",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub attempted: u64,
    pub passed: u64,
    pub failed: u64,
}

/// Reference retained-sample rate rendered alongside measured retention in
/// reports. Informational only; never asserted.
pub const REFERENCE_RETENTION_PERCENT: f64 = 68.1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineStats {
    pub scenes_requested: u64,
    pub scenes_retained: u64,
    stages: Vec<(Stage, StageCounts)>,
}

impl PipelineStats {
    pub fn new() -> Self {
        Self {
            scenes_requested: 0,
            scenes_retained: 0,
            stages: Stage::ORDER.iter().map(|s| (*s, StageCounts::default())).collect(),
        }
    }

    pub fn counts(&self, stage: Stage) -> StageCounts {
        self.stages[stage.position()].1
    }

    pub fn stages(&self) -> &[(Stage, StageCounts)] {
        &self.stages
    }

    /// Record one scene outcome: `failed_at` names the stage that dropped
    /// the scene, or `None` when it survived the full pipeline.
    pub fn record_scene(&mut self, failed_at: Option<Stage>) {
        self.scenes_requested += 1;
        let stop = failed_at.map(|s| s.position());
        for (i, (_, counts)) in self.stages.iter_mut().enumerate() {
            match stop {
                Some(fail_pos) if i < fail_pos => {
                    counts.attempted += 1;
                    counts.passed += 1;
                }
                Some(fail_pos) if i == fail_pos => {
                    counts.attempted += 1;
                    counts.failed += 1;
                }
                Some(_) => {}
                None => {
                    counts.attempted += 1;
                    counts.passed += 1;
                }
            }
        }
        if failed_at.is_none() {
            self.scenes_retained += 1;
        }
    }

    pub fn merge(&mut self, other: &PipelineStats) {
        self.scenes_requested += other.scenes_requested;
        self.scenes_retained += other.scenes_retained;
        for (i, (_, counts)) in self.stages.iter_mut().enumerate() {
            counts.attempted += other.stages[i].1.attempted;
            counts.passed += other.stages[i].1.passed;
            counts.failed += other.stages[i].1.failed;
        }
    }

    /// `passed(final stage) / attempted(first stage)`.
    pub fn retained_fraction(&self) -> f64 {
        let first = self.stages.first().map(|(_, c)| c.attempted).unwrap_or(0);
        let last = self.stages.last().map(|(_, c)| c.passed).unwrap_or(0);
        if first == 0 {
            return 0.0;
        }
        last as f64 / first as f64
    }

    pub fn check_identity(&self) -> bool {
        self.stages.iter().all(|(_, c)| c.attempted == c.passed + c.failed)
    }
}

/// Render the per-stage failure table plus retention summary.
pub fn report_stats(stats: &PipelineStats) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<18} {:>9} {:>8} {:>7} {:>13}   {}\n",
        "Pipeline stage", "Attempted", "Passed", "Failed", "Failure rate", "Mitigation"
    ));
    for (stage, counts) in &stats.stages {
        let rate = if counts.attempted == 0 {
            0.0
        } else {
            100.0 * counts.failed as f64 / counts.attempted as f64
        };
        out.push_str(&format!(
            "{:<18} {:>9} {:>8} {:>7} {:>12.1}%   {}\n",
            stage.as_str(),
            counts.attempted,
            counts.passed,
            counts.failed,
            rate,
            stage.mitigation()
        ));
    }
    out.push_str(&format!(
        "Final retained samples: {:.1}% ({} of {})\n",
        100.0 * stats.retained_fraction(),
        stats.scenes_retained,
        stats.scenes_requested
    ));
    out.push_str(&format!(
        "Reference retained-sample rate: {REFERENCE_RETENTION_PERCENT:.1}% (reference only)\n"
    ));
    out
}

/// Destination for committed scenes. `scene_failed` observes drops for
/// logging; the default does nothing.
pub trait RecordSink {
    fn commit(&mut self, record: &TrainingRecord, images: &[(String, ImageData)])
        -> Result<CommitReceipt, StoreError>;

    fn scene_failed(&mut self, _scene_id: &str, _stage: Stage, _detail: &str) {}
}

/// Persists images under `{root}/{scene_id}/` and appends to the manifest.
pub struct ManifestSink {
    root: PathBuf,
    manifest: PathBuf,
}

impl ManifestSink {
    pub fn new(root: &Path) -> Result<Self, StoreError> {
        std::fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf(), manifest: root.join("manifest.jsonl") })
    }

    pub fn manifest_path(&self) -> &Path {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl RecordSink for ManifestSink {
    fn commit(
        &mut self,
        record: &TrainingRecord,
        images: &[(String, ImageData)],
    ) -> Result<CommitReceipt, StoreError> {
        for (rel_path, image) in images {
            let path = self.root.join(rel_path);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(&path, &image.png)?;
        }
        append_record(&self.manifest, record)
    }
}

/// Counts commits without touching the filesystem. Used by accounting runs
/// and benchmarks.
#[derive(Debug, Default)]
pub struct NullSink {
    pub committed: u64,
}

impl RecordSink for NullSink {
    fn commit(
        &mut self,
        record: &TrainingRecord,
        _images: &[(String, ImageData)],
    ) -> Result<CommitReceipt, StoreError> {
        validate_record(record)?;
        self.committed += 1;
        Ok(CommitReceipt { offset: self.committed })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_accounting_identity() {
        let mut stats = PipelineStats::new();
        stats.record_scene(None);
        stats.record_scene(Some(Stage::OvdVerify));
        stats.record_scene(Some(Stage::T2iMismatch));
        stats.record_scene(None);
        assert!(stats.check_identity());
        assert_eq!(stats.counts(Stage::T2iMismatch).attempted, 4);
        assert_eq!(stats.counts(Stage::T2iMismatch).failed, 1);
        assert_eq!(stats.counts(Stage::OvdVerify).attempted, 3);
        assert_eq!(stats.counts(Stage::OvdVerify).failed, 1);
        assert_eq!(stats.counts(Stage::CotShort).attempted, 2);
        assert_eq!(stats.scenes_retained, 2);
        assert!((stats.retained_fraction() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_failures_is_full_retention() {
        let mut stats = PipelineStats::new();
        for _ in 0..10 {
            stats.record_scene(None);
        }
        assert!((stats.retained_fraction() - 1.0).abs() < 1e-12);
        let table = report_stats(&stats);
        assert!(table.contains("Final retained samples: 100.0% (10 of 10)"));
        assert!(table.contains("68.1%"));
    }

    #[test]
    fn merge_preserves_identity() {
        let mut a = PipelineStats::new();
        a.record_scene(Some(Stage::Segmentation));
        let mut b = PipelineStats::new();
        b.record_scene(None);
        a.merge(&b);
        assert!(a.check_identity());
        assert_eq!(a.scenes_requested, 2);
    }

    #[test]
    fn resume_plan_on_missing_manifest_returns_all() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("manifest.jsonl");
        let requested = vec!["a".to_string(), "b".to_string()];
        assert_eq!(resume_plan(&manifest, &requested).unwrap(), requested);
    }

    #[test]
    fn corrupt_manifest_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("manifest.jsonl");
        std::fs::write(&manifest, "{not json}\n").unwrap();
        let err = read_manifest(&manifest).unwrap_err();
        assert!(matches!(err, StoreError::Corrupt { line: 1, .. }));
    }
}

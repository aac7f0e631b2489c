//! Semantics-driven spatial layout planning: choosing mask vs. box per
//! subject, assigning subject categories to grid patches under a dynamic
//! IoU threshold, and converting the grid to and from its exact prompt
//! text form.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::EmbeddingVector;
use crate::geometry::{dynamic_threshold, region_patch_ious, tile_image, GeometryError, Region};

pub const LAYOUT_HEADER_PREFIX: &str = "Here is the segmentation map focusing on";
pub const LAYOUT_TRAILER: &str = "Now, generate an image.";
const EMPTY_CELL_LABEL: &str = "others";

#[derive(Debug, Error, PartialEq)]
pub enum LayoutError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("layout format error: {0}")]
    Format(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Whether a subject's region is its segmentation mask or its bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionMode {
    Mask,
    Box,
}

/// M x M multi-label category assignment over the target image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    m: u32,
    cells: Vec<BTreeSet<String>>,
    focus_classes: Vec<String>,
}

impl PatchGrid {
    pub fn new(m: u32, focus_classes: Vec<String>) -> Result<Self, LayoutError> {
        if m < 1 {
            return Err(LayoutError::InvalidArgument("grid side must be >= 1".into()));
        }
        let grid = Self {
            m,
            cells: vec![BTreeSet::new(); (m as usize) * (m as usize)],
            focus_classes,
        };
        grid.check_focus_classes()?;
        Ok(grid)
    }

    pub fn m(&self) -> u32 {
        self.m
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn cells(&self) -> &[BTreeSet<String>] {
        &self.cells
    }

    pub fn cell(&self, index: usize) -> &BTreeSet<String> {
        &self.cells[index]
    }

    pub fn focus_classes(&self) -> &[String] {
        &self.focus_classes
    }

    pub fn add_label(&mut self, cell: usize, class: &str) -> Result<(), LayoutError> {
        if cell >= self.cells.len() {
            return Err(LayoutError::InvalidArgument(format!(
                "cell {cell} outside grid of {} cells",
                self.cells.len()
            )));
        }
        if !self.focus_classes.iter().any(|c| c == class) {
            return Err(LayoutError::InvalidArgument(format!(
                "label {class:?} is not a focus class"
            )));
        }
        self.cells[cell].insert(class.to_string());
        Ok(())
    }

    /// Set of classes that actually label at least one cell.
    pub fn present_classes(&self) -> BTreeSet<String> {
        self.cells.iter().flatten().cloned().collect()
    }

    /// Cell indices labeled with the given class.
    pub fn cells_with(&self, class: &str) -> BTreeSet<usize> {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, labels)| labels.contains(class))
            .map(|(i, _)| i)
            .collect()
    }

    fn check_focus_classes(&self) -> Result<(), LayoutError> {
        let mut seen = BTreeSet::new();
        for class in &self.focus_classes {
            if class.trim().is_empty() {
                return Err(LayoutError::InvalidArgument("empty focus class".into()));
            }
            if class == EMPTY_CELL_LABEL {
                return Err(LayoutError::InvalidArgument(
                    "\"others\" is reserved for empty cells".into(),
                ));
            }
            if class.contains(',') {
                return Err(LayoutError::InvalidArgument(format!(
                    "focus class {class:?} contains a comma"
                )));
            }
            if !seen.insert(class) {
                return Err(LayoutError::InvalidArgument(format!(
                    "duplicate focus class {class:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), LayoutError> {
        self.check_focus_classes()?;
        if self.cells.len() != (self.m as usize) * (self.m as usize) {
            return Err(LayoutError::InvalidArgument(format!(
                "cell count {} does not match m={}",
                self.cells.len(),
                self.m
            )));
        }
        for (i, labels) in self.cells.iter().enumerate() {
            for label in labels {
                if !self.focus_classes.iter().any(|c| c == label) {
                    return Err(LayoutError::InvalidArgument(format!(
                        "cell {i} label {label:?} is not a focus class"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Pick mask or box for a subject by comparing the cosine similarity of the
/// masked and unmasked region embeddings against the class text embedding.
/// The mask wins only on a strict inequality; ties fall back to the box.
pub fn choose_region_mode(
    class_vec: &EmbeddingVector,
    mask_vec: &EmbeddingVector,
    unmask_vec: &EmbeddingVector,
) -> Result<RegionMode, LayoutError> {
    if class_vec.dim() != mask_vec.dim() || class_vec.dim() != unmask_vec.dim() {
        return Err(LayoutError::InvalidArgument(format!(
            "embedding dimensions differ: class {}, mask {}, unmask {}",
            class_vec.dim(),
            mask_vec.dim(),
            unmask_vec.dim()
        )));
    }
    let sim_mask = mask_vec.cosine(class_vec);
    let sim_unmask = unmask_vec.cosine(class_vec);
    Ok(if sim_mask > sim_unmask { RegionMode::Mask } else { RegionMode::Box })
}

/// A subject ready for patch assignment: its category plus resolved region.
#[derive(Debug, Clone)]
pub struct PlacedSubject {
    pub category: String,
    pub region: Region,
}

/// Assign subject categories to grid cells. For each subject the IoU against
/// every patch is computed, the subject's own dynamic threshold is derived
/// from those IoUs, and every patch with IoU strictly above the threshold
/// receives the subject's category. Cells may hold several categories;
/// cells no subject claims render as "others".
pub fn assign_patches(
    subjects: &[PlacedSubject],
    width: u32,
    height: u32,
    m: u32,
    lambda: f64,
) -> Result<PatchGrid, LayoutError> {
    if lambda < 0.0 {
        return Err(LayoutError::InvalidArgument("lambda must be >= 0".into()));
    }
    let patches = tile_image(width, height, m)?;
    let mut focus_classes: Vec<String> = Vec::new();
    for subject in subjects {
        if !focus_classes.contains(&subject.category) {
            focus_classes.push(subject.category.clone());
        }
    }
    let mut grid = PatchGrid::new(m, focus_classes)?;
    for subject in subjects {
        let ious = region_patch_ious(&subject.region, &patches);
        let tau = dynamic_threshold(&ious, lambda);
        for (index, &iou) in ious.iter().enumerate() {
            if iou > tau {
                grid.add_label(index, &subject.category)?;
            }
        }
    }
    Ok(grid)
}

/// Render the grid in its canonical prompt form:
///
/// ```text
/// Here is the segmentation map focusing on {classes}:
/// <patch>[0] label [1] label ... [N] label</patch>
/// Now, generate an image.
/// ```
///
/// Multi-label cells join their labels with ", " in lexicographic order and
/// empty cells render as "others", so equal grids always serialize
/// identically.
pub fn serialize_layout(grid: &PatchGrid) -> String {
    let mut out = String::new();
    out.push_str(LAYOUT_HEADER_PREFIX);
    out.push(' ');
    out.push_str(&grid.focus_classes.join(", "));
    out.push_str(":\n<patch>");
    for (i, labels) in grid.cells.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&format!("[{i}] "));
        if labels.is_empty() {
            out.push_str(EMPTY_CELL_LABEL);
        } else {
            let joined: Vec<&str> = labels.iter().map(String::as_str).collect();
            out.push_str(&joined.join(", "));
        }
    }
    out.push_str("</patch>\n");
    out.push_str(LAYOUT_TRAILER);
    out
}

/// Parse a layout prompt back into a grid. Whitespace between tokens is
/// tolerated (headers may arrive hard-wrapped); everything else is strict:
/// entry indices must run 0..N-1, the entry count must be a perfect square,
/// and every label must appear in the header's focus list.
pub fn parse_layout(text: &str) -> Result<PatchGrid, LayoutError> {
    let patch_open = text
        .find("<patch>")
        .ok_or_else(|| LayoutError::Format("missing <patch>".into()))?;
    let patch_close = text
        .find("</patch>")
        .ok_or_else(|| LayoutError::Format("missing </patch>".into()))?;
    if patch_close < patch_open {
        return Err(LayoutError::Format("</patch> precedes <patch>".into()));
    }

    let header = collapse_whitespace(text[..patch_open].trim());
    let focus_classes = parse_header(&header)?;

    let trailer = text[patch_close + "</patch>".len()..].trim();
    if trailer != LAYOUT_TRAILER {
        return Err(LayoutError::Format(format!(
            "expected trailer {LAYOUT_TRAILER:?}, found {trailer:?}"
        )));
    }

    let body = &text[patch_open + "<patch>".len()..patch_close];
    let entries = parse_entries(body)?;
    let count = entries.len();
    let m = (count as f64).sqrt().round() as u32;
    if count == 0 || (m as usize) * (m as usize) != count {
        return Err(LayoutError::Format(format!(
            "entry count {count} is not a perfect square"
        )));
    }

    let mut grid = PatchGrid::new(m, focus_classes)?;
    for (position, (index, labels)) in entries.into_iter().enumerate() {
        if index != position {
            return Err(LayoutError::Format(format!(
                "entry index {index} out of order at position {position}"
            )));
        }
        if labels.len() == 1 && labels[0] == EMPTY_CELL_LABEL {
            continue;
        }
        let mut seen = BTreeSet::new();
        for label in labels {
            if label == EMPTY_CELL_LABEL {
                return Err(LayoutError::Format(format!(
                    "cell {index} mixes \"others\" with class labels"
                )));
            }
            if !seen.insert(label.clone()) {
                return Err(LayoutError::Format(format!(
                    "cell {index} repeats label {label:?}"
                )));
            }
            grid.add_label(index, &label)
                .map_err(|_| LayoutError::Format(format!(
                    "cell {index} label {label:?} is not in the focus list"
                )))?;
        }
    }
    Ok(grid)
}

fn parse_header(header: &str) -> Result<Vec<String>, LayoutError> {
    let rest = header
        .strip_prefix(LAYOUT_HEADER_PREFIX)
        .ok_or_else(|| LayoutError::Format("missing segmentation map header".into()))?;
    let rest = rest.trim();
    let rest = rest
        .strip_suffix(':')
        .ok_or_else(|| LayoutError::Format("header does not end with ':'".into()))?;
    let rest = rest.trim();
    if rest.is_empty() {
        return Ok(Vec::new());
    }
    Ok(rest.split(',').map(|c| c.trim().to_string()).collect())
}

fn parse_entries(body: &str) -> Result<Vec<(usize, Vec<String>)>, LayoutError> {
    let mut entries = Vec::new();
    let mut rest = body.trim_start();
    while !rest.is_empty() {
        let after_open = rest
            .strip_prefix('[')
            .ok_or_else(|| LayoutError::Format(format!("expected '[' at {rest:?}")))?;
        let close = after_open
            .find(']')
            .ok_or_else(|| LayoutError::Format("unterminated '[' in patch body".into()))?;
        let index: usize = after_open[..close]
            .trim()
            .parse()
            .map_err(|_| LayoutError::Format(format!("bad entry index {:?}", &after_open[..close])))?;
        let after_index = &after_open[close + 1..];
        let label_end = after_index.find('[').unwrap_or(after_index.len());
        let label_text = after_index[..label_end].trim();
        if label_text.is_empty() {
            return Err(LayoutError::Format(format!("entry {index} has no label")));
        }
        let labels: Vec<String> = label_text
            .split(',')
            .map(|l| collapse_whitespace(l.trim()))
            .collect();
        if labels.iter().any(String::is_empty) {
            return Err(LayoutError::Format(format!("entry {index} has an empty label")));
        }
        entries.push((index, labels));
        rest = after_index[label_end..].trim_start();
    }
    Ok(entries)
}

fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn unit(values: Vec<f64>) -> EmbeddingVector {
        EmbeddingVector::normalized(values).unwrap()
    }

    #[test]
    fn region_mode_orthogonal_case() {
        let class = unit(vec![1.0, 0.0]);
        let mask = unit(vec![1.0, 0.0]);
        let unmask = unit(vec![0.0, 1.0]);
        assert_eq!(choose_region_mode(&class, &mask, &unmask).unwrap(), RegionMode::Mask);
    }

    #[test]
    fn region_mode_tie_falls_back_to_box() {
        let class = unit(vec![1.0, 0.0]);
        let same = unit(vec![0.5, 0.5]);
        assert_eq!(choose_region_mode(&class, &same, &same).unwrap(), RegionMode::Box);
    }

    #[test]
    fn region_mode_dimension_mismatch() {
        let a = unit(vec![1.0, 0.0]);
        let b = unit(vec![1.0, 0.0, 0.0]);
        assert!(choose_region_mode(&a, &b, &b).is_err());
    }

    #[test]
    fn single_subject_on_exact_patch() {
        // Patch 5 of an 8x8 tiling over 64x64 is cols 40..48, rows 0..8.
        let subject = PlacedSubject {
            category: "vase".into(),
            region: Region::Box(BBox::new(40, 0, 48, 8).unwrap()),
        };
        let grid = assign_patches(&[subject], 64, 64, 8, 0.05).unwrap();
        for (i, cell) in grid.cells().iter().enumerate() {
            if i == 5 {
                assert_eq!(cell.iter().collect::<Vec<_>>(), vec!["vase"]);
            } else {
                assert!(cell.is_empty(), "cell {i} unexpectedly labeled");
            }
        }
    }

    #[test]
    fn overlapping_subjects_share_a_cell() {
        // Patch 38 of an 8x8 tiling over 64x64 is cols 48..56, rows 32..40.
        let flower = PlacedSubject {
            category: "flower".into(),
            region: Region::Box(BBox::new(46, 30, 56, 40).unwrap()),
        };
        let piano = PlacedSubject {
            category: "piano".into(),
            region: Region::Box(BBox::new(48, 32, 60, 44).unwrap()),
        };
        let grid = assign_patches(&[flower, piano], 64, 64, 8, 0.05).unwrap();
        let cell = grid.cell(38);
        assert!(cell.contains("flower") && cell.contains("piano"), "cell 38 = {cell:?}");
        assert_eq!(grid.focus_classes(), &["flower".to_string(), "piano".to_string()]);
    }

    #[test]
    fn duplicate_subject_categories_collapse_in_focus_list() {
        let a = PlacedSubject {
            category: "carpet".into(),
            region: Region::Box(BBox::new(0, 0, 16, 16).unwrap()),
        };
        let b = PlacedSubject {
            category: "carpet".into(),
            region: Region::Box(BBox::new(32, 32, 64, 64).unwrap()),
        };
        let grid = assign_patches(&[a, b], 64, 64, 8, 0.05).unwrap();
        assert_eq!(grid.focus_classes(), &["carpet".to_string()]);
    }

    #[test]
    fn shrinking_lambda_never_removes_labels() {
        let subjects = vec![
            PlacedSubject {
                category: "lamp".into(),
                region: Region::Box(BBox::new(3, 5, 40, 50).unwrap()),
            },
            PlacedSubject {
                category: "couch".into(),
                region: Region::Box(BBox::new(20, 10, 60, 30).unwrap()),
            },
        ];
        let loose = assign_patches(&subjects, 64, 64, 8, 0.01).unwrap();
        let tight = assign_patches(&subjects, 64, 64, 8, 0.05).unwrap();
        for (l, t) in loose.cells().iter().zip(tight.cells()) {
            assert!(t.is_subset(l));
        }
    }

    #[test]
    fn all_empty_grid_serializes_to_others() {
        let grid = PatchGrid::new(8, vec![]).unwrap();
        let text = serialize_layout(&grid);
        assert_eq!(text.matches("others").count(), 64);
        assert!(text.starts_with("Here is the segmentation map focusing on :"));
        assert!(text.ends_with("</patch>\nNow, generate an image."));
        assert_eq!(parse_layout(&text).unwrap(), grid);
    }

    #[test]
    fn serialization_is_canonical_and_round_trips() {
        let mut grid =
            PatchGrid::new(2, vec!["piano".into(), "flower".into(), "sports car".into()])
                .unwrap();
        grid.add_label(0, "piano").unwrap();
        grid.add_label(0, "flower").unwrap();
        grid.add_label(3, "sports car").unwrap();
        let text = serialize_layout(&grid);
        assert_eq!(
            text,
            "Here is the segmentation map focusing on piano, flower, sports car:\n\
             <patch>[0] flower, piano [1] others [2] others [3] sports car</patch>\n\
             Now, generate an image."
        );
        assert_eq!(parse_layout(&text).unwrap(), grid);
    }

    #[test]
    fn parse_tolerates_wrapped_whitespace() {
        let text = "Here is the segmentation map focusing \non piano, sports car:  <patch> [0] \npiano [1] others [2] others [3] sports\n car </patch>\n Now, generate an image.";
        let grid = parse_layout(text).unwrap();
        assert_eq!(grid.m(), 2);
        assert_eq!(grid.focus_classes(), &["piano".to_string(), "sports car".to_string()]);
        assert!(grid.cell(0).contains("piano"));
        assert!(grid.cell(3).contains("sports car"));
    }

    #[test]
    fn parse_rejects_non_square_entry_count() {
        let text = "Here is the segmentation map focusing on a:\n<patch>[0] a [1] others [2] others</patch>\nNow, generate an image.";
        assert!(matches!(parse_layout(text), Err(LayoutError::Format(_))));
    }

    #[test]
    fn parse_rejects_unknown_label() {
        let text = "Here is the segmentation map focusing on a:\n<patch>[0] b</patch>\nNow, generate an image.";
        assert!(matches!(parse_layout(text), Err(LayoutError::Format(_))));
    }

    #[test]
    fn parse_rejects_missing_close_tag() {
        let text = "Here is the segmentation map focusing on a:\n<patch>[0] a\nNow, generate an image.";
        assert!(matches!(parse_layout(text), Err(LayoutError::Format(_))));
    }

    #[test]
    fn parse_rejects_headerless_block() {
        assert!(matches!(parse_layout("<patch>[0] others</patch>"), Err(LayoutError::Format(_))));
    }

    #[test]
    fn parse_rejects_out_of_order_indices() {
        let text = "Here is the segmentation map focusing on a:\n<patch>[1] a [0] others [2] others [3] others</patch>\nNow, generate an image.";
        assert!(matches!(parse_layout(text), Err(LayoutError::Format(_))));
    }

    #[test]
    fn parse_rejects_others_mixed_with_labels() {
        let text = "Here is the segmentation map focusing on a:\n<patch>[0] a, others</patch>\nNow, generate an image.";
        assert!(matches!(parse_layout(text), Err(LayoutError::Format(_))));
    }

    #[test]
    fn labeled_cells_exceed_subject_threshold() {
        // Assignment soundness: recomputing IoUs and tau for each subject
        // must justify every label the grid carries.
        let subjects = vec![
            PlacedSubject {
                category: "lamp".into(),
                region: Region::Box(BBox::new(7, 9, 33, 41).unwrap()),
            },
            PlacedSubject {
                category: "vase".into(),
                region: Region::Box(BBox::new(30, 20, 62, 60).unwrap()),
            },
        ];
        let (w, h, m, lambda) = (64, 64, 8, 0.05);
        let grid = assign_patches(&subjects, w, h, m, lambda).unwrap();
        let patches = tile_image(w, h, m).unwrap();
        for subject in &subjects {
            let ious = region_patch_ious(&subject.region, &patches);
            let tau = dynamic_threshold(&ious, lambda);
            for (i, cell) in grid.cells().iter().enumerate() {
                if cell.contains(&subject.category) {
                    continue;
                }
                // A cell lacking the label must not be strictly above tau
                // unless another same-category subject claimed it; with
                // distinct categories this is exact.
                assert!(ious[i] <= tau, "cell {i} should have been labeled");
            }
        }
    }
}

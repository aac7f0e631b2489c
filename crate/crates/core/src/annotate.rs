//! Textual annotation block describing the subjects overlaid on a target
//! image. The block is appended to vision-language prompts so that any
//! backend (live or mock) sees the same id / category / box / score table
//! that the annotated overlay conveys visually.

use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectAnnotation {
    pub id: usize,
    pub category: String,
    pub bbox: BBox,
    pub score: f64,
}

/// Render annotations as a fixed-format block, one line per subject.
pub fn render_block(annotations: &[SubjectAnnotation]) -> String {
    let mut out = String::from("Annotated subjects:");
    for a in annotations {
        out.push_str(&format!(
            "\n[id {}] category: {}; box: ({}, {}, {}, {}); score: {:.4}",
            a.id, a.category, a.bbox.x_min, a.bbox.y_min, a.bbox.x_max, a.bbox.y_max, a.score
        ));
    }
    out
}

/// Recover annotations from a prompt that embeds a rendered block.
/// Lines that do not match the `[id N]` shape are ignored.
pub fn parse_block(text: &str) -> Vec<SubjectAnnotation> {
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        let Some(rest) = line.strip_prefix("[id ") else { continue };
        let Some((id_str, rest)) = rest.split_once("] category: ") else { continue };
        let Ok(id) = id_str.parse::<usize>() else { continue };
        let Some((category, rest)) = rest.split_once("; box: (") else { continue };
        let Some((coords, rest)) = rest.split_once(')') else { continue };
        let parts: Vec<_> = coords.split(", ").collect();
        if parts.len() != 4 {
            continue;
        }
        let nums: Option<Vec<u32>> = parts.iter().map(|p| p.parse().ok()).collect();
        let Some(nums) = nums else { continue };
        let Ok(bbox) = BBox::new(nums[0], nums[1], nums[2], nums[3]) else { continue };
        let score = rest
            .strip_prefix("; score: ")
            .and_then(|s| s.parse::<f64>().ok())
            .unwrap_or(1.0);
        out.push(SubjectAnnotation { id, category: category.to_string(), bbox, score });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_round_trips() {
        let annotations = vec![
            SubjectAnnotation {
                id: 0,
                category: "sports car".into(),
                bbox: BBox::new(2, 3, 40, 30).unwrap(),
                score: 0.93,
            },
            SubjectAnnotation {
                id: 1,
                category: "ship".into(),
                bbox: BBox::new(10, 0, 20, 12).unwrap(),
                score: 0.71,
            },
        ];
        let block = render_block(&annotations);
        let parsed = parse_block(&block);
        assert_eq!(parsed, annotations);
    }

    #[test]
    fn parse_skips_unrelated_lines() {
        let text = "Some prompt text.\n[id 0] category: vase; box: (1, 1, 5, 5); score: 0.5000\nTrailing.";
        let parsed = parse_block(text);
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].category, "vase");
    }
}

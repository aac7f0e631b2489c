//! Prompt templates, shipped as editable text assets and embedded at build
//! time. Template ids are recorded in each record's provenance so a dataset
//! can always be traced back to the exact prompt wording that produced it.

/// Identifier of a prompt template, recorded in provenance metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TemplateId {
    CaptionGeneration,
    ObjectFiltering,
    TransformSimple,
    TransformComplexOne,
    TransformComplexTwo,
    TransformComplexThree,
    InstructionWithIds,
    InstructionWithoutIds,
    CotGeneration,
    BoxVerification,
    SimilarityDict,
}

impl TemplateId {
    pub fn as_str(&self) -> &'static str {
        match self {
            TemplateId::CaptionGeneration => "caption_generation",
            TemplateId::ObjectFiltering => "object_filtering",
            TemplateId::TransformSimple => "transform_simple",
            TemplateId::TransformComplexOne => "transform_complex_one",
            TemplateId::TransformComplexTwo => "transform_complex_two",
            TemplateId::TransformComplexThree => "transform_complex_three",
            TemplateId::InstructionWithIds => "instruction_with_ids",
            TemplateId::InstructionWithoutIds => "instruction_without_ids",
            TemplateId::CotGeneration => "cot_generation",
            TemplateId::BoxVerification => "box_verification",
            TemplateId::SimilarityDict => "similarity_dict",
        }
    }

    pub fn text(&self) -> &'static str {
        match self {
            TemplateId::CaptionGeneration => {
                include_str!("../assets/templates/caption_generation.txt")
            }
            TemplateId::ObjectFiltering => include_str!("../assets/templates/object_filtering.txt"),
            TemplateId::TransformSimple => include_str!("../assets/templates/transform_simple.txt"),
            TemplateId::TransformComplexOne => {
                include_str!("../assets/templates/transform_complex_one.txt")
            }
            TemplateId::TransformComplexTwo => {
                include_str!("../assets/templates/transform_complex_two.txt")
            }
            TemplateId::TransformComplexThree => {
                include_str!("../assets/templates/transform_complex_three.txt")
            }
            TemplateId::InstructionWithIds => {
                include_str!("../assets/templates/instruction_with_ids.txt")
            }
            TemplateId::InstructionWithoutIds => {
                include_str!("../assets/templates/instruction_without_ids.txt")
            }
            TemplateId::CotGeneration => include_str!("../assets/templates/cot_generation.txt"),
            TemplateId::BoxVerification => include_str!("../assets/templates/box_verification.txt"),
            TemplateId::SimilarityDict => include_str!("../assets/templates/similarity_dict.txt"),
        }
    }

    /// Fill the template's `{placeholder}` slots. Placeholders with no
    /// binding are left untouched.
    pub fn fill(&self, bindings: &[(&str, &str)]) -> String {
        let mut out = self.text().trim_end_matches('\n').to_string();
        for (key, value) in bindings {
            out = out.replace(&format!("{{{key}}}"), value);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simple_transform_prompt_is_exact() {
        let filled = TemplateId::TransformSimple.fill(&[("class_name", "lamp")]);
        assert_eq!(
            filled,
            "A lamp viewed from a different perspective, maintaining its core features and details."
        );
    }

    #[test]
    fn caption_template_embeds_classes() {
        let filled = TemplateId::CaptionGeneration.fill(&[("classes_str", "ship, sports car")]);
        assert!(filled.contains("these objects: ship, sports car to fit"));
    }

    #[test]
    fn complex_two_fills_both_slots() {
        let filled = TemplateId::TransformComplexTwo.fill(&[
            ("class_name", "piano"),
            ("random_class_1", "stool"),
            ("random_class_2", "lamp"),
        ]);
        assert!(filled.contains("The piano, partially out of focus"));
        assert!(filled.contains("a stool stands in full view"));
        assert!(filled.contains("a lamp is seen beyond"));
    }
}

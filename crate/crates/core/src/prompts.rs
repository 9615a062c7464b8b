//! The 2n+1 prompt bank and the (class, quality) <-> prompt index maps.
//!
//! Layout: indices `2c` and `2c + 1` hold the good and bad prompts of dense
//! class `c`; index `2n` holds the single shared background prompt. The bank
//! is immutable after construction and travels inside checkpoints so that
//! inference never re-derives category order.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::dataset::CategorySet;
use crate::error::{Error, Result};
use crate::synth::{BoxSample, Quality};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateSet {
    Simple,
    Elaborate,
}

/// What a prompt index denotes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptKind {
    Good(usize),
    Bad(usize),
    Background,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptBank {
    prompts: Vec<String>,
    class_names: Vec<String>,
    template_set: TemplateSet,
}

fn simple_good(name: &str) -> String {
    format!("The magenta bounding box is a good bounding box of {name}.")
}

fn simple_bad(name: &str) -> String {
    format!("The magenta bounding box is a bad bounding box of {name}.")
}

fn background_prompt() -> String {
    "The magenta bounding box is a good bounding box of background.".to_string()
}

fn elaborate_good(name: &str) -> String {
    format!("The magenta bounding box is a precise bounding box that tightly encloses the entire {name}.")
}

fn elaborate_bad(name: &str) -> String {
    format!("The magenta bounding box is an inaccurate bounding box that is too large or misplaced for {name}.")
}

/// Build the ordered 2n+1 prompt list for a category set.
pub fn build_prompts(categories: &CategorySet, template_set: TemplateSet) -> Result<PromptBank> {
    let mut seen = HashSet::new();
    for cat in categories.entries() {
        if !seen.insert(cat.name.as_str()) {
            return Err(Error::Format(format!(
                "duplicate class name '{}': prompts would collide",
                cat.name
            )));
        }
    }
    let mut prompts = Vec::with_capacity(2 * categories.len() + 1);
    let mut class_names = Vec::with_capacity(categories.len());
    for cat in categories.entries() {
        let (good, bad) = match template_set {
            TemplateSet::Simple => (simple_good(&cat.name), simple_bad(&cat.name)),
            TemplateSet::Elaborate => (elaborate_good(&cat.name), elaborate_bad(&cat.name)),
        };
        prompts.push(good);
        prompts.push(bad);
        class_names.push(cat.name.clone());
    }
    prompts.push(background_prompt());
    Ok(PromptBank {
        prompts,
        class_names,
        template_set,
    })
}

impl PromptBank {
    /// Number of object classes `n`.
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Total prompt count, always `2n + 1`.
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn prompts(&self) -> &[String] {
        &self.prompts
    }

    pub fn template_set(&self) -> TemplateSet {
        self.template_set
    }

    pub fn class_name(&self, dense: usize) -> Option<&str> {
        self.class_names.get(dense).map(|s| s.as_str())
    }

    pub fn good_index(&self, class: usize) -> Result<usize> {
        if class >= self.num_classes() {
            return Err(Error::UnknownClass(format!("dense id {class}")));
        }
        Ok(2 * class)
    }

    pub fn bad_index(&self, class: usize) -> Result<usize> {
        Ok(self.good_index(class)? + 1)
    }

    pub fn background_index(&self) -> usize {
        2 * self.num_classes()
    }

    /// Prompt index for a (class, quality) pair. Background maps to the shared
    /// background prompt regardless of the class claimed on the sample.
    pub fn index_of(&self, class: usize, quality: Quality) -> Result<usize> {
        match quality {
            Quality::Good => self.good_index(class),
            Quality::Bad => self.bad_index(class),
            Quality::Background => Ok(self.background_index()),
        }
    }

    /// Inverse map from prompt index to its meaning.
    pub fn class_of(&self, index: usize) -> Result<PromptKind> {
        if index == self.background_index() {
            return Ok(PromptKind::Background);
        }
        if index >= self.len() {
            return Err(Error::UnknownClass(format!("prompt index {index}")));
        }
        let class = index / 2;
        if index % 2 == 0 {
            Ok(PromptKind::Good(class))
        } else {
            Ok(PromptKind::Bad(class))
        }
    }

    /// Ground-truth prompt index for a synthesized sample.
    pub fn target_index(&self, sample: &BoxSample) -> Result<usize> {
        match sample.quality {
            Quality::Background => Ok(self.background_index()),
            q => self.index_of(sample.class_id, q),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Category;
    use crate::geometry::Rect;

    fn categories(names: &[&str]) -> CategorySet {
        CategorySet::new(
            names
                .iter()
                .enumerate()
                .map(|(i, n)| Category {
                    id: i as u64 + 1,
                    name: n.to_string(),
                })
                .collect(),
        )
        .unwrap()
    }

    fn sample(class_id: usize, quality: Quality) -> BoxSample {
        BoxSample {
            image_id: 1,
            file_path: "a.png".into(),
            rect: Rect::new(0.0, 0.0, 10.0, 10.0),
            class_id,
            quality,
            source_annotation_id: None,
            rng_seed: 0,
        }
    }

    #[test]
    fn smallest_bank_has_three_prompts() {
        let bank = build_prompts(&categories(&["dog"]), TemplateSet::Simple).unwrap();
        assert_eq!(bank.len(), 3);
        assert_eq!(
            bank.prompts()[0],
            "The magenta bounding box is a good bounding box of dog."
        );
        assert_eq!(
            bank.prompts()[1],
            "The magenta bounding box is a bad bounding box of dog."
        );
        assert_eq!(
            bank.prompts()[2],
            "The magenta bounding box is a good bounding box of background."
        );
    }

    #[test]
    fn bank_size_is_2n_plus_1() {
        for n in [1usize, 8, 80, 1203] {
            let names: Vec<String> = (0..n).map(|i| format!("class{i}")).collect();
            let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
            let bank = build_prompts(&categories(&refs), TemplateSet::Simple).unwrap();
            assert_eq!(bank.len(), 2 * n + 1);
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let cats = categories(&["dog", "dog"]);
        assert!(build_prompts(&cats, TemplateSet::Simple).is_err());
    }

    #[test]
    fn index_layout() {
        let bank = build_prompts(&categories(&["cat", "dog"]), TemplateSet::Simple).unwrap();
        assert_eq!(bank.index_of(0, Quality::Good).unwrap(), 0);
        assert_eq!(bank.index_of(0, Quality::Bad).unwrap(), 1);
        assert_eq!(bank.index_of(1, Quality::Good).unwrap(), 2);
        assert_eq!(bank.index_of(1, Quality::Bad).unwrap(), 3);
        assert_eq!(bank.index_of(0, Quality::Background).unwrap(), 4);
        assert_eq!(bank.index_of(1, Quality::Background).unwrap(), 4);
        assert!(bank.index_of(2, Quality::Good).is_err());
    }

    #[test]
    fn target_index_for_samples() {
        let bank = build_prompts(&categories(&["cat", "dog"]), TemplateSet::Simple).unwrap();
        assert_eq!(bank.target_index(&sample(0, Quality::Good)).unwrap(), 0);
        assert_eq!(bank.target_index(&sample(0, Quality::Bad)).unwrap(), 1);
        // Background samples carry the dedicated background class id.
        assert_eq!(bank.target_index(&sample(2, Quality::Background)).unwrap(), 4);
    }

    #[test]
    fn maps_are_mutual_inverses() {
        let bank = build_prompts(&categories(&["a", "b", "c"]), TemplateSet::Simple).unwrap();
        for class in 0..3 {
            for quality in [Quality::Good, Quality::Bad] {
                let idx = bank.index_of(class, quality).unwrap();
                match (bank.class_of(idx).unwrap(), quality) {
                    (PromptKind::Good(c), Quality::Good) => assert_eq!(c, class),
                    (PromptKind::Bad(c), Quality::Bad) => assert_eq!(c, class),
                    other => panic!("wrong inverse {other:?}"),
                }
            }
        }
        assert_eq!(bank.class_of(6).unwrap(), PromptKind::Background);
        assert!(bank.class_of(7).is_err());
    }

    #[test]
    fn elaborate_templates_differ_but_keep_layout() {
        let cats = categories(&["dog"]);
        let simple = build_prompts(&cats, TemplateSet::Simple).unwrap();
        let elaborate = build_prompts(&cats, TemplateSet::Elaborate).unwrap();
        assert_eq!(elaborate.len(), simple.len());
        assert_ne!(elaborate.prompts()[0], simple.prompts()[0]);
        assert!(elaborate.prompts()[0].contains("tightly encloses"));
        // Background prompt is shared by both template sets.
        assert_eq!(elaborate.prompts()[2], simple.prompts()[2]);
    }

    #[test]
    fn serialization_round_trip_preserves_text_exactly() {
        let bank = build_prompts(&categories(&["cat", "dog"]), TemplateSet::Simple).unwrap();
        let json = serde_json::to_string(&bank).unwrap();
        let back: PromptBank = serde_json::from_str(&json).unwrap();
        assert_eq!(bank, back);
        for (a, b) in bank.prompts().iter().zip(back.prompts()) {
            assert_eq!(a.as_bytes(), b.as_bytes());
        }
    }
}

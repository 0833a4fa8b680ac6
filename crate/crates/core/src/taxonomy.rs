//! Fixed task taxonomy: six categories, fifteen sub-tasks, and the parsing
//! of judge responses into labels.
//!
//! The taxonomy is closed. Parsing never invents a label: a response either
//! names one of the fifteen sub-tasks (canonically or through a small alias
//! table) or it is [`Unparseable`].

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Top-level task category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "Coarse Perception")]
    CoarsePerception,
    #[serde(rename = "Fine-grained Perception (single-instance)")]
    FineGrainedSingleInstance,
    #[serde(rename = "Fine-grained Perception (cross-instance)")]
    FineGrainedCrossInstance,
    #[serde(rename = "Attribute Reasoning")]
    AttributeReasoning,
    #[serde(rename = "Relation Reasoning")]
    RelationReasoning,
    #[serde(rename = "Logic Reasoning")]
    LogicReasoning,
}

/// Leaf sub-task. Each sub-task has exactly one parent [`Category`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SubTask {
    #[serde(rename = "Image Style")]
    ImageStyle,
    #[serde(rename = "Image Scene")]
    ImageScene,
    #[serde(rename = "Image Topic")]
    ImageTopic,
    #[serde(rename = "Object Localization")]
    ObjectLocalization,
    #[serde(rename = "Attribute Recognition")]
    AttributeRecognition,
    #[serde(rename = "Celebrity Recognition")]
    CelebrityRecognition,
    #[serde(rename = "OCR")]
    Ocr,
    #[serde(rename = "Attribute Comparison")]
    AttributeComparison,
    #[serde(rename = "Action Recognition")]
    ActionRecognition,
    #[serde(rename = "Physical Property")]
    PhysicalProperty,
    #[serde(rename = "Function Reasoning")]
    FunctionReasoning,
    #[serde(rename = "Social Relation")]
    SocialRelation,
    #[serde(rename = "Physical Relation")]
    PhysicalRelation,
    #[serde(rename = "Structured Image-Text")]
    StructuredImageText,
    #[serde(rename = "Future Prediction")]
    FuturePrediction,
}

/// A (category, sub_task) pair whose parent relation has been validated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskLabel {
    pub category: Category,
    pub sub_task: SubTask,
}

impl TaskLabel {
    /// Builds a label from a sub-task alone; the category is the fixed parent.
    pub fn from_sub_task(sub_task: SubTask) -> Self {
        TaskLabel {
            category: parent_category(sub_task),
            sub_task,
        }
    }
}

/// Category + sub-task extracted from a judge response.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParsedTask {
    pub label: TaskLabel,
    /// True when the response stated a category that disagreed with the
    /// sub-task's fixed parent and was overridden.
    pub category_corrected: bool,
}

/// The response mentioned no recognizable sub-task.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no recognizable sub-task in judge response")]
pub struct Unparseable;

pub const ALL_CATEGORIES: [Category; 6] = [
    Category::CoarsePerception,
    Category::FineGrainedSingleInstance,
    Category::FineGrainedCrossInstance,
    Category::AttributeReasoning,
    Category::RelationReasoning,
    Category::LogicReasoning,
];

pub const ALL_SUB_TASKS: [SubTask; 15] = [
    SubTask::ImageStyle,
    SubTask::ImageScene,
    SubTask::ImageTopic,
    SubTask::ObjectLocalization,
    SubTask::AttributeRecognition,
    SubTask::CelebrityRecognition,
    SubTask::Ocr,
    SubTask::AttributeComparison,
    SubTask::ActionRecognition,
    SubTask::PhysicalProperty,
    SubTask::FunctionReasoning,
    SubTask::SocialRelation,
    SubTask::PhysicalRelation,
    SubTask::StructuredImageText,
    SubTask::FuturePrediction,
];

/// The unique parent category of a sub-task. Total over the enum.
pub fn parent_category(sub_task: SubTask) -> Category {
    use Category::*;
    use SubTask::*;
    match sub_task {
        ImageStyle | ImageScene | ImageTopic => CoarsePerception,
        ObjectLocalization | AttributeRecognition | CelebrityRecognition | Ocr => {
            FineGrainedSingleInstance
        }
        AttributeComparison | ActionRecognition => FineGrainedCrossInstance,
        PhysicalProperty | FunctionReasoning => AttributeReasoning,
        SocialRelation | PhysicalRelation => RelationReasoning,
        StructuredImageText | FuturePrediction => LogicReasoning,
    }
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::CoarsePerception => "Coarse Perception",
            Category::FineGrainedSingleInstance => "Fine-grained Perception (single-instance)",
            Category::FineGrainedCrossInstance => "Fine-grained Perception (cross-instance)",
            Category::AttributeReasoning => "Attribute Reasoning",
            Category::RelationReasoning => "Relation Reasoning",
            Category::LogicReasoning => "Logic Reasoning",
        }
    }

    fn aliases(self) -> &'static [&'static str] {
        match self {
            Category::FineGrainedSingleInstance => &[
                "Fine-grained Perception (single instance)",
                "Fine-grained Perception single-instance",
            ],
            Category::FineGrainedCrossInstance => &[
                "Fine-grained Perception (cross instance)",
                "Fine-grained Perception cross-instance",
            ],
            _ => &[],
        }
    }
}

impl SubTask {
    pub fn name(self) -> &'static str {
        match self {
            SubTask::ImageStyle => "Image Style",
            SubTask::ImageScene => "Image Scene",
            SubTask::ImageTopic => "Image Topic",
            SubTask::ObjectLocalization => "Object Localization",
            SubTask::AttributeRecognition => "Attribute Recognition",
            SubTask::CelebrityRecognition => "Celebrity Recognition",
            SubTask::Ocr => "OCR",
            SubTask::AttributeComparison => "Attribute Comparison",
            SubTask::ActionRecognition => "Action Recognition",
            SubTask::PhysicalProperty => "Physical Property",
            SubTask::FunctionReasoning => "Function Reasoning",
            SubTask::SocialRelation => "Social Relation",
            SubTask::PhysicalRelation => "Physical Relation",
            SubTask::StructuredImageText => "Structured Image-Text",
            SubTask::FuturePrediction => "Future Prediction",
        }
    }

    /// Accepted surface variants beyond the canonical name. Deliberately
    /// minimal; matching is case-insensitive regardless.
    fn aliases(self) -> &'static [&'static str] {
        match self {
            SubTask::Ocr => &["Optical Character Recognition", "Text Recognition"],
            SubTask::ObjectLocalization => &["Object Localisation"],
            SubTask::StructuredImageText => &["Structured Image Text", "Structured Image and Text"],
            _ => &[],
        }
    }

    /// One-line description used in task-prediction prompts.
    pub fn description(self) -> &'static str {
        match self {
            SubTask::ImageStyle => "name the rendering medium of the image (photo, painting, scan, sketch, ...)",
            SubTask::ImageScene => "identify the environment or setting shown (indoors, forest, street, ...)",
            SubTask::ImageTopic => "state the primary subject of the image (portrait, scenery, close-up, ...)",
            SubTask::ObjectLocalization => "find where a single object sits or how it is oriented in the frame",
            SubTask::AttributeRecognition => "name properties of an object such as shape, texture, or appearance",
            SubTask::CelebrityRecognition => "recognize well-known people or landmarks",
            SubTask::Ocr => "read text, formulas, or tables out of the image",
            SubTask::AttributeComparison => "compare a property (size, color, shape, ...) across two or more objects",
            SubTask::ActionRecognition => "identify actions or interactions between people and objects",
            SubTask::PhysicalProperty => "infer material characteristics such as fluidity, rigidity, or volatility",
            SubTask::FunctionReasoning => "infer what an object is used for",
            SubTask::SocialRelation => "identify a relationship between people (family, friends, colleagues, ...)",
            SubTask::PhysicalRelation => "describe spatial or ownership relations among objects (above, holding, adjacent, ...)",
            SubTask::StructuredImageText => "interpret charts, diagrams, or formulas embedded in the image",
            SubTask::FuturePrediction => "anticipate what happens next (state changes, outcomes, emotions)",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for SubTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for TaskLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Task: {}; Sub-task: {}", self.category, self.sub_task)
    }
}

/// Byte position of the first ASCII-case-insensitive occurrence of `needle`.
/// All canonical names are ASCII, so byte positions stay valid in the
/// original (possibly non-ASCII) judge text.
fn ci_find(haystack: &str, needle: &str) -> Option<usize> {
    let h = haystack.as_bytes();
    let n = needle.as_bytes();
    if n.is_empty() || h.len() < n.len() {
        return None;
    }
    (0..=h.len() - n.len()).find(|&i| h[i..i + n.len()].eq_ignore_ascii_case(n))
}

/// Earliest case-insensitive occurrence of any needle in `haystack`.
/// Ties on position go to the longest needle so that a name is never
/// shadowed by a shorter overlapping variant.
fn earliest_match<T: Copy>(haystack: &str, needles: &[(T, &str)]) -> Option<T> {
    let mut best: Option<(usize, usize, T)> = None;
    for &(value, needle) in needles {
        if let Some(pos) = ci_find(haystack, needle) {
            let candidate = (pos, needle.len(), value);
            best = match best {
                None => Some(candidate),
                Some((bpos, blen, _)) if pos < bpos || (pos == bpos && needle.len() > blen) => {
                    Some(candidate)
                }
                other => other,
            };
        }
    }
    best.map(|(_, _, v)| v)
}

fn sub_task_needles() -> Vec<(SubTask, &'static str)> {
    let mut needles = Vec::new();
    for sub in ALL_SUB_TASKS {
        needles.push((sub, sub.name()));
        for alias in sub.aliases() {
            needles.push((sub, *alias));
        }
    }
    needles
}

fn category_needles() -> Vec<(Category, &'static str)> {
    let mut needles = Vec::new();
    for cat in ALL_CATEGORIES {
        needles.push((cat, cat.name()));
        for alias in cat.aliases() {
            needles.push((cat, *alias));
        }
    }
    needles
}

/// Extracts a [`TaskLabel`] from raw judge output.
///
/// The sub-task is located first (canonical names and aliases, case
/// insensitive). A stated category is then checked against the sub-task's
/// fixed parent; on disagreement the sub-task wins and the correction is
/// reported through [`ParsedTask::category_corrected`].
pub fn parse_task_response(text: &str) -> Result<ParsedTask, Unparseable> {
    // Prefer the text after a "Sub-task:" marker when one exists; judges
    // sometimes restate several task names while reasoning before it.
    let marker_region = ["sub-task", "sub task", "subtask"]
        .iter()
        .find_map(|m| ci_find(text, m).map(|p| &text[p..]));

    let needles = sub_task_needles();
    let sub_task = marker_region
        .and_then(|region| earliest_match(region, &needles))
        .or_else(|| earliest_match(text, &needles))
        .ok_or(Unparseable)?;

    let parent = parent_category(sub_task);
    let stated = earliest_match(text, &category_needles());
    let category_corrected = matches!(stated, Some(c) if c != parent);

    Ok(ParsedTask {
        label: TaskLabel {
            category: parent,
            sub_task,
        },
        category_corrected,
    })
}

/// Looks up a sub-task by its canonical serialized name.
pub fn sub_task_by_name(name: &str) -> Option<SubTask> {
    ALL_SUB_TASKS.iter().copied().find(|s| s.name() == name)
}

/// Looks up a category by its canonical serialized name.
pub fn category_by_name(name: &str) -> Option<Category> {
    ALL_CATEGORIES.iter().copied().find(|c| c.name() == name)
}

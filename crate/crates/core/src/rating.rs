//! Semantic layer for the five pipeline stages: renders prompts, calls the
//! judge client, and parses responses into typed records.
//!
//! Prompt texts are versioned template assets shipped with the crate; every
//! stage record carries the template version it was produced with. A stage
//! either yields a fully parsed record or fails — no score is ever invented
//! or defaulted.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

use crate::corpus::{DataEntry, FetchError, ImageFetcher};
use crate::judge::{backoff_delay, ChatError, JudgeClient, JudgeExchange, JudgeRole, WireStage};
use crate::taxonomy::{self, SubTask, TaskLabel, ALL_SUB_TASKS};

/// Pipeline stage, coarser than [`WireStage`]: the caption stage covers both
/// captioner calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipeStage {
    Iqa,
    Tqa,
    Task,
    Caption,
    Mm,
}

pub const ALL_STAGES: [PipeStage; 5] = [
    PipeStage::Iqa,
    PipeStage::Tqa,
    PipeStage::Task,
    PipeStage::Caption,
    PipeStage::Mm,
];

impl PipeStage {
    pub fn as_str(self) -> &'static str {
        match self {
            PipeStage::Iqa => "iqa",
            PipeStage::Tqa => "tqa",
            PipeStage::Task => "task",
            PipeStage::Caption => "caption",
            PipeStage::Mm => "mm",
        }
    }

    pub fn from_str_opt(s: &str) -> Option<Self> {
        match s {
            "iqa" => Some(PipeStage::Iqa),
            "tqa" => Some(PipeStage::Tqa),
            "task" => Some(PipeStage::Task),
            "caption" => Some(PipeStage::Caption),
            "mm" => Some(PipeStage::Mm),
            _ => None,
        }
    }
}

impl fmt::Display for PipeStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// INFO / CPXT / CPLT, each in 0..=5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextScores {
    pub info: u8,
    pub cpxt: u8,
    pub cplt: u8,
}

/// BLUR / NOISE, each in 0..=5, oriented so that higher is cleaner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageScores {
    pub blur: u8,
    pub noise: u8,
}

/// CLR / REL / TR, each in 0..=5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultimodalScores {
    pub clr: u8,
    pub rel: u8,
    pub tr: u8,
}

/// General + task-specific captions for one entry. When no task label is
/// available the specific caption falls back to the general one and the
/// record is flagged degraded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionPair {
    pub general: String,
    pub specific: String,
    pub task: Option<TaskLabel>,
}

/// Task prediction result with the correction marker from parsing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskOutcome {
    #[serde(flatten)]
    pub label: TaskLabel,
    pub category_corrected: bool,
}

/// Caption stage record payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionOutcome {
    #[serde(flatten)]
    pub pair: CaptionPair,
    pub caption_degraded: bool,
}

/// Multimodal stage record payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MmOutcome {
    #[serde(flatten)]
    pub scores: MultimodalScores,
    pub coarse_rating: bool,
}

/// A successful stage result plus everything needed for the audit record.
#[derive(Debug, Clone)]
pub struct Staged<T> {
    pub value: T,
    pub exchanges: Vec<JudgeExchange>,
    pub template_version: String,
}

impl<T> Staged<T> {
    /// Hex SHA-256 over the raw responses backing this result.
    pub fn raw_response_digest(&self) -> String {
        digest_hex(self.exchanges.iter().map(|e| e.raw_response.as_str()))
    }
}

/// Hex SHA-256 of newline-joined parts.
pub fn digest_hex<'a>(parts: impl IntoIterator<Item = &'a str>) -> String {
    let mut hasher = Sha256::new();
    for (i, part) in parts.into_iter().enumerate() {
        if i > 0 {
            hasher.update(b"\n");
        }
        hasher.update(part.as_bytes());
    }
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Transport,
    ParseExhausted,
    Precondition,
    ImageFetch,
    EmptyCaption,
}

/// A stage that could not produce a parsed record for an entry.
#[derive(Debug, Clone, Error)]
#[error("stage {stage} failed for entry {entry_id}: {detail}")]
pub struct StageFailure {
    pub entry_id: String,
    pub stage: PipeStage,
    pub kind: FailureKind,
    pub detail: String,
}

/// Score-line extraction failure: which keys were missing or out of range.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ParseScoresError {
    pub missing: Vec<String>,
    pub out_of_range: Vec<String>,
}

impl fmt::Display for ParseScoresError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unparseable scores")?;
        if !self.missing.is_empty() {
            write!(f, "; missing: {}", self.missing.join(", "))?;
        }
        if !self.out_of_range.is_empty() {
            write!(f, "; out of range: {}", self.out_of_range.join(", "))?;
        }
        Ok(())
    }
}

/// Finds `key: <int>` (or `key = <int>`) case-insensitively at a word
/// boundary and returns the first integer after it.
fn find_key_int(text: &str, key: &str) -> Option<i64> {
    let bytes = text.as_bytes();
    let key_bytes = key.as_bytes();
    if key_bytes.is_empty() || bytes.len() < key_bytes.len() {
        return None;
    }
    'scan: for start in 0..=bytes.len() - key_bytes.len() {
        if !bytes[start..start + key_bytes.len()].eq_ignore_ascii_case(key_bytes) {
            continue;
        }
        if start > 0 && bytes[start - 1].is_ascii_alphanumeric() {
            continue;
        }
        let mut pos = start + key_bytes.len();
        while pos < bytes.len() && (bytes[pos] == b' ' || bytes[pos] == b'\t') {
            pos += 1;
        }
        if pos >= bytes.len() || (bytes[pos] != b':' && bytes[pos] != b'=') {
            continue;
        }
        pos += 1;
        while pos < bytes.len() && (bytes[pos] == b' ' || bytes[pos] == b'\t') {
            pos += 1;
        }
        let mut end = pos;
        if end < bytes.len() && bytes[end] == b'-' {
            end += 1;
        }
        let digits_start = end;
        while end < bytes.len() && bytes[end].is_ascii_digit() {
            end += 1;
        }
        if end == digits_start {
            continue 'scan;
        }
        if let Ok(value) = text[pos..end].parse::<i64>() {
            return Some(value);
        }
    }
    None
}

/// Extracts `KEY: <int>` values for every requested key; all values must lie
/// in 0..=5. Returns the offending keys otherwise, never a partial map.
pub fn parse_scores(text: &str, keys: &[&str]) -> Result<BTreeMap<String, u8>, ParseScoresError> {
    assert!(!keys.is_empty(), "parse_scores requires at least one key");
    let mut scores = BTreeMap::new();
    let mut missing = Vec::new();
    let mut out_of_range = Vec::new();
    for &key in keys {
        match find_key_int(text, key) {
            None => missing.push(key.to_string()),
            Some(v) if (0..=5).contains(&v) => {
                scores.insert(key.to_string(), v as u8);
            }
            Some(_) => out_of_range.push(key.to_string()),
        }
    }
    if missing.is_empty() && out_of_range.is_empty() {
        Ok(scores)
    } else {
        Err(ParseScoresError { missing, out_of_range })
    }
}

/// Canonical rendering of a metric map, the inverse of [`parse_scores`].
pub fn render_scores(pairs: &[(&str, u8)]) -> String {
    pairs
        .iter()
        .map(|(key, value)| format!("{key}: {value}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// A named, versioned prompt body with `{placeholder}` substitution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub version: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("template missing `# name version` header line")]
    MissingHeader,
    #[error("template {name} is missing required placeholder {placeholder}")]
    MissingPlaceholder { name: String, placeholder: String },
    #[error("no template named {0}")]
    Unknown(String),
    #[error("cannot read template dir {path}: {cause}")]
    Io { path: String, cause: String },
}

impl PromptTemplate {
    /// Parses a template file: first line `# name version`, rest is the body.
    pub fn parse(text: &str) -> Result<Self, TemplateError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(TemplateError::MissingHeader)?;
        let rest = header.strip_prefix('#').ok_or(TemplateError::MissingHeader)?;
        let mut parts = rest.split_whitespace();
        let name = parts.next().ok_or(TemplateError::MissingHeader)?.to_string();
        let version = parts.next().ok_or(TemplateError::MissingHeader)?.to_string();
        let body = lines.collect::<Vec<_>>().join("\n").trim().to_string();
        Ok(PromptTemplate { name, version, body })
    }

    pub fn has_placeholder(&self, key: &str) -> bool {
        self.body.contains(&format!("{{{key}}}"))
    }

    /// Replaces known placeholders; unknown braces are left untouched.
    pub fn render(&self, substitutions: &[(&str, &str)]) -> String {
        let mut rendered = self.body.clone();
        for (key, value) in substitutions {
            rendered = rendered.replace(&format!("{{{key}}}"), value);
        }
        rendered
    }
}

/// Required placeholders per template name; load-time validation.
fn required_placeholders(name: &str) -> &'static [&'static str] {
    match name {
        "tqa" => &["text"],
        "task" => &["task_list", "examples", "text"],
        "mm" => &["captions", "text"],
        "caption_specific" => &["task_focus"],
        "strict_scores" => &["format_lines"],
        _ => &[],
    }
}

/// The set of templates a run uses, loaded from the builtin assets or from a
/// directory of `.txt` files.
#[derive(Debug, Clone)]
pub struct PromptLibrary {
    templates: BTreeMap<String, PromptTemplate>,
}

const BUILTIN_TEMPLATES: [&str; 8] = [
    include_str!("../prompts/tqa.txt"),
    include_str!("../prompts/iqa.txt"),
    include_str!("../prompts/task.txt"),
    include_str!("../prompts/caption_general.txt"),
    include_str!("../prompts/caption_specific.txt"),
    include_str!("../prompts/mm.txt"),
    include_str!("../prompts/strict_scores.txt"),
    include_str!("../prompts/strict_task.txt"),
];

impl PromptLibrary {
    pub fn builtin() -> Self {
        let mut templates = BTreeMap::new();
        for text in BUILTIN_TEMPLATES {
            let template = PromptTemplate::parse(text).expect("builtin template is well-formed");
            templates.insert(template.name.clone(), template);
        }
        let library = PromptLibrary { templates };
        library.validate().expect("builtin templates validate");
        library
    }

    /// Loads every `*.txt` in a directory, overriding builtins by name.
    pub fn from_dir(path: impl AsRef<Path>) -> Result<Self, TemplateError> {
        let path = path.as_ref();
        let mut library = PromptLibrary::builtin();
        let entries = std::fs::read_dir(path).map_err(|e| TemplateError::Io {
            path: path.display().to_string(),
            cause: e.to_string(),
        })?;
        for entry in entries {
            let entry = entry.map_err(|e| TemplateError::Io {
                path: path.display().to_string(),
                cause: e.to_string(),
            })?;
            if entry.path().extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let text = std::fs::read_to_string(entry.path()).map_err(|e| TemplateError::Io {
                path: entry.path().display().to_string(),
                cause: e.to_string(),
            })?;
            let template = PromptTemplate::parse(&text)?;
            library.templates.insert(template.name.clone(), template);
        }
        library.validate()?;
        Ok(library)
    }

    fn validate(&self) -> Result<(), TemplateError> {
        for template in self.templates.values() {
            for placeholder in required_placeholders(&template.name) {
                if !template.has_placeholder(placeholder) {
                    return Err(TemplateError::MissingPlaceholder {
                        name: template.name.clone(),
                        placeholder: placeholder.to_string(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&PromptTemplate, TemplateError> {
        self.templates
            .get(name)
            .ok_or_else(|| TemplateError::Unknown(name.to_string()))
    }
}

/// Caption focus instruction per sub-task, rendered into the task-specific
/// caption prompt.
pub fn caption_focus(sub_task: SubTask) -> &'static str {
    match sub_task {
        SubTask::ImageStyle => "Describe the rendering medium and visual style of the image.",
        SubTask::ImageScene => "Describe the environment and setting: where the scene takes place.",
        SubTask::ImageTopic => "Describe the primary subject of the image and what makes it the focus.",
        SubTask::ObjectLocalization => "Describe where each prominent object sits in the frame and how it is oriented.",
        SubTask::AttributeRecognition => "Describe the visible properties of the main objects: shape, texture, color, condition.",
        SubTask::CelebrityRecognition => "Describe any recognizable people or landmarks and the context they appear in.",
        SubTask::Ocr => "Transcribe any visible text, formulas, or tabular content exactly as written.",
        SubTask::AttributeComparison => "Compare the visible attributes of the objects: relative size, color, shape.",
        SubTask::ActionRecognition => "Describe the actions and interactions taking place, especially human interactions.",
        SubTask::PhysicalProperty => "Describe material properties that can be inferred: rigidity, fluidity, texture, weight cues.",
        SubTask::FunctionReasoning => "Describe the objects with emphasis on what each is used for.",
        SubTask::SocialRelation => "Describe the people and the visible cues about their relationships to each other.",
        SubTask::PhysicalRelation => "Describe the spatial and ownership relations among objects: what is above, below, adjacent, holding, or supporting what.",
        SubTask::StructuredImageText => "Describe any charts, diagrams, or structured layouts and the values or relations they encode.",
        SubTask::FuturePrediction => "Describe the current state of the scene and any cues about what happens next.",
    }
}

fn render_task_list() -> String {
    ALL_SUB_TASKS
        .iter()
        .map(|sub| {
            format!(
                "- {} / {}: {}",
                taxonomy::parent_category(*sub).name(),
                sub.name(),
                sub.description()
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// One worked example per category, in taxonomy order.
fn render_few_shot_examples() -> String {
    const EXAMPLES: [(&str, SubTask); 6] = [
        (
            "user: Is this picture a photograph or an oil painting?\nassistant: It is an oil painting.",
            SubTask::ImageStyle,
        ),
        (
            "user: What does the road sign in the image say?\nassistant: It reads \"BRIDGE OUT AHEAD\".",
            SubTask::Ocr,
        ),
        (
            "user: Which box is larger, the red one or the blue one?\nassistant: The red box is larger.",
            SubTask::AttributeComparison,
        ),
        (
            "user: What is the broom leaning in the corner used for?\nassistant: It is used for sweeping the floor.",
            SubTask::FunctionReasoning,
        ),
        (
            "user: Where is the cup relative to the laptop?\nassistant: The cup sits to the left of the laptop.",
            SubTask::PhysicalRelation,
        ),
        (
            "user: Judging from the dark clouds, what is about to happen?\nassistant: It is about to rain.",
            SubTask::FuturePrediction,
        ),
    ];
    EXAMPLES
        .iter()
        .map(|(entry, sub)| {
            format!("Entry: {entry}\nAnswer: {}", TaskLabel::from_sub_task(*sub))
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn caption_block(pair: &CaptionPair) -> String {
    let task_line = match &pair.task {
        Some(label) => format!("{}; {}", label.category, label.sub_task),
        None => "unspecified".to_string(),
    };
    format!(
        "General caption: {}\nTask-specific caption: {}\nPredicted task: {}",
        pair.general, pair.specific, task_line
    )
}

/// Drives the five stages for single entries. Stateless over immutable
/// templates; distinct entries may be rated concurrently.
pub struct Rater {
    client: Arc<JudgeClient>,
    fetcher: ImageFetcher,
    templates: PromptLibrary,
    parse_retry_limit: u32,
}

impl Rater {
    pub fn new(client: Arc<JudgeClient>, templates: PromptLibrary, parse_retry_limit: u32) -> Self {
        Rater {
            client,
            fetcher: ImageFetcher::new(),
            templates,
            parse_retry_limit,
        }
    }

    pub fn client(&self) -> &Arc<JudgeClient> {
        &self.client
    }

    fn failure(
        &self,
        entry_id: &str,
        stage: PipeStage,
        kind: FailureKind,
        detail: impl Into<String>,
    ) -> StageFailure {
        StageFailure {
            entry_id: entry_id.to_string(),
            stage,
            kind,
            detail: detail.into(),
        }
    }

    fn transport_failure(&self, stage: PipeStage, err: ChatError) -> StageFailure {
        let entry_id = match &err {
            ChatError::Exhausted { entry_id, .. } | ChatError::Permanent { entry_id, .. } => {
                entry_id.clone()
            }
        };
        StageFailure {
            entry_id,
            stage,
            kind: FailureKind::Transport,
            detail: err.to_string(),
        }
    }

    /// Image fetch with retries on retryable failures, using the endpoint's
    /// retry budget for the stage that needs the image.
    async fn fetch_image(
        &self,
        entry: &DataEntry,
        stage: PipeStage,
        role: JudgeRole,
    ) -> Result<Vec<u8>, StageFailure> {
        let (max_attempts, backoff_base) = match self.client.endpoint(role) {
            Some(e) => (e.max_attempts, e.backoff_base),
            None => (1, std::time::Duration::ZERO),
        };
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.fetcher.resolve_image(entry).await {
                Ok(bytes) => return Ok(bytes),
                Err(FetchError::Retryable { .. }) if attempt < max_attempts => {
                    tokio::time::sleep(backoff_delay(backoff_base, attempt)).await;
                }
                Err(err) => {
                    return Err(self.failure(
                        &entry.id,
                        stage,
                        FailureKind::ImageFetch,
                        err.to_string(),
                    ))
                }
            }
        }
    }

    /// Shared judge-call loop for the key-score stages: call, parse, and on
    /// an unparseable reply re-prompt with a strict format reminder up to
    /// the parse-retry limit.
    async fn judged_scores(
        &self,
        entry_id: &str,
        stage: PipeStage,
        wire: WireStage,
        base_prompt: &str,
        image: Option<&[u8]>,
        keys: &[&str],
    ) -> Result<(BTreeMap<String, u8>, Vec<JudgeExchange>), StageFailure> {
        let strict = self.templates.get("strict_scores").expect("strict_scores template");
        let format_lines = keys
            .iter()
            .map(|k| format!("{k}: <0-5>"))
            .collect::<Vec<_>>()
            .join("\n");
        let mut exchanges = Vec::new();
        let mut last_err = None;
        for round in 0..=self.parse_retry_limit {
            let prompt = if round == 0 {
                base_prompt.to_string()
            } else {
                format!(
                    "{base_prompt}\n\n{}",
                    strict.render(&[("format_lines", format_lines.as_str())])
                )
            };
            let exchange = self
                .client
                .chat(entry_id, wire, &prompt, image)
                .await
                .map_err(|e| self.transport_failure(stage, e))?;
            match parse_scores(&exchange.raw_response, keys) {
                Ok(scores) => {
                    exchanges.push(exchange);
                    return Ok((scores, exchanges));
                }
                Err(err) => {
                    exchanges.push(exchange);
                    last_err = Some(err);
                }
            }
        }
        Err(self.failure(
            entry_id,
            stage,
            FailureKind::ParseExhausted,
            last_err.map(|e| e.to_string()).unwrap_or_default(),
        ))
    }

    /// Text quality: INFO / CPXT / CPLT from the text judge.
    pub async fn score_text(&self, entry: &DataEntry) -> Result<Staged<TextScores>, StageFailure> {
        let text = entry.joined_text();
        if text.trim().is_empty() {
            return Err(self.failure(
                &entry.id,
                PipeStage::Tqa,
                FailureKind::Precondition,
                "entry has no conversation text",
            ));
        }
        let template = self.templates.get("tqa").expect("tqa template");
        let prompt = template.render(&[("text", text.as_str())]);
        let (scores, exchanges) = self
            .judged_scores(&entry.id, PipeStage::Tqa, WireStage::Tqa, &prompt, None, &["INFO", "CPXT", "CPLT"])
            .await?;
        Ok(Staged {
            value: TextScores {
                info: scores["INFO"],
                cpxt: scores["CPXT"],
                cplt: scores["CPLT"],
            },
            exchanges,
            template_version: template.version.clone(),
        })
    }

    /// Image quality: BLUR / NOISE from the image judge, higher = cleaner.
    pub async fn score_image(&self, entry: &DataEntry) -> Result<Staged<ImageScores>, StageFailure> {
        let image = self.fetch_image(entry, PipeStage::Iqa, JudgeRole::Iqa).await?;
        let template = self.templates.get("iqa").expect("iqa template");
        let prompt = template.render(&[]);
        let (scores, exchanges) = self
            .judged_scores(
                &entry.id,
                PipeStage::Iqa,
                WireStage::Iqa,
                &prompt,
                Some(&image),
                &["BLUR", "NOISE"],
            )
            .await?;
        Ok(Staged {
            value: ImageScores { blur: scores["BLUR"], noise: scores["NOISE"] },
            exchanges,
            template_version: template.version.clone(),
        })
    }

    /// Task prediction over the fixed taxonomy, few-shot prompted.
    pub async fn predict_task(&self, entry: &DataEntry) -> Result<Staged<TaskOutcome>, StageFailure> {
        let text = entry.joined_text();
        if text.trim().is_empty() {
            return Err(self.failure(
                &entry.id,
                PipeStage::Task,
                FailureKind::Precondition,
                "entry has no conversation text",
            ));
        }
        let template = self.templates.get("task").expect("task template");
        let strict = self.templates.get("strict_task").expect("strict_task template");
        let task_list = render_task_list();
        let examples = render_few_shot_examples();
        let base_prompt = template.render(&[
            ("task_list", task_list.as_str()),
            ("examples", examples.as_str()),
            ("text", text.as_str()),
        ]);

        let mut exchanges = Vec::new();
        for round in 0..=self.parse_retry_limit {
            let prompt = if round == 0 {
                base_prompt.clone()
            } else {
                format!("{base_prompt}\n\n{}", strict.body)
            };
            let exchange = self
                .client
                .chat(&entry.id, WireStage::Task, &prompt, None)
                .await
                .map_err(|e| self.transport_failure(PipeStage::Task, e))?;
            let parsed = taxonomy::parse_task_response(&exchange.raw_response);
            exchanges.push(exchange);
            if let Ok(parsed) = parsed {
                return Ok(Staged {
                    value: TaskOutcome {
                        label: parsed.label,
                        category_corrected: parsed.category_corrected,
                    },
                    exchanges,
                    template_version: template.version.clone(),
                });
            }
        }
        Err(self.failure(
            &entry.id,
            PipeStage::Task,
            FailureKind::ParseExhausted,
            "no recognizable sub-task after retries",
        ))
    }

    /// Caption generation: one general call, and one task-specific call when
    /// a task label is available. Without a label the specific caption falls
    /// back to the general one and the outcome is flagged degraded.
    pub async fn caption(
        &self,
        entry: &DataEntry,
        task: Option<TaskLabel>,
    ) -> Result<Staged<CaptionOutcome>, StageFailure> {
        let image = self.fetch_image(entry, PipeStage::Caption, JudgeRole::Caption).await?;
        let general_template = self.templates.get("caption_general").expect("caption_general");
        let general_prompt = general_template.render(&[]);
        let general = self
            .client
            .chat(&entry.id, WireStage::CaptionGeneral, &general_prompt, Some(&image))
            .await
            .map_err(|e| self.transport_failure(PipeStage::Caption, e))?;
        if general.raw_response.trim().is_empty() {
            return Err(self.failure(
                &entry.id,
                PipeStage::Caption,
                FailureKind::EmptyCaption,
                "general caption is empty",
            ));
        }

        let mut exchanges = vec![general.clone()];
        let (specific_text, degraded) = match task {
            Some(label) => {
                let specific_template =
                    self.templates.get("caption_specific").expect("caption_specific");
                let prompt = specific_template
                    .render(&[("task_focus", caption_focus(label.sub_task))]);
                let specific = self
                    .client
                    .chat(&entry.id, WireStage::CaptionSpecific, &prompt, Some(&image))
                    .await
                    .map_err(|e| self.transport_failure(PipeStage::Caption, e))?;
                if specific.raw_response.trim().is_empty() {
                    return Err(self.failure(
                        &entry.id,
                        PipeStage::Caption,
                        FailureKind::EmptyCaption,
                        "task-specific caption is empty",
                    ));
                }
                let text = specific.raw_response.clone();
                exchanges.push(specific);
                (text, false)
            }
            None => (general.raw_response.clone(), true),
        };

        Ok(Staged {
            value: CaptionOutcome {
                pair: CaptionPair {
                    general: general.raw_response,
                    specific: specific_text,
                    task,
                },
                caption_degraded: degraded,
            },
            exchanges,
            template_version: general_template.version.clone(),
        })
    }

    /// Multimodal rating: CLR / REL / TR from the text judge over the
    /// caption pair and the entry text. A single aggregate `Rating: <n>` is
    /// accepted as a coarse fallback and spread over all three sub-metrics.
    pub async fn rate_multimodal(
        &self,
        entry: &DataEntry,
        captions: &CaptionPair,
    ) -> Result<Staged<MmOutcome>, StageFailure> {
        let template = self.templates.get("mm").expect("mm template");
        let strict = self.templates.get("strict_scores").expect("strict_scores");
        let text = entry.joined_text();
        let captions_block = caption_block(captions);
        let base_prompt = template.render(&[
            ("captions", captions_block.as_str()),
            ("text", text.as_str()),
        ]);
        let keys = ["CLR", "REL", "TR"];
        let format_lines = "CLR: <0-5>\nREL: <0-5>\nTR: <0-5>";

        let mut exchanges = Vec::new();
        let mut last_err = String::new();
        for round in 0..=self.parse_retry_limit {
            let prompt = if round == 0 {
                base_prompt.clone()
            } else {
                format!("{base_prompt}\n\n{}", strict.render(&[("format_lines", format_lines)]))
            };
            let exchange = self
                .client
                .chat(&entry.id, WireStage::Mm, &prompt, None)
                .await
                .map_err(|e| self.transport_failure(PipeStage::Mm, e))?;
            let raw = exchange.raw_response.clone();
            exchanges.push(exchange);
            match parse_scores(&raw, &keys) {
                Ok(scores) => {
                    return Ok(Staged {
                        value: MmOutcome {
                            scores: MultimodalScores {
                                clr: scores["CLR"],
                                rel: scores["REL"],
                                tr: scores["TR"],
                            },
                            coarse_rating: false,
                        },
                        exchanges,
                        template_version: template.version.clone(),
                    });
                }
                Err(triple_err) => {
                    if let Ok(single) = parse_scores(&raw, &["Rating"]) {
                        let rating = single["Rating"];
                        return Ok(Staged {
                            value: MmOutcome {
                                scores: MultimodalScores { clr: rating, rel: rating, tr: rating },
                                coarse_rating: true,
                            },
                            exchanges,
                            template_version: template.version.clone(),
                        });
                    }
                    last_err = triple_err.to_string();
                }
            }
        }
        Err(self.failure(&entry.id, PipeStage::Mm, FailureKind::ParseExhausted, last_err))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::judge::{EndpointConfig, MockBackend, MockOutcome};
    use std::collections::HashMap;
    use std::time::Duration;

    fn entry(id: &str) -> DataEntry {
        DataEntry {
            id: id.into(),
            image_ref: "unused.png".into(),
            conversation: vec![
                crate::corpus::Turn {
                    role: crate::corpus::TurnRole::User,
                    content: "What color is the horse?".into(),
                },
                crate::corpus::Turn {
                    role: crate::corpus::TurnRole::Assistant,
                    content: "Chestnut.".into(),
                },
            ],
            source: "demo".into(),
            answer_format: None,
        }
    }

    fn entry_with_image(id: &str, image: &std::path::Path) -> DataEntry {
        let mut e = entry(id);
        e.image_ref = image.display().to_string();
        e
    }

    fn rater(mock: MockBackend) -> Rater {
        let mut endpoints = HashMap::new();
        for role in crate::judge::ALL_ROLES {
            let mut e = EndpointConfig::new("http://mock", "mock");
            e.backoff_base = Duration::from_millis(1);
            endpoints.insert(role, e);
        }
        let client = JudgeClient::new(Arc::new(mock), endpoints).unwrap();
        Rater::new(Arc::new(client), PromptLibrary::builtin(), 2)
    }

    fn test_image() -> tempfile::NamedTempFile {
        use std::io::Write as _;
        let mut file = tempfile::NamedTempFile::new().unwrap();
        file.write_all(&[0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A]).unwrap();
        file.flush().unwrap();
        file
    }

    #[test]
    fn parse_scores_happy_paths() {
        let map = parse_scores("INFO: 4\nCPXT: 3\nCPLT: 5", &["INFO", "CPXT", "CPLT"]).unwrap();
        assert_eq!(map["INFO"], 4);
        assert_eq!(map["CPXT"], 3);
        assert_eq!(map["CPLT"], 5);

        let single = parse_scores("Rating: 4", &["Rating"]).unwrap();
        assert_eq!(single["Rating"], 4);

        // Case-insensitive, tolerant of prose around the lines.
        let messy = parse_scores("Sure! blur: 2, and noise = 1.", &["BLUR", "NOISE"]).unwrap();
        assert_eq!(messy["BLUR"], 2);
        assert_eq!(messy["NOISE"], 1);
    }

    #[test]
    fn parse_scores_reports_offending_keys() {
        let err = parse_scores("INFO: 4", &["INFO", "CPXT"]).unwrap_err();
        assert_eq!(err.missing, vec!["CPXT"]);
        assert!(err.out_of_range.is_empty());

        let err = parse_scores("INFO: 7\nCPXT: 3", &["INFO", "CPXT"]).unwrap_err();
        assert_eq!(err.out_of_range, vec!["INFO"]);

        let err = parse_scores("INFO: -1", &["INFO"]).unwrap_err();
        assert_eq!(err.out_of_range, vec!["INFO"]);
    }

    #[test]
    fn key_matching_respects_word_boundaries() {
        // "TR" must not match inside "CLR" or other words.
        assert_eq!(find_key_int("CLR: 5", "TR"), None);
        assert_eq!(find_key_int("XTR: 5", "TR"), None);
        assert_eq!(find_key_int("TR: 5", "TR"), Some(5));
        assert_eq!(find_key_int("Multimodal Rating: 2", "Rating"), Some(2));
        // A colon is required between key and value.
        assert_eq!(find_key_int("INFO 4", "INFO"), None);
    }

    #[test]
    fn render_parse_round_trip() {
        let rendered = render_scores(&[("INFO", 4), ("CPXT", 3), ("CPLT", 5)]);
        assert_eq!(rendered, "INFO: 4\nCPXT: 3\nCPLT: 5");
        let parsed = parse_scores(&rendered, &["INFO", "CPXT", "CPLT"]).unwrap();
        assert_eq!(parsed["INFO"], 4);
        assert_eq!(parsed["CPXT"], 3);
        assert_eq!(parsed["CPLT"], 5);
    }

    #[test]
    fn builtin_templates_have_headers_and_placeholders() {
        let library = PromptLibrary::builtin();
        for name in ["tqa", "iqa", "task", "caption_general", "caption_specific", "mm"] {
            let template = library.get(name).unwrap();
            assert_eq!(template.name, name);
            assert_eq!(template.version, "v1");
        }
        assert!(library.get("tqa").unwrap().has_placeholder("text"));
        assert!(library.get("task").unwrap().has_placeholder("task_list"));
        assert!(library.get("no_such").is_err());
    }

    #[tokio::test]
    async fn score_text_parses_fixture() {
        let mut mock = MockBackend::new();
        mock.respond("e1", WireStage::Tqa, "INFO: 4\nCPXT: 3\nCPLT: 5");
        let rater = rater(mock);
        let staged = rater.score_text(&entry("e1")).await.unwrap();
        assert_eq!(staged.value, TextScores { info: 4, cpxt: 3, cplt: 5 });
        assert_eq!(staged.template_version, "v1");
        assert_eq!(staged.exchanges.len(), 1);
    }

    #[tokio::test]
    async fn score_text_retries_out_of_range_then_succeeds() {
        let mut mock = MockBackend::new();
        mock.script(
            "e1",
            WireStage::Tqa,
            vec![
                MockOutcome::Respond("INFO: 7\nCPXT: 3\nCPLT: 5".into()),
                MockOutcome::Respond("INFO: 5\nCPXT: 3\nCPLT: 5".into()),
            ],
        );
        let rater = rater(mock);
        let staged = rater.score_text(&entry("e1")).await.unwrap();
        assert_eq!(staged.value.info, 5);
        assert_eq!(staged.exchanges.len(), 2);
        // The re-prompt carries the strict format reminder.
        assert!(staged.exchanges[1].prompt.contains("could not be parsed"));
    }

    #[tokio::test]
    async fn score_text_empty_conversation_never_calls_judge() {
        let mock = MockBackend::new();
        let rater = rater(mock);
        let mut e = entry("e1");
        e.conversation.clear();
        let err = rater.score_text(&e).await.unwrap_err();
        assert!(matches!(err.kind, FailureKind::Precondition));
        assert_eq!(rater.client().requests_issued(), 0);
    }

    #[tokio::test]
    async fn parse_retry_exhaustion_fails_the_stage() {
        let mut mock = MockBackend::new();
        mock.respond("e1", WireStage::Tqa, "no scores here");
        let rater = rater(mock);
        let err = rater.score_text(&entry("e1")).await.unwrap_err();
        assert!(matches!(err.kind, FailureKind::ParseExhausted));
        // 1 initial call + 2 parse retries.
        assert_eq!(rater.client().requests_issued(), 3);
    }

    #[tokio::test]
    async fn score_image_parses_fixture() {
        let image = test_image();
        let mut mock = MockBackend::new();
        mock.respond("e1", WireStage::Iqa, "BLUR: 1\nNOISE: 2");
        let rater = rater(mock);
        let staged = rater.score_image(&entry_with_image("e1", image.path())).await.unwrap();
        assert_eq!(staged.value, ImageScores { blur: 1, noise: 2 });
    }

    #[tokio::test]
    async fn score_image_unreachable_ref_is_stage_failure() {
        let mock = MockBackend::new().with_default("BLUR: 5\nNOISE: 5");
        let rater = rater(mock);
        let err = rater
            .score_image(&entry_with_image("e1", std::path::Path::new("/nope/missing.png")))
            .await
            .unwrap_err();
        assert_eq!(err.stage, PipeStage::Iqa);
        assert!(matches!(err.kind, FailureKind::ImageFetch));
        assert_eq!(rater.client().requests_issued(), 0);
    }

    #[tokio::test]
    async fn predict_task_parses_fixture() {
        let mut mock = MockBackend::new();
        mock.respond("e1", WireStage::Task, "Task: Relation Reasoning; Sub-task: Social Relation");
        let rater = rater(mock);
        let staged = rater.predict_task(&entry("e1")).await.unwrap();
        assert_eq!(
            staged.value.label,
            TaskLabel::from_sub_task(SubTask::SocialRelation)
        );
        assert!(!staged.value.category_corrected);
        // The rendered prompt carries the full task list and examples.
        assert!(staged.exchanges[0].prompt.contains("Physical Relation"));
        assert!(staged.exchanges[0].prompt.contains("Worked examples"));
    }

    #[tokio::test]
    async fn predict_task_exhausts_parse_retries() {
        let mut mock = MockBackend::new();
        mock.respond("e1", WireStage::Task, "I cannot tell.");
        let rater = rater(mock);
        let err = rater.predict_task(&entry("e1")).await.unwrap_err();
        assert_eq!(err.stage, PipeStage::Task);
        assert!(matches!(err.kind, FailureKind::ParseExhausted));
        assert_eq!(rater.client().requests_issued(), 3);
    }

    #[tokio::test]
    async fn caption_produces_both_texts() {
        let image = test_image();
        let mut mock = MockBackend::new();
        mock.respond("e1", WireStage::CaptionGeneral, "A chestnut horse in a paddock.");
        mock.respond("e1", WireStage::CaptionSpecific, "The horse occupies the left half.");
        let rater = rater(mock);
        let staged = rater
            .caption(
                &entry_with_image("e1", image.path()),
                Some(TaskLabel::from_sub_task(SubTask::ObjectLocalization)),
            )
            .await
            .unwrap();
        assert_eq!(staged.value.pair.general, "A chestnut horse in a paddock.");
        assert_eq!(staged.value.pair.specific, "The horse occupies the left half.");
        assert!(!staged.value.caption_degraded);
        assert_eq!(staged.exchanges.len(), 2);
    }

    #[tokio::test]
    async fn caption_without_task_degrades_to_general() {
        let image = test_image();
        let mut mock = MockBackend::new();
        mock.respond("e1", WireStage::CaptionGeneral, "A chestnut horse in a paddock.");
        let rater = rater(mock);
        let staged = rater.caption(&entry_with_image("e1", image.path()), None).await.unwrap();
        assert_eq!(staged.value.pair.general, staged.value.pair.specific);
        assert!(staged.value.caption_degraded);
        assert!(staged.value.pair.task.is_none());
        assert_eq!(staged.exchanges.len(), 1);
    }

    #[tokio::test]
    async fn empty_caption_fails_the_stage() {
        let image = test_image();
        let mut mock = MockBackend::new();
        mock.respond("e1", WireStage::CaptionGeneral, "");
        let rater = rater(mock);
        let err = rater.caption(&entry_with_image("e1", image.path()), None).await.unwrap_err();
        assert_eq!(err.stage, PipeStage::Caption);
        assert!(matches!(err.kind, FailureKind::EmptyCaption));
    }

    #[tokio::test]
    async fn rate_multimodal_parses_triple() {
        let mut mock = MockBackend::new();
        mock.respond("e1", WireStage::Mm, "CLR: 5\nREL: 5\nTR: 5");
        let rater = rater(mock);
        let captions = CaptionPair {
            general: "g".into(),
            specific: "s".into(),
            task: Some(TaskLabel::from_sub_task(SubTask::ImageScene)),
        };
        let staged = rater.rate_multimodal(&entry("e1"), &captions).await.unwrap();
        assert_eq!(staged.value.scores, MultimodalScores { clr: 5, rel: 5, tr: 5 });
        assert!(!staged.value.coarse_rating);
    }

    #[tokio::test]
    async fn rate_multimodal_coarse_fallback() {
        let mut mock = MockBackend::new();
        mock.respond("e1", WireStage::Mm, "Multimodal Rating: 2 - correct but context-free");
        let rater = rater(mock);
        let captions = CaptionPair { general: "g".into(), specific: "s".into(), task: None };
        let staged = rater.rate_multimodal(&entry("e1"), &captions).await.unwrap();
        assert_eq!(staged.value.scores, MultimodalScores { clr: 2, rel: 2, tr: 2 });
        assert!(staged.value.coarse_rating);
    }

    #[tokio::test]
    async fn rate_multimodal_garbage_fails_after_retries() {
        let mut mock = MockBackend::new();
        mock.respond("e1", WireStage::Mm, "utter garbage");
        let rater = rater(mock);
        let captions = CaptionPair { general: "g".into(), specific: "s".into(), task: None };
        let err = rater.rate_multimodal(&entry("e1"), &captions).await.unwrap_err();
        assert_eq!(err.stage, PipeStage::Mm);
        assert!(matches!(err.kind, FailureKind::ParseExhausted));
    }

    #[test]
    fn digest_is_stable() {
        let a = digest_hex(["x", "y"]);
        let b = digest_hex(["x", "y"]);
        assert_eq!(a, b);
        assert_ne!(a, digest_hex(["xy"]));
        assert_eq!(a.len(), 64);
    }
}

//! Manifest loading, validation, and image resolution.
//!
//! A manifest is UTF-8, one JSON object per line: `id`, `image`,
//! `conversations` (list of `{"role","content"}`), `source`, and an optional
//! `answer_format`. Lines that fail validation are collected into a rejection
//! report with their line number and reason, never silently dropped.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TurnRole {
    User,
    Assistant,
}

/// One conversation turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: TurnRole,
    pub content: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerFormat {
    Open,
    MultipleChoice,
}

/// One image-text instruction-tuning sample with source provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataEntry {
    pub id: String,
    #[serde(rename = "image")]
    pub image_ref: String,
    #[serde(rename = "conversations")]
    pub conversation: Vec<Turn>,
    pub source: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer_format: Option<AnswerFormat>,
}

impl DataEntry {
    /// The entry text used for judging: all turns concatenated with role
    /// prefixes, so judges see both the instruction and the response.
    pub fn joined_text(&self) -> String {
        self.conversation
            .iter()
            .map(|t| {
                let role = match t.role {
                    TurnRole::User => "user",
                    TurnRole::Assistant => "assistant",
                };
                format!("{role}: {}", t.content)
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Validated entries plus per-source counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<DataEntry>,
    pub source_counts: BTreeMap<String, usize>,
}

impl Manifest {
    pub fn from_entries(entries: Vec<DataEntry>) -> Self {
        let mut source_counts = BTreeMap::new();
        for entry in &entries {
            *source_counts.entry(entry.source.clone()).or_insert(0) += 1;
        }
        Manifest { entries, source_counts }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One rejected input line: the original record (or raw text when the line
/// was not valid JSON) plus position and reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub line: usize,
    pub reason: String,
    pub record: Value,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadOutcome {
    pub manifest: Manifest,
    pub rejections: Vec<Rejection>,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read manifest {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn validate_entry(value: &Value) -> Result<DataEntry, String> {
    let obj = value.as_object().ok_or("not a JSON object")?;

    let id = match obj.get("id") {
        None => return Err("id missing".into()),
        Some(Value::String(s)) if s.is_empty() => return Err("id empty".into()),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err("id not a string".into()),
    };

    let image_ref = match obj.get("image") {
        None => return Err("image_ref missing".into()),
        Some(Value::String(s)) if s.is_empty() => return Err("image_ref empty".into()),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err("image_ref not a string".into()),
    };

    let turns_value = obj.get("conversations").ok_or("conversations missing")?;
    let turns_raw = turns_value
        .as_array()
        .ok_or("conversations not a list")?;
    if turns_raw.is_empty() {
        return Err("conversations empty".into());
    }
    let mut conversation = Vec::with_capacity(turns_raw.len());
    for (i, turn) in turns_raw.iter().enumerate() {
        let t = turn
            .as_object()
            .ok_or_else(|| format!("conversation turn {i} not an object"))?;
        let role = match t.get("role").and_then(Value::as_str) {
            Some("user") => TurnRole::User,
            Some("assistant") => TurnRole::Assistant,
            _ => {
                return Err(format!(
                    "conversation turn {i} role must be \"user\" or \"assistant\""
                ))
            }
        };
        let content = t
            .get("content")
            .and_then(Value::as_str)
            .ok_or_else(|| format!("conversation turn {i} content missing"))?
            .to_string();
        conversation.push(Turn { role, content });
    }
    if !conversation.iter().any(|t| t.role == TurnRole::User) {
        return Err("conversation has no user turn".into());
    }
    if !conversation.iter().any(|t| t.role == TurnRole::Assistant) {
        return Err("conversation has no assistant turn".into());
    }

    let source = match obj.get("source") {
        None => return Err("source missing".into()),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err("source not a string".into()),
    };

    let answer_format = match obj.get("answer_format") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) if s == "open" => Some(AnswerFormat::Open),
        Some(Value::String(s)) if s == "multiple_choice" => Some(AnswerFormat::MultipleChoice),
        Some(_) => return Err("answer_format must be \"open\" or \"multiple_choice\"".into()),
    };

    Ok(DataEntry { id, image_ref, conversation, source, answer_format })
}

/// Loads a line-delimited manifest. Every input line ends up either in the
/// manifest or in the rejection report; the split is deterministic.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<LoadOutcome, CorpusError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| CorpusError::Read {
        path: path.display().to_string(),
        source,
    })?;

    let mut entries = Vec::new();
    let mut rejections = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();

    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| CorpusError::Read {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            rejections.push(Rejection {
                line: line_no,
                reason: "empty line".into(),
                record: Value::String(line),
            });
            continue;
        }
        let value: Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(err) => {
                rejections.push(Rejection {
                    line: line_no,
                    reason: format!("invalid JSON: {err}"),
                    record: Value::String(line),
                });
                continue;
            }
        };
        match validate_entry(&value) {
            Ok(entry) => {
                if let Some(first) = seen.get(&entry.id) {
                    rejections.push(Rejection {
                        line: line_no,
                        reason: format!("duplicate id {:?} (first seen on line {first})", entry.id),
                        record: value,
                    });
                } else {
                    seen.insert(entry.id.clone(), line_no);
                    entries.push(entry);
                }
            }
            Err(reason) => rejections.push(Rejection { line: line_no, reason, record: value }),
        }
    }

    Ok(LoadOutcome {
        manifest: Manifest::from_entries(entries),
        rejections,
    })
}

/// Writes entries as one JSON object per line, in the given order.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[DataEntry]) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let to_io = |source| CorpusError::Write { path: path.display().to_string(), source };
    let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(to_io)?);
    for entry in entries {
        serde_json::to_writer(&mut out, entry).map_err(|e| to_io(e.into()))?;
        out.write_all(b"\n").map_err(to_io)?;
    }
    out.flush().map_err(to_io)
}

/// Writes the rejection report next to a normalized manifest.
pub fn write_rejections(
    path: impl AsRef<Path>,
    rejections: &[Rejection],
) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let to_io = |source| CorpusError::Write { path: path.display().to_string(), source };
    let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(to_io)?);
    for rejection in rejections {
        // Keep the rejected record's own fields visible: emit the original
        // object with `line` and `reason` added when it was an object.
        let mut line_obj = match &rejection.record {
            Value::Object(map) => map.clone(),
            other => {
                let mut map = serde_json::Map::new();
                map.insert("raw".into(), other.clone());
                map
            }
        };
        line_obj.insert("line".into(), Value::from(rejection.line));
        line_obj.insert("reason".into(), Value::from(rejection.reason.clone()));
        serde_json::to_writer(&mut out, &Value::Object(line_obj)).map_err(|e| to_io(e.into()))?;
        out.write_all(b"\n").map_err(to_io)?;
    }
    out.flush().map_err(to_io)
}

/// Image fetch failure, split by whether a retry can possibly help.
#[derive(Debug, Error)]
pub enum FetchError {
    #[error("image not found: {0}")]
    NotFound(String),
    #[error("permanent fetch failure for {reference}: HTTP {status}")]
    PermanentHttp { reference: String, status: u16 },
    #[error("retryable fetch failure for {reference}: {cause}")]
    Retryable { reference: String, cause: String },
}

impl FetchError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, FetchError::Retryable { .. })
    }
}

/// Resolves `image_ref` values to raw bytes. Filesystem paths are read
/// directly; http(s) URLs are fetched. Safe to share across workers.
#[derive(Debug, Clone)]
pub struct ImageFetcher {
    http: reqwest::Client,
}

impl Default for ImageFetcher {
    fn default() -> Self {
        Self::new()
    }
}

impl ImageFetcher {
    pub fn new() -> Self {
        ImageFetcher { http: reqwest::Client::new() }
    }

    pub async fn resolve_image(&self, entry: &DataEntry) -> Result<Vec<u8>, FetchError> {
        let reference = entry.image_ref.as_str();
        if reference.starts_with("http://") || reference.starts_with("https://") {
            self.fetch_url(reference).await
        } else {
            fetch_file(reference)
        }
    }

    async fn fetch_url(&self, url: &str) -> Result<Vec<u8>, FetchError> {
        let response = self.http.get(url).send().await.map_err(|e| FetchError::Retryable {
            reference: url.to_string(),
            cause: e.to_string(),
        })?;
        let status = response.status();
        if status.is_success() {
            return response
                .bytes()
                .await
                .map(|b| b.to_vec())
                .map_err(|e| FetchError::Retryable {
                    reference: url.to_string(),
                    cause: e.to_string(),
                });
        }
        let code = status.as_u16();
        if code == 404 || code == 410 {
            Err(FetchError::NotFound(url.to_string()))
        } else if code == 429 || status.is_server_error() {
            Err(FetchError::Retryable {
                reference: url.to_string(),
                cause: format!("HTTP {code}"),
            })
        } else {
            Err(FetchError::PermanentHttp { reference: url.to_string(), status: code })
        }
    }
}

fn fetch_file(path: &str) -> Result<Vec<u8>, FetchError> {
    match fs::read(path) {
        Ok(bytes) => Ok(bytes),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(FetchError::NotFound(path.to_string()))
        }
        Err(e) => Err(FetchError::Retryable {
            reference: path.to_string(),
            cause: e.to_string(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry_json(id: &str) -> String {
        format!(
            r#"{{"id":"{id}","image":"img/{id}.png","conversations":[{{"role":"user","content":"What is shown?"}},{{"role":"assistant","content":"A cat."}}],"source":"demo"}}"#
        )
    }

    fn write_lines(lines: &[String]) -> tempfile::NamedTempFile {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        for line in lines {
            writeln!(file, "{line}").unwrap();
        }
        file.flush().unwrap();
        file
    }

    #[test]
    fn three_valid_lines_load_cleanly() {
        let file = write_lines(&[entry_json("a"), entry_json("b"), entry_json("c")]);
        let outcome = load_manifest(file.path()).unwrap();
        assert_eq!(outcome.manifest.len(), 3);
        assert!(outcome.rejections.is_empty());
        assert_eq!(outcome.manifest.source_counts["demo"], 3);
    }

    #[test]
    fn missing_image_ref_is_rejected_with_reason() {
        let broken = r#"{"id":"x","conversations":[{"role":"user","content":"q"},{"role":"assistant","content":"a"}],"source":"demo"}"#;
        let file = write_lines(&[entry_json("a"), entry_json("b"), broken.to_string()]);
        let outcome = load_manifest(file.path()).unwrap();
        assert_eq!(outcome.manifest.len(), 2);
        assert_eq!(outcome.rejections.len(), 1);
        assert_eq!(outcome.rejections[0].line, 3);
        assert_eq!(outcome.rejections[0].reason, "image_ref missing");
    }

    #[test]
    fn duplicate_id_rejects_the_later_line() {
        let file = write_lines(&[
            entry_json("e1"),
            entry_json("e2"),
            entry_json("e3"),
            entry_json("e1"),
        ]);
        let outcome = load_manifest(file.path()).unwrap();
        assert_eq!(outcome.manifest.len(), 3);
        assert_eq!(outcome.rejections.len(), 1);
        assert_eq!(outcome.rejections[0].line, 4);
        assert!(outcome.rejections[0].reason.contains("duplicate id \"e1\""));
        assert!(outcome.rejections[0].reason.contains("line 1"));
        // Recount oracle: the manifest's counts match a full recount.
        let recount = Manifest::from_entries(outcome.manifest.entries.clone());
        assert_eq!(recount.source_counts, outcome.manifest.source_counts);
    }

    #[test]
    fn line_conservation_and_determinism() {
        let lines = vec![
            entry_json("a"),
            "not json at all".to_string(),
            String::new(),
            entry_json("a"),
            r#"{"id":"z","image":"i.png","conversations":[{"role":"user","content":"q"}],"source":"s"}"#
                .to_string(),
        ];
        let file = write_lines(&lines);
        let first = load_manifest(file.path()).unwrap();
        assert_eq!(first.manifest.len() + first.rejections.len(), lines.len());
        assert!(first.rejections.iter().any(|r| r.reason == "conversation has no assistant turn"));
        let second = load_manifest(file.path()).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn joined_text_prefixes_roles() {
        let file = write_lines(&[entry_json("a")]);
        let outcome = load_manifest(file.path()).unwrap();
        let text = outcome.manifest.entries[0].joined_text();
        assert_eq!(text, "user: What is shown?\nassistant: A cat.");
    }

    #[test]
    fn manifest_write_read_round_trip() {
        let file = write_lines(&[entry_json("a"), entry_json("b")]);
        let outcome = load_manifest(file.path()).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        write_manifest(out.path(), &outcome.manifest.entries).unwrap();
        let reread = load_manifest(out.path()).unwrap();
        assert_eq!(reread.manifest, outcome.manifest);
        assert!(reread.rejections.is_empty());
    }

    #[test]
    fn rejection_report_keeps_original_fields() {
        let broken = r#"{"id":"x","conversations":[],"source":"demo"}"#;
        let file = write_lines(&[broken.to_string()]);
        let outcome = load_manifest(file.path()).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        write_rejections(out.path(), &outcome.rejections).unwrap();
        let text = fs::read_to_string(out.path()).unwrap();
        let value: Value = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(value["id"], "x");
        assert_eq!(value["line"], 1);
        assert_eq!(value["reason"], "image_ref missing");
    }

    #[test]
    fn local_image_bytes_round_trip() {
        let mut img = tempfile::NamedTempFile::new().unwrap();
        img.write_all(&[0x89, b'P', b'N', b'G']).unwrap();
        img.flush().unwrap();
        let entry = DataEntry {
            id: "a".into(),
            image_ref: img.path().display().to_string(),
            conversation: vec![],
            source: "demo".into(),
            answer_format: None,
        };
        let fetcher = ImageFetcher::new();
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        let bytes = rt.block_on(fetcher.resolve_image(&entry)).unwrap();
        assert_eq!(bytes, vec![0x89, b'P', b'N', b'G']);
    }

    #[test]
    fn missing_file_is_not_found() {
        let entry = DataEntry {
            id: "a".into(),
            image_ref: "/definitely/not/here.png".into(),
            conversation: vec![],
            source: "demo".into(),
            answer_format: None,
        };
        let fetcher = ImageFetcher::new();
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        let err = rt.block_on(fetcher.resolve_image(&entry)).unwrap_err();
        assert!(matches!(err, FetchError::NotFound(_)));
        assert!(!err.is_retryable());
    }
}

//! Checkpointed, resumable orchestration of the five rating stages over a
//! manifest, followed by scorecard assembly, selection, export, and reports.
//!
//! Stage outputs are append-only line-delimited JSON files, one per stage.
//! Completion is judged per entry by scanning those files, so a killed run
//! resumes exactly where it stopped and a finished run is idempotent: no
//! judge call is ever repeated for an entry that already has a record.

use futures::StreamExt;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use thiserror::Error;

use crate::corpus::{self, DataEntry, Manifest};
use crate::judge::{ChatBackend, EndpointConfig, HttpBackend, JudgeClient, JudgeRole, MockBackend};
use crate::rating::{
    CaptionOutcome, ImageScores, MmOutcome, PipeStage,
    PromptLibrary, Rater, StageFailure, Staged, TaskOutcome, TextScores, ALL_STAGES,
};
use crate::report::{
    render_histogram_jsonl, render_histogram_svg,
    render_histogram_text, render_selection_stats_jsonl, render_selection_stats_text,
    score_histogram, selection_stats,
};
use crate::scoring::{build_scorecard, CardFlag, Rational, ScoreCard, Weights};
use crate::selection::{
    select_embed_sim, select_random, select_top, EmbeddingPair, RankKey, Ranking, SelectionResult,
    Strategy,
};

/// Everything one `run` invocation needs.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub manifest_path: PathBuf,
    pub workdir: PathBuf,
    pub endpoints: HashMap<JudgeRole, EndpointConfig>,
    pub weights: Weights,
    pub percentile: Rational,
    pub strategy: Strategy,
    pub stages: BTreeSet<PipeStage>,
    pub parse_retry_limit: u32,
    pub seed: u64,
    pub workers: usize,
    pub declared_pool: Option<u64>,
    /// 1-based shard index and shard count; entries are assigned by
    /// manifest position modulo the count.
    pub shard: Option<(u32, u32)>,
    pub embeddings_path: Option<PathBuf>,
    pub force: bool,
    pub dry_run: bool,
}

impl RunConfig {
    pub fn new(manifest_path: impl Into<PathBuf>, workdir: impl Into<PathBuf>) -> Self {
        RunConfig {
            manifest_path: manifest_path.into(),
            workdir: workdir.into(),
            endpoints: default_endpoints(),
            weights: Weights::default(),
            percentile: Rational::new(1, 10),
            strategy: Strategy::Scale,
            stages: ALL_STAGES.into_iter().collect(),
            parse_retry_limit: 2,
            seed: 0,
            workers: 8,
            declared_pool: None,
            shard: None,
            embeddings_path: None,
            force: false,
            dry_run: false,
        }
    }
}

/// Endpoint defaults per role; URLs must be overridden for real runs.
pub fn default_endpoints() -> HashMap<JudgeRole, EndpointConfig> {
    let mut endpoints = HashMap::new();
    for (role, model) in [
        (JudgeRole::Iqa, "image-quality-judge"),
        (JudgeRole::Tqa, "text-judge"),
        (JudgeRole::Caption, "captioner"),
        (JudgeRole::Mm, "text-judge"),
    ] {
        let mut endpoint = EndpointConfig::new("http://localhost:8000/v1", model);
        endpoint.api_key_env = format!("{}_API_KEY", role.as_str().to_uppercase());
        endpoints.insert(role, endpoint);
    }
    endpoints
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("workdir {path}: {source}")]
    Workdir {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot read {path}: {cause}")]
    ReadFile { path: String, cause: String },
    #[error(transparent)]
    Selection(#[from] crate::selection::SelectionError),
    #[error("report error: {0}")]
    Report(String),
}

/// One line of a stage output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub entry_id: String,
    pub stage: PipeStage,
    pub payload: Value,
    pub template_version: String,
    pub raw_response_digest: String,
}

impl StageRecord {
    fn ok<T: Serialize>(entry_id: &str, stage: PipeStage, staged: &Staged<T>) -> Self {
        StageRecord {
            entry_id: entry_id.to_string(),
            stage,
            payload: serde_json::to_value(&staged.value).expect("payload serializes"),
            template_version: staged.template_version.clone(),
            raw_response_digest: staged.raw_response_digest(),
        }
    }

    fn failed(failure: &StageFailure) -> Self {
        StageRecord {
            entry_id: failure.entry_id.clone(),
            stage: failure.stage,
            payload: json!({
                "stage_failed": failure.detail,
                "kind": failure.kind,
            }),
            template_version: String::new(),
            raw_response_digest: String::new(),
        }
    }

    fn blocked(entry_id: &str, stage: PipeStage, upstream: PipeStage) -> Self {
        StageRecord {
            entry_id: entry_id.to_string(),
            stage,
            payload: json!({
                "stage_failed": format!("blocked by failed {upstream} stage"),
                "kind": "upstream",
            }),
            template_version: String::new(),
            raw_response_digest: String::new(),
        }
    }

    pub fn is_failed(&self) -> bool {
        self.payload.get("stage_failed").is_some()
    }

    /// Root-cause failure, i.e. failed in this stage rather than blocked by
    /// an upstream one.
    pub fn is_root_failure(&self) -> bool {
        self.is_failed() && self.payload.get("kind").and_then(Value::as_str) != Some("upstream")
    }
}

/// Typed view of a stage record payload.
#[derive(Debug, Clone, PartialEq)]
pub enum StageData {
    Iqa(ImageScores),
    Tqa(TextScores),
    Task(TaskOutcome),
    Caption(CaptionOutcome),
    Mm(MmOutcome),
    Failed { detail: String },
}

impl StageRecord {
    /// Interprets the payload for this record's stage. `None` means the
    /// payload is malformed and the record should be treated as absent.
    pub fn data(&self) -> Option<StageData> {
        if self.is_failed() {
            let detail = self
                .payload
                .get("stage_failed")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string();
            return Some(StageData::Failed { detail });
        }
        let payload = self.payload.clone();
        match self.stage {
            PipeStage::Iqa => serde_json::from_value(payload).ok().map(StageData::Iqa),
            PipeStage::Tqa => serde_json::from_value(payload).ok().map(StageData::Tqa),
            PipeStage::Task => serde_json::from_value(payload).ok().map(StageData::Task),
            PipeStage::Caption => serde_json::from_value(payload).ok().map(StageData::Caption),
            PipeStage::Mm => serde_json::from_value(payload).ok().map(StageData::Mm),
        }
    }
}

pub fn stage_file_path(workdir: &Path, stage: PipeStage) -> PathBuf {
    workdir.join(format!("stage_{}.jsonl", stage.as_str()))
}

/// Per-stage completion state derived by scanning the stage files. An entry
/// appears at most once per stage; on re-runs the last record wins.
#[derive(Debug, Default)]
pub struct Checkpoint {
    per_stage: BTreeMap<PipeStage, BTreeMap<String, StageRecord>>,
    pub malformed_lines: u64,
}

impl Checkpoint {
    pub fn load(workdir: &Path) -> Result<Self, PipelineError> {
        let mut checkpoint = Checkpoint::default();
        for stage in ALL_STAGES {
            let path = stage_file_path(workdir, stage);
            let map = checkpoint.per_stage.entry(stage).or_default();
            let file = match fs::File::open(&path) {
                Ok(f) => f,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => continue,
                Err(e) => {
                    return Err(PipelineError::ReadFile {
                        path: path.display().to_string(),
                        cause: e.to_string(),
                    })
                }
            };
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| PipelineError::ReadFile {
                    path: path.display().to_string(),
                    cause: e.to_string(),
                })?;
                if line.trim().is_empty() {
                    continue;
                }
                // A torn final line from a killed run parses as garbage;
                // count it and let the entry be reprocessed.
                match serde_json::from_str::<StageRecord>(&line) {
                    Ok(record) => {
                        map.insert(record.entry_id.clone(), record);
                    }
                    Err(_) => checkpoint.malformed_lines += 1,
                }
            }
        }
        Ok(checkpoint)
    }

    pub fn record(&self, stage: PipeStage, entry_id: &str) -> Option<&StageRecord> {
        self.per_stage.get(&stage).and_then(|m| m.get(entry_id))
    }

    pub fn is_done(&self, stage: PipeStage, entry_id: &str) -> bool {
        self.record(stage, entry_id).is_some()
    }

    pub fn stage_records(&self, stage: PipeStage) -> impl Iterator<Item = &StageRecord> {
        self.per_stage.get(&stage).into_iter().flat_map(|m| m.values())
    }

    pub fn pending_count(&self, stage: PipeStage, entries: &[DataEntry]) -> u64 {
        entries.iter().filter(|e| !self.is_done(stage, &e.id)).count() as u64
    }
}

/// Counters for one run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RunReport {
    pub total_entries: usize,
    pub stage_pending: BTreeMap<PipeStage, u64>,
    pub stage_processed: BTreeMap<PipeStage, u64>,
    pub stage_skipped: BTreeMap<PipeStage, u64>,
    pub stage_failed: BTreeMap<PipeStage, u64>,
    pub stage_blocked: BTreeMap<PipeStage, u64>,
    pub judge_requests: u64,
    pub malformed_checkpoint_lines: u64,
    pub assembled: bool,
    pub cards_written: usize,
    pub excluded_entries: usize,
    pub selected: usize,
    pub dry_run: bool,
}

fn validate_config(config: &RunConfig, workdir_has: impl Fn(PipeStage) -> bool) -> Result<(), PipelineError> {
    if config.stages.is_empty() {
        return Err(PipelineError::Config("no stages requested".into()));
    }
    if config.percentile <= Rational::zero() || config.percentile > Rational::one() {
        return Err(PipelineError::Config(format!(
            "--top-percent must lie in (0, 100], got {}",
            config.percentile.to_f64() * 100.0
        )));
    }
    if let Some((index, count)) = config.shard {
        if count == 0 || index == 0 || index > count {
            return Err(PipelineError::Config(format!(
                "--shard must be i/n with 1 <= i <= n, got {index}/{count}"
            )));
        }
    }
    if config.workers == 0 {
        return Err(PipelineError::Config("workers must be >= 1".into()));
    }
    let has = |stage: PipeStage| config.stages.contains(&stage) || workdir_has(stage);
    if config.stages.contains(&PipeStage::Caption) && !has(PipeStage::Task) {
        return Err(PipelineError::Config(
            "caption stage requires the task stage (in this run or already recorded)".into(),
        ));
    }
    if config.stages.contains(&PipeStage::Mm) && !has(PipeStage::Caption) {
        return Err(PipelineError::Config(
            "mm stage requires the caption stage (in this run or already recorded)".into(),
        ));
    }
    Ok(())
}

fn shard_entries(entries: Vec<DataEntry>, shard: Option<(u32, u32)>) -> Vec<DataEntry> {
    match shard {
        None => entries,
        Some((index, count)) => entries
            .into_iter()
            .enumerate()
            .filter(|(i, _)| (*i as u32) % count == index - 1)
            .map(|(_, e)| e)
            .collect(),
    }
}

enum ChainState<T> {
    Done(Option<T>),
    Pending,
}

struct EntryStats {
    processed: Vec<PipeStage>,
    failed: Vec<PipeStage>,
    blocked: Vec<PipeStage>,
}

/// Runs the requested stages for one entry, sending records to the writer.
/// Stage order inside the chain is task -> caption -> mm; iqa and tqa are
/// independent of the chain and of each other.
async fn run_entry(
    entry: Arc<DataEntry>,
    rater: Arc<Rater>,
    checkpoint: Arc<Checkpoint>,
    stages: BTreeSet<PipeStage>,
    force: bool,
    tx: tokio::sync::mpsc::Sender<StageRecord>,
) -> EntryStats {
    let mut stats = EntryStats { processed: vec![], failed: vec![], blocked: vec![] };
    let needs = |stage: PipeStage| {
        stages.contains(&stage) && (force || !checkpoint.is_done(stage, &entry.id))
    };

    let iqa_fut = async {
        if !needs(PipeStage::Iqa) {
            return None;
        }
        match rater.score_image(&entry).await {
            Ok(staged) => Some((StageRecord::ok(&entry.id, PipeStage::Iqa, &staged), false)),
            Err(failure) => Some((StageRecord::failed(&failure), true)),
        }
    };

    let tqa_fut = async {
        if !needs(PipeStage::Tqa) {
            return None;
        }
        match rater.score_text(&entry).await {
            Ok(staged) => Some((StageRecord::ok(&entry.id, PipeStage::Tqa, &staged), false)),
            Err(failure) => Some((StageRecord::failed(&failure), true)),
        }
    };

    let chain_fut = async {
        let mut chain_records: Vec<(StageRecord, PipeStage, bool, bool)> = vec![];

        // Task prediction.
        let task_state: ChainState<TaskOutcome> = if needs(PipeStage::Task) {
            match rater.predict_task(&entry).await {
                Ok(staged) => {
                    chain_records.push((
                        StageRecord::ok(&entry.id, PipeStage::Task, &staged),
                        PipeStage::Task,
                        false,
                        false,
                    ));
                    ChainState::Done(Some(staged.value))
                }
                Err(failure) => {
                    chain_records.push((
                        StageRecord::failed(&failure),
                        PipeStage::Task,
                        true,
                        false,
                    ));
                    ChainState::Done(None)
                }
            }
        } else {
            match checkpoint.record(PipeStage::Task, &entry.id).and_then(StageRecord::data) {
                Some(StageData::Task(outcome)) => ChainState::Done(Some(outcome)),
                Some(StageData::Failed { .. }) => ChainState::Done(None),
                _ if stages.contains(&PipeStage::Task) => ChainState::Done(None),
                _ => ChainState::Pending,
            }
        };

        // Captioning. A failed task degrades the captions; a pending task
        // blocks them until a later run records it.
        let caption_state: ChainState<CaptionOutcome> = match (&task_state, needs(PipeStage::Caption)) {
            (ChainState::Pending, true) => {
                stats.blocked.push(PipeStage::Caption);
                ChainState::Pending
            }
            (ChainState::Done(task), true) => {
                let label = task.as_ref().map(|t| t.label);
                match rater.caption(&entry, label).await {
                    Ok(staged) => {
                        let outcome = staged.value.clone();
                        chain_records.push((
                            StageRecord::ok(&entry.id, PipeStage::Caption, &staged),
                            PipeStage::Caption,
                            false,
                            false,
                        ));
                        ChainState::Done(Some(outcome))
                    }
                    Err(failure) => {
                        chain_records.push((
                            StageRecord::failed(&failure),
                            PipeStage::Caption,
                            true,
                            false,
                        ));
                        ChainState::Done(None)
                    }
                }
            }
            (_, false) => {
                match checkpoint.record(PipeStage::Caption, &entry.id).and_then(StageRecord::data) {
                    Some(StageData::Caption(outcome)) => ChainState::Done(Some(outcome)),
                    Some(StageData::Failed { .. }) => ChainState::Done(None),
                    _ if stages.contains(&PipeStage::Caption) => ChainState::Done(None),
                    _ => ChainState::Pending,
                }
            }
        };

        // Multimodal rating.
        if needs(PipeStage::Mm) {
            match &caption_state {
                ChainState::Pending => stats.blocked.push(PipeStage::Mm),
                ChainState::Done(None) => {
                    chain_records.push((
                        StageRecord::blocked(&entry.id, PipeStage::Mm, PipeStage::Caption),
                        PipeStage::Mm,
                        false,
                        true,
                    ));
                }
                ChainState::Done(Some(captions)) => {
                    match rater.rate_multimodal(&entry, &captions.pair).await {
                        Ok(staged) => chain_records.push((
                            StageRecord::ok(&entry.id, PipeStage::Mm, &staged),
                            PipeStage::Mm,
                            false,
                            false,
                        )),
                        Err(failure) => chain_records.push((
                            StageRecord::failed(&failure),
                            PipeStage::Mm,
                            true,
                            false,
                        )),
                    }
                }
            }
        }
        chain_records
    };

    let (iqa_result, tqa_result, chain_records) =
        futures::join!(iqa_fut, tqa_fut, chain_fut);

    for (record, stage, failed) in [
        iqa_result.map(|(r, f)| (r, PipeStage::Iqa, f)),
        tqa_result.map(|(r, f)| (r, PipeStage::Tqa, f)),
    ]
    .into_iter()
    .flatten()
    {
        stats.processed.push(stage);
        if failed {
            stats.failed.push(stage);
        }
        let _ = tx.send(record).await;
    }
    for (record, stage, failed, blocked) in chain_records {
        stats.processed.push(stage);
        if failed {
            stats.failed.push(stage);
        }
        if blocked {
            stats.blocked.push(stage);
        }
        let _ = tx.send(record).await;
    }
    stats
}

/// Opens a stage file for appending. If a previous run was killed mid-write
/// the file may end without a newline; start on a fresh line so the torn
/// tail cannot corrupt the next record.
fn open_stage_file(workdir: &Path, stage: PipeStage) -> Result<fs::File, std::io::Error> {
    use std::io::{Read, Seek, SeekFrom};
    let path = stage_file_path(workdir, stage);
    let mut file = fs::OpenOptions::new().create(true).append(true).read(true).open(path)?;
    let len = file.seek(SeekFrom::End(0))?;
    if len > 0 {
        file.seek(SeekFrom::End(-1))?;
        let mut last = [0u8; 1];
        file.read_exact(&mut last)?;
        if last[0] != b'\n' {
            file.write_all(b"\n")?;
        }
    }
    Ok(file)
}

/// Appends records to the per-stage files, flushing after every line so a
/// kill can lose at most the line being written.
async fn stage_writer(
    workdir: PathBuf,
    mut rx: tokio::sync::mpsc::Receiver<StageRecord>,
) -> Result<(), std::io::Error> {
    let mut files: HashMap<PipeStage, std::io::BufWriter<fs::File>> = HashMap::new();
    while let Some(record) = rx.recv().await {
        let writer = match files.entry(record.stage) {
            std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(std::io::BufWriter::new(open_stage_file(&workdir, record.stage)?))
            }
        };
        serde_json::to_writer(&mut *writer, &record)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

/// Scorecard assembly outcome for the whole corpus.
pub struct Assembly {
    pub cards: Vec<ScoreCard>,
    /// Entries excluded because some stage failed, with root-cause stages.
    pub excluded: BTreeMap<String, Vec<PipeStage>>,
    pub root_failures: BTreeMap<PipeStage, u64>,
}

/// Builds scorecards for every entry whose scoring stages all parsed. Stage
/// failures exclude an entry; nothing is imputed. Cards come back sorted by
/// entry id.
pub fn assemble_cards(entries: &[DataEntry], checkpoint: &Checkpoint, weights: Weights) -> Assembly {
    let mut cards = Vec::new();
    let mut excluded: BTreeMap<String, Vec<PipeStage>> = BTreeMap::new();
    let mut root_failures: BTreeMap<PipeStage, u64> = BTreeMap::new();

    let mut sorted: Vec<&DataEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));

    for entry in sorted {
        let mut failed_stages = Vec::new();
        for stage in ALL_STAGES {
            if let Some(record) = checkpoint.record(stage, &entry.id) {
                if record.is_root_failure() {
                    failed_stages.push(stage);
                    *root_failures.entry(stage).or_insert(0) += 1;
                }
            }
        }

        let image = match checkpoint.record(PipeStage::Iqa, &entry.id).and_then(StageRecord::data) {
            Some(StageData::Iqa(scores)) => Some(scores),
            _ => None,
        };
        let text = match checkpoint.record(PipeStage::Tqa, &entry.id).and_then(StageRecord::data) {
            Some(StageData::Tqa(scores)) => Some(scores),
            _ => None,
        };
        let task = match checkpoint.record(PipeStage::Task, &entry.id).and_then(StageRecord::data) {
            Some(StageData::Task(outcome)) => Some(outcome.label),
            _ => None,
        };
        let (mm, coarse) = match checkpoint.record(PipeStage::Mm, &entry.id).and_then(StageRecord::data) {
            Some(StageData::Mm(outcome)) => (Some(outcome.scores), outcome.coarse_rating),
            _ => (None, false),
        };
        let degraded = matches!(
            checkpoint.record(PipeStage::Caption, &entry.id).and_then(StageRecord::data),
            Some(StageData::Caption(CaptionOutcome { caption_degraded: true, .. }))
        );

        let mut flags = BTreeSet::new();
        if degraded {
            flags.insert(CardFlag::CaptionDegraded);
        }
        if coarse {
            flags.insert(CardFlag::CoarseRating);
        }

        match build_scorecard(&entry.id, text, image, mm, task, weights, flags) {
            Ok(card) => cards.push(card),
            Err(_) => {
                excluded.insert(entry.id.clone(), failed_stages);
            }
        }
    }

    Assembly { cards, excluded, root_failures }
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    fs::write(path, text).map_err(|source| PipelineError::Workdir {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_scorecards(path: &Path, cards: &[ScoreCard]) -> Result<(), PipelineError> {
    let mut out = String::new();
    for card in cards {
        out.push_str(&serde_json::to_string(card).expect("card serializes"));
        out.push('\n');
    }
    write_text(path, &out)
}

pub fn load_scorecards(path: &Path) -> Result<Vec<ScoreCard>, PipelineError> {
    let file = fs::File::open(path).map_err(|e| PipelineError::ReadFile {
        path: path.display().to_string(),
        cause: e.to_string(),
    })?;
    let mut cards = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| PipelineError::ReadFile {
            path: path.display().to_string(),
            cause: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let card: ScoreCard = serde_json::from_str(&line).map_err(|e| PipelineError::ReadFile {
            path: path.display().to_string(),
            cause: format!("line {}: {e}", idx + 1),
        })?;
        cards.push(card);
    }
    Ok(cards)
}

pub fn load_embeddings(path: &Path) -> Result<Vec<EmbeddingPair>, PipelineError> {
    let file = fs::File::open(path).map_err(|e| PipelineError::ReadFile {
        path: path.display().to_string(),
        cause: e.to_string(),
    })?;
    let mut pairs = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| PipelineError::ReadFile {
            path: path.display().to_string(),
            cause: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: EmbeddingPair =
            serde_json::from_str(&line).map_err(|e| PipelineError::ReadFile {
                path: path.display().to_string(),
                cause: format!("line {}: {e}", idx + 1),
            })?;
        pairs.push(pair);
    }
    Ok(pairs)
}

/// Runs the configured selection strategy over assembled cards.
pub fn run_selection(
    config: &RunConfig,
    cards: &[ScoreCard],
) -> Result<(SelectionResult, u64), PipelineError> {
    match config.strategy {
        Strategy::Random => {
            let ids: Vec<String> = cards.iter().map(|c| c.entry_id.clone()).collect();
            Ok((select_random(&ids, config.percentile, config.seed)?, 0))
        }
        Strategy::EmbedSim => {
            let path = config.embeddings_path.as_ref().ok_or_else(|| {
                PipelineError::Config("embed_sim strategy requires --embeddings".into())
            })?;
            let pairs = load_embeddings(path)?;
            let known: BTreeMap<&str, &EmbeddingPair> =
                pairs.iter().map(|p| (p.entry_id.as_str(), p)).collect();
            let mut present = Vec::new();
            let mut excluded = 0u64;
            for card in cards {
                match known.get(card.entry_id.as_str()) {
                    Some(pair) => present.push((*pair).clone()),
                    None => excluded += 1,
                }
            }
            let mut result = select_embed_sim(&present, config.percentile)?;
            result
                .params
                .insert("embedding_exclusions".to_string(), Value::from(excluded));
            Ok((result, excluded))
        }
        strategy => {
            let key = strategy.rank_key().expect("key-based strategy");
            let mut result =
                crate::selection::select_by_key(cards, key, config.percentile, strategy)?;
            if strategy == Strategy::Scale {
                // The composite was built with the weights stored on the
                // cards; record them with the selection for reproducibility.
                if let Some(card) = cards.first() {
                    result.params.insert(
                        "weights".to_string(),
                        serde_json::to_value(card.weights).expect("weights serialize"),
                    );
                }
            }
            Ok((result, 0))
        }
    }
}

/// Selection from unimodal stage records alone, for the IQA / TQA / (I+T)QA
/// baselines when the multimodal stages have not run.
pub fn select_from_stage_records(
    checkpoint: &Checkpoint,
    key: RankKey,
    p: Rational,
    strategy: Strategy,
) -> Result<SelectionResult, PipelineError> {
    let mut s_i: BTreeMap<String, Rational> = BTreeMap::new();
    let mut s_t: BTreeMap<String, Rational> = BTreeMap::new();
    for record in checkpoint.stage_records(PipeStage::Iqa) {
        if let Some(StageData::Iqa(scores)) = record.data() {
            s_i.insert(
                record.entry_id.clone(),
                crate::scoring::aggregate_modality(&[scores.blur, scores.noise])
                    .expect("stored scores are valid"),
            );
        }
    }
    for record in checkpoint.stage_records(PipeStage::Tqa) {
        if let Some(StageData::Tqa(scores)) = record.data() {
            s_t.insert(
                record.entry_id.clone(),
                crate::scoring::aggregate_modality(&[scores.info, scores.cpxt, scores.cplt])
                    .expect("stored scores are valid"),
            );
        }
    }
    let keyed: Vec<(String, Rational)> = match key {
        RankKey::SI => s_i.into_iter().collect(),
        RankKey::ST => s_t.into_iter().collect(),
        RankKey::MeanIt => s_i
            .iter()
            .filter_map(|(id, si)| {
                s_t.get(id)
                    .map(|st| (id.clone(), (*si + *st) / Rational::from_int(2)))
            })
            .collect(),
        RankKey::Composite => {
            return Err(PipelineError::Config(
                "composite selection needs assembled scorecards; run the full pipeline first".into(),
            ))
        }
    };
    if keyed.is_empty() {
        return Err(PipelineError::Config(
            "no stage records to select from; run the unimodal stages first".into(),
        ));
    }
    let mut items = keyed;
    items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let ties = items.windows(2).filter(|w| w[0].1 == w[1].1).count() as u64;
    let ranking = Ranking { ordered: items, tie_break_events: ties };
    Ok(select_top(&ranking, p, strategy)?)
}

/// Resolves selected ids back to manifest entries, in selection order.
pub fn exported_entries(manifest: &Manifest, selection: &SelectionResult) -> Vec<DataEntry> {
    let by_id: HashMap<&str, &DataEntry> =
        manifest.entries.iter().map(|e| (e.id.as_str(), e)).collect();
    selection
        .selected_ids
        .iter()
        .filter_map(|id| by_id.get(id.as_str()).map(|e| (*e).clone()))
        .collect()
}

/// Writes scorecards.jsonl and the histogram report files.
pub fn write_score_outputs(
    workdir: &Path,
    cards: &[ScoreCard],
    declared_pool: Option<u64>,
) -> Result<(), PipelineError> {
    write_scorecards(&workdir.join("scorecards.jsonl"), cards)?;
    let histogram = score_histogram(cards, declared_pool);
    write_text(&workdir.join("report_histogram.jsonl"), &render_histogram_jsonl(&histogram))?;
    write_text(&workdir.join("report_histogram.txt"), &render_histogram_text(&histogram))?;
    write_text(&workdir.join("report_histogram.svg"), &render_histogram_svg(&histogram))?;
    Ok(())
}

/// Writes selection.jsonl, the exported manifest, and the per-source stats.
pub fn write_selection_outputs(
    workdir: &Path,
    manifest: &Manifest,
    selection: &SelectionResult,
    root_failures: BTreeMap<PipeStage, u64>,
    embedding_exclusions: u64,
) -> Result<(), PipelineError> {
    let mut selection_line = serde_json::to_string(selection).expect("selection serializes");
    selection_line.push('\n');
    write_text(&workdir.join("selection.jsonl"), &selection_line)?;

    corpus::write_manifest(
        workdir.join("selected_manifest.jsonl"),
        &exported_entries(manifest, selection),
    )?;

    let stats = selection_stats(selection, manifest, root_failures, embedding_exclusions)
        .map_err(|e| PipelineError::Report(e.to_string()))?;
    write_text(
        &workdir.join("report_selection_stats.jsonl"),
        &render_selection_stats_jsonl(&stats),
    )?;
    write_text(
        &workdir.join("report_selection_stats.txt"),
        &render_selection_stats_text(&stats),
    )?;
    Ok(())
}

/// Writes every final artifact of a scored run into the workdir.
pub fn write_outputs(
    config: &RunConfig,
    manifest: &Manifest,
    cards: &[ScoreCard],
    selection: &SelectionResult,
    root_failures: BTreeMap<PipeStage, u64>,
    embedding_exclusions: u64,
) -> Result<(), PipelineError> {
    write_score_outputs(&config.workdir, cards, config.declared_pool)?;
    write_selection_outputs(
        &config.workdir,
        manifest,
        selection,
        root_failures,
        embedding_exclusions,
    )
}

/// Reads the single-line selection.jsonl back.
pub fn load_selection(path: &Path) -> Result<SelectionResult, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::ReadFile {
        path: path.display().to_string(),
        cause: e.to_string(),
    })?;
    let line = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| PipelineError::ReadFile {
            path: path.display().to_string(),
            cause: "empty selection file".into(),
        })?;
    serde_json::from_str(line).map_err(|e| PipelineError::ReadFile {
        path: path.display().to_string(),
        cause: e.to_string(),
    })
}

/// Full pipeline over a manifest: stage processing with checkpoint resume,
/// then (when every stage is covered for every entry) scorecard assembly,
/// selection, export, and reports.
pub async fn run(config: &RunConfig, backend: Arc<dyn ChatBackend>) -> Result<RunReport, PipelineError> {
    fs::create_dir_all(&config.workdir).map_err(|source| PipelineError::Workdir {
        path: config.workdir.display().to_string(),
        source,
    })?;

    let outcome = corpus::load_manifest(&config.manifest_path)?;
    let entries = shard_entries(outcome.manifest.entries.clone(), config.shard);
    let manifest = Manifest::from_entries(entries.clone());

    let checkpoint = Checkpoint::load(&config.workdir)?;
    validate_config(config, |stage| {
        checkpoint.stage_records(stage).next().is_some()
    })?;

    let mut report = RunReport {
        total_entries: entries.len(),
        malformed_checkpoint_lines: checkpoint.malformed_lines,
        dry_run: config.dry_run,
        ..RunReport::default()
    };
    for stage in ALL_STAGES {
        if config.stages.contains(&stage) {
            report
                .stage_pending
                .insert(stage, checkpoint.pending_count(stage, &entries));
        }
    }
    if config.dry_run {
        return Ok(report);
    }

    let client = Arc::new(
        JudgeClient::new(backend, config.endpoints.clone())
            .map_err(|e| PipelineError::Config(e.to_string()))?,
    );
    let rater = Arc::new(Rater::new(
        client.clone(),
        PromptLibrary::builtin(),
        config.parse_retry_limit,
    ));

    for stage in ALL_STAGES.into_iter().filter(|s| config.stages.contains(s)) {
        let skipped = entries
            .iter()
            .filter(|e| !config.force && checkpoint.is_done(stage, &e.id))
            .count() as u64;
        report.stage_skipped.insert(stage, skipped);
    }

    let (tx, rx) = tokio::sync::mpsc::channel::<StageRecord>(256);
    let writer = tokio::spawn(stage_writer(config.workdir.clone(), rx));

    let checkpoint = Arc::new(checkpoint);
    let mut tasks = futures::stream::iter(entries.clone().into_iter().map(|entry| {
        let rater = rater.clone();
        let checkpoint = checkpoint.clone();
        let stages = config.stages.clone();
        let tx = tx.clone();
        let force = config.force;
        async move { run_entry(Arc::new(entry), rater, checkpoint, stages, force, tx).await }
    }))
    .buffer_unordered(config.workers);

    while let Some(stats) = tasks.next().await {
        for stage in stats.processed {
            *report.stage_processed.entry(stage).or_insert(0) += 1;
        }
        for stage in stats.failed {
            *report.stage_failed.entry(stage).or_insert(0) += 1;
        }
        for stage in stats.blocked {
            *report.stage_blocked.entry(stage).or_insert(0) += 1;
        }
    }
    drop(tasks);
    drop(tx);
    writer
        .await
        .expect("writer task not cancelled")
        .map_err(|source| PipelineError::Workdir {
            path: config.workdir.display().to_string(),
            source,
        })?;
    report.judge_requests = client.requests_issued();

    // Assemble and select only when every entry has a record for every
    // stage; a partial --stages run leaves that to a later invocation.
    let final_checkpoint = Checkpoint::load(&config.workdir)?;
    let covered = entries
        .iter()
        .all(|e| ALL_STAGES.iter().all(|s| final_checkpoint.is_done(*s, &e.id)));
    if !covered {
        return Ok(report);
    }

    let assembly = assemble_cards(&entries, &final_checkpoint, config.weights);
    report.assembled = true;
    report.cards_written = assembly.cards.len();
    report.excluded_entries = assembly.excluded.len();

    if assembly.cards.is_empty() {
        return Err(PipelineError::Config(
            "no entries survived the scoring stages; nothing to select".into(),
        ));
    }
    let (selection, embedding_exclusions) = run_selection(config, &assembly.cards)?;
    report.selected = selection.selected_ids.len();
    write_outputs(
        config,
        &manifest,
        &assembly.cards,
        &selection,
        assembly.root_failures,
        embedding_exclusions,
    )?;
    Ok(report)
}

/// Picks the backend for a run: a fixture-backed mock when a fixture path is
/// given, the HTTP client otherwise.
pub fn backend_for(mock_fixtures: Option<&Path>) -> Result<Arc<dyn ChatBackend>, PipelineError> {
    match mock_fixtures {
        Some(path) => {
            let mock = MockBackend::from_fixture_file(path).map_err(|e| {
                PipelineError::Config(e.to_string())
            })?;
            Ok(Arc::new(mock))
        }
        None => Ok(Arc::new(HttpBackend::new())),
    }
}

//! Response and demographic stores, kept apart on disk, plus exports and the
//! field-level privacy audit.
//!
//! Directory layout of a response store:
//!
//! ```text
//! <root>/sessions/<session_id>.json
//! <root>/events.jsonl
//! <root>/audit.jsonl
//! ```
//!
//! A demographic store keeps `<root>/records/<external_id>.json`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::participation::{ApprovalBallot, OverallVote, RankBallot};
use crate::persona::{Author, Conversation, GroundednessVerdict};
use crate::session::{ParticipantSession, QuestionnaireAnswers, Stage};

pub const RESPONSE_STORE_ENV: &str = "CIVIC_RESPONSE_STORE";
pub const DEMOGRAPHIC_STORE_ENV: &str = "CIVIC_DEMOGRAPHIC_STORE";

/// Field names that may only ever appear in the demographic store.
pub const DEMOGRAPHIC_FIELDS: [&str; 5] = ["age", "sex", "ethnicity", "country", "employment"];

/// Closed list of demographic record fields.
pub const DEMOGRAPHIC_ALLOWED: [&str; 6] = ["external_id", "age", "sex", "ethnicity", "country", "employment"];

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("forbidden field `{field}` in {store} data")]
    CrossContamination { store: &'static str, field: String },
    #[error("response and demographic stores must not share a location: {0} and {1}")]
    SharedLocation(PathBuf, PathBuf),
    #[error("joined data is analysis-only and is never written to disk")]
    JoinedWriteRefused,
    #[error("row {row} of {file} has no external_id")]
    JoinKeyMissing { file: String, row: usize },
    #[error("environment variable {0} is not set")]
    MissingEnv(&'static str),
    #[error("unsupported format `{0}`")]
    UnsupportedFormat(String),
    #[error("invalid identifier `{0}`")]
    InvalidId(String),
    #[error("{file}: {message}")]
    Parse { file: String, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub session_id: String,
    pub stage: Stage,
    pub payload: Value,
    pub ts: DateTime<Utc>,
}

/// Raised for every flagged fact-persona turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub session_id: String,
    pub persona_id: String,
    pub turn_index: usize,
    pub reply: String,
    pub verdict: GroundednessVerdict,
    pub ts: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    #[serde(flatten)]
    pub session: ParticipantSession,
    /// Accepted submissions in order.
    pub events: Vec<EventRecord>,
    pub conversations: Vec<Conversation>,
    pub recall: Option<String>,
    pub approval: Option<ApprovalBallot>,
    pub rank: Option<RankBallot>,
    pub overall: Option<OverallVote>,
    pub consultation: Option<String>,
    pub questionnaires: QuestionnaireAnswers,
}

impl ResponseRecord {
    pub fn new(session: ParticipantSession) -> Self {
        Self {
            session,
            events: Vec::new(),
            conversations: Vec::new(),
            recall: None,
            approval: None,
            rank: None,
            overall: None,
            consultation: None,
            questionnaires: BTreeMap::new(),
        }
    }

    pub fn conversation(&self, persona_id: &str) -> Option<&Conversation> {
        self.conversations.iter().find(|c| c.persona_id == persona_id)
    }

    pub fn participant_turns(&self, persona_id: &str) -> usize {
        self.conversation(persona_id).map_or(0, Conversation::participant_turns)
    }

    pub fn answer(&self, questionnaire_id: &str, item_id: &str) -> Option<&str> {
        self.questionnaires.get(questionnaire_id)?.get(item_id).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemographicRecord {
    pub external_id: String,
    pub age: Option<u32>,
    pub sex: Option<String>,
    pub ethnicity: Option<String>,
    pub country: Option<String>,
    pub employment: Option<String>,
}

fn forbidden_keys(value: &Value, out: &mut Vec<String>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                if DEMOGRAPHIC_FIELDS.contains(&k.to_lowercase().as_str()) {
                    out.push(k.clone());
                }
                forbidden_keys(v, out);
            }
        }
        Value::Array(items) => items.iter().for_each(|v| forbidden_keys(v, out)),
        _ => {}
    }
}

/// Fails on any demographic field name at any depth.
pub fn check_response_value(value: &Value) -> Result<(), StoreError> {
    let mut found = Vec::new();
    forbidden_keys(value, &mut found);
    match found.into_iter().next() {
        Some(field) => Err(StoreError::CrossContamination { store: "response", field }),
        None => Ok(()),
    }
}

/// Fails on anything outside the demographic allowlist.
pub fn check_demographic_value(value: &Value) -> Result<(), StoreError> {
    let Value::Object(map) = value else {
        return Err(StoreError::CrossContamination { store: "demographic", field: "<non-object>".into() });
    };
    match map.keys().find(|k| !DEMOGRAPHIC_ALLOWED.contains(&k.as_str())) {
        Some(field) => Err(StoreError::CrossContamination { store: "demographic", field: field.clone() }),
        None => Ok(()),
    }
}

fn check_id(id: &str) -> Result<(), StoreError> {
    let ok = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidId(id.to_string()))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn append_line<T: Serialize>(path: &Path, item: &T) -> Result<(), StoreError> {
    let mut line = serde_json::to_vec(item)?;
    line.push(b'\n');
    OpenOptions::new().create(true).append(true).open(path)?.write_all(&line)?;
    Ok(())
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, StoreError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| StoreError::Parse {
            file: format!("{}:{}", path.display(), i + 1),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn read_dir_json<T: for<'de> Deserialize<'de>>(dir: &Path) -> Result<Vec<T>, StoreError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            serde_json::from_slice(&fs::read(p)?)
                .map_err(|e| StoreError::Parse { file: p.display().to_string(), message: e.to_string() })
        })
        .collect()
}

#[derive(Default)]
struct MemoryResponses {
    responses: BTreeMap<String, ResponseRecord>,
    events: Vec<EventRecord>,
    audit: Vec<AuditRecord>,
}

enum ResponseBackend {
    Memory(MemoryResponses),
    Dir(PathBuf),
}

/// Session content. Writes are serialized by one lock.
pub struct ResponseStore {
    backend: Mutex<ResponseBackend>,
    root: Option<PathBuf>,
}

impl ResponseStore {
    pub fn in_memory() -> Self {
        Self { backend: Mutex::new(ResponseBackend::Memory(MemoryResponses::default())), root: None }
    }

    pub fn open(root: impl AsRef<Path>) -> Result<Self, StoreError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(root.join("sessions"))?;
        Ok(Self { backend: Mutex::new(ResponseBackend::Dir(root.clone())), root: Some(root) })
    }

    pub fn from_env() -> Result<Self, StoreError> {
        Self::open(std::env::var(RESPONSE_STORE_ENV).map_err(|_| StoreError::MissingEnv(RESPONSE_STORE_ENV))?)
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    /// Insert or replace the record of one session.
    pub fn store_response(&self, record: &ResponseRecord) -> Result<(), StoreError> {
        check_id(&record.session.session_id)?;
        let value = serde_json::to_value(record)?;
        check_response_value(&value)?;
        match &mut *self.backend.lock() {
            ResponseBackend::Memory(m) => {
                m.responses.insert(record.session.session_id.clone(), record.clone());
            }
            ResponseBackend::Dir(root) => {
                let path = root.join("sessions").join(format!("{}.json", record.session.session_id));
                write_atomic(&path, &serde_json::to_vec(&value)?)?;
            }
        }
        Ok(())
    }

    pub fn load_response(&self, session_id: &str) -> Result<Option<ResponseRecord>, StoreError> {
        check_id(session_id)?;
        match &*self.backend.lock() {
            ResponseBackend::Memory(m) => Ok(m.responses.get(session_id).cloned()),
            ResponseBackend::Dir(root) => {
                let path = root.join("sessions").join(format!("{session_id}.json"));
                if !path.exists() {
                    return Ok(None);
                }
                Ok(Some(serde_json::from_slice(&fs::read(path)?)?))
            }
        }
    }

    /// All records ordered by session id.
    pub fn responses(&self) -> Result<Vec<ResponseRecord>, StoreError> {
        let mut records = match &*self.backend.lock() {
            ResponseBackend::Memory(m) => m.responses.values().cloned().collect(),
            ResponseBackend::Dir(root) => read_dir_json::<ResponseRecord>(&root.join("sessions"))?,
        };
        records.sort_by(|a, b| a.session.session_id.cmp(&b.session.session_id));
        Ok(records)
    }

    /// Id-scoped deletion of one session and its events.
    pub fn delete_response(&self, session_id: &str) -> Result<bool, StoreError> {
        check_id(session_id)?;
        match &mut *self.backend.lock() {
            ResponseBackend::Memory(m) => {
                m.events.retain(|e| e.session_id != session_id);
                m.audit.retain(|a| a.session_id != session_id);
                Ok(m.responses.remove(session_id).is_some())
            }
            ResponseBackend::Dir(root) => {
                for name in ["events.jsonl", "audit.jsonl"] {
                    let path = root.join(name);
                    if path.exists() {
                        let kept: Vec<Value> = read_lines::<Value>(&path)?
                            .into_iter()
                            .filter(|v| v["session_id"] != session_id)
                            .collect();
                        let mut out = Vec::new();
                        for v in kept {
                            serde_json::to_writer(&mut out, &v)?;
                            out.push(b'\n');
                        }
                        write_atomic(&path, &out)?;
                    }
                }
                let path = root.join("sessions").join(format!("{session_id}.json"));
                let existed = path.exists();
                if existed {
                    fs::remove_file(path)?;
                }
                Ok(existed)
            }
        }
    }

    pub fn append_event(&self, event: &EventRecord) -> Result<(), StoreError> {
        check_response_value(&serde_json::to_value(event)?)?;
        match &mut *self.backend.lock() {
            ResponseBackend::Memory(m) => m.events.push(event.clone()),
            ResponseBackend::Dir(root) => append_line(&root.join("events.jsonl"), event)?,
        }
        Ok(())
    }

    pub fn events(&self) -> Result<Vec<EventRecord>, StoreError> {
        match &*self.backend.lock() {
            ResponseBackend::Memory(m) => Ok(m.events.clone()),
            ResponseBackend::Dir(root) => read_lines(&root.join("events.jsonl")),
        }
    }

    pub fn append_audit(&self, record: &AuditRecord) -> Result<(), StoreError> {
        match &mut *self.backend.lock() {
            ResponseBackend::Memory(m) => m.audit.push(record.clone()),
            ResponseBackend::Dir(root) => append_line(&root.join("audit.jsonl"), record)?,
        }
        Ok(())
    }

    pub fn audit_records(&self) -> Result<Vec<AuditRecord>, StoreError> {
        match &*self.backend.lock() {
            ResponseBackend::Memory(m) => Ok(m.audit.clone()),
            ResponseBackend::Dir(root) => read_lines(&root.join("audit.jsonl")),
        }
    }
}

enum DemographicBackend {
    Memory(BTreeMap<String, DemographicRecord>),
    Dir(PathBuf),
}

/// Participant characteristics keyed by external id.
pub struct DemographicStore {
    backend: Mutex<DemographicBackend>,
    root: Option<PathBuf>,
}

impl DemographicStore {
    pub fn in_memory() -> Self {
        Self { backend: Mutex::new(DemographicBackend::Memory(BTreeMap::new())), root: None }
    }

    pub fn open(root: impl AsRef<Path>) -> Result<Self, StoreError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(root.join("records"))?;
        Ok(Self { backend: Mutex::new(DemographicBackend::Dir(root.clone())), root: Some(root) })
    }

    pub fn from_env() -> Result<Self, StoreError> {
        Self::open(std::env::var(DEMOGRAPHIC_STORE_ENV).map_err(|_| StoreError::MissingEnv(DEMOGRAPHIC_STORE_ENV))?)
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn store_demographics(&self, record: &DemographicRecord) -> Result<(), StoreError> {
        check_id(&record.external_id)?;
        let value = serde_json::to_value(record)?;
        check_demographic_value(&value)?;
        match &mut *self.backend.lock() {
            DemographicBackend::Memory(m) => {
                m.insert(record.external_id.clone(), record.clone());
            }
            DemographicBackend::Dir(root) => {
                let path = root.join("records").join(format!("{}.json", record.external_id));
                write_atomic(&path, &serde_json::to_vec(&value)?)?;
            }
        }
        Ok(())
    }

    /// Stores an untyped record after the allowlist check.
    pub fn store_demographics_value(&self, value: &Value) -> Result<(), StoreError> {
        check_demographic_value(value)?;
        let record: DemographicRecord = serde_json::from_value(value.clone())?;
        self.store_demographics(&record)
    }

    /// All records ordered by external id.
    pub fn records(&self) -> Result<Vec<DemographicRecord>, StoreError> {
        let mut records: Vec<DemographicRecord> = match &*self.backend.lock() {
            DemographicBackend::Memory(m) => m.values().cloned().collect(),
            DemographicBackend::Dir(root) => read_dir_json(&root.join("records"))?,
        };
        records.sort_by(|a, b| a.external_id.cmp(&b.external_id));
        Ok(records)
    }
}

/// Opens both stores, refusing equal or nested locations.
pub fn open_split(
    responses: impl AsRef<Path>,
    demographics: impl AsRef<Path>,
) -> Result<(ResponseStore, DemographicStore), StoreError> {
    let (r, d) = (responses.as_ref(), demographics.as_ref());
    fs::create_dir_all(r)?;
    fs::create_dir_all(d)?;
    let (rc, dc) = (r.canonicalize()?, d.canonicalize()?);
    if rc.starts_with(&dc) || dc.starts_with(&rc) {
        return Err(StoreError::SharedLocation(rc, dc));
    }
    Ok((ResponseStore::open(r)?, DemographicStore::open(d)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    Csv,
    Jsonl,
}

impl FromStr for ExportFormat {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ExportFormat::Csv),
            "jsonl" | "ndjson" => Ok(ExportFormat::Jsonl),
            other => Err(StoreError::UnsupportedFormat(other.to_string())),
        }
    }
}

impl ExportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ExportFormat::Csv => "csv",
            ExportFormat::Jsonl => "jsonl",
        }
    }
}

/// Which store a file belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoreKind {
    Response,
    Demographic,
}

fn grade_label(g: crate::participation::ApprovalGrade) -> &'static str {
    use crate::participation::ApprovalGrade::*;
    match g {
        Approved => "approved",
        Neutral => "neutral",
        Disapproved => "disapproved",
    }
}

/// Flat CSV header of the response export.
pub fn response_csv_header(categories: &[String], records: &[ResponseRecord]) -> Vec<String> {
    let mut header: Vec<String> =
        ["session_id", "external_id", "arm", "stage", "completed", "recall", "consultation"].map(String::from).to_vec();
    header.extend(categories.iter().map(|c| format!("approval_{c}")));
    header.extend(categories.iter().map(|c| format!("rank_{c}")));
    header.push("overall".into());
    let items: BTreeSet<String> = records
        .iter()
        .flat_map(|r| r.questionnaires.iter().flat_map(|(q, items)| items.keys().map(move |i| format!("{q}.{i}"))))
        .collect();
    header.extend(items);
    let personas: BTreeSet<&str> =
        records.iter().flat_map(|r| r.conversations.iter().map(|c| c.persona_id.as_str())).collect();
    header.extend(personas.into_iter().map(|p| format!("turns_{p}")));
    header
}

fn response_csv_row(header: &[String], r: &ResponseRecord) -> Vec<String> {
    header
        .iter()
        .map(|col| match col.as_str() {
            "session_id" => r.session.session_id.clone(),
            "external_id" => r.session.external_id.clone(),
            "arm" => r.session.arm.to_string(),
            "stage" => serde_json::to_value(r.session.stage).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
            "completed" => r.session.completed.to_string(),
            "recall" => r.recall.clone().unwrap_or_default(),
            "consultation" => r.consultation.clone().unwrap_or_default(),
            "overall" => match r.overall {
                Some(OverallVote::Yes) => "yes".into(),
                Some(OverallVote::No) => "no".into(),
                None => String::new(),
            },
            c if c.starts_with("approval_") => r
                .approval
                .as_ref()
                .and_then(|a| a.0.get(&c["approval_".len()..]))
                .map(|g| grade_label(*g).to_string())
                .unwrap_or_default(),
            c if c.starts_with("rank_") => r
                .rank
                .as_ref()
                .and_then(|b| b.rank_of(&c["rank_".len()..]))
                .map(|k| k.to_string())
                .unwrap_or_default(),
            c if c.starts_with("turns_") => {
                let persona = &c["turns_".len()..];
                r.conversation(persona).map(|cv| cv.participant_turns().to_string()).unwrap_or_default()
            }
            c => c
                .split_once('.')
                .and_then(|(q, i)| r.answer(q, i))
                .map(String::from)
                .unwrap_or_default(),
        })
        .collect()
}

/// Writes response records ordered by session id.
pub fn export_responses<W: Write>(
    records: &[ResponseRecord],
    categories: &[String],
    format: ExportFormat,
    out: W,
) -> Result<(), StoreError> {
    let mut sorted: Vec<&ResponseRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.session.session_id.cmp(&b.session.session_id));
    match format {
        ExportFormat::Jsonl => {
            let mut out = io::BufWriter::new(out);
            for r in sorted {
                serde_json::to_writer(&mut out, r)?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
        }
        ExportFormat::Csv => {
            let header = response_csv_header(categories, records);
            let mut w = csv::Writer::from_writer(out);
            w.write_record(&header)?;
            for r in sorted {
                w.write_record(response_csv_row(&header, r))?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

/// Writes demographic records ordered by external id.
pub fn export_demographics<W: Write>(records: &[DemographicRecord], format: ExportFormat, out: W) -> Result<(), StoreError> {
    let mut sorted: Vec<&DemographicRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.external_id.cmp(&b.external_id));
    match format {
        ExportFormat::Jsonl => {
            let mut out = io::BufWriter::new(out);
            for r in sorted {
                serde_json::to_writer(&mut out, r)?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
        }
        ExportFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(DEMOGRAPHIC_ALLOWED)?;
            for r in sorted {
                w.write_record([
                    r.external_id.clone(),
                    r.age.map(|a| a.to_string()).unwrap_or_default(),
                    r.sex.clone().unwrap_or_default(),
                    r.ethnicity.clone().unwrap_or_default(),
                    r.country.clone().unwrap_or_default(),
                    r.employment.clone().unwrap_or_default(),
                ])?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct TurnLine<'a> {
    session_id: &'a str,
    persona_id: &'a str,
    turn_index: usize,
    #[serde(flatten)]
    turn: &'a crate::persona::ChatTurn,
}

/// One chat turn per line, ordered by session, persona and turn.
pub fn export_conversations<W: Write>(records: &[ResponseRecord], out: W) -> Result<(), StoreError> {
    let mut sorted: Vec<&ResponseRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.session.session_id.cmp(&b.session.session_id));
    let mut out = io::BufWriter::new(out);
    for r in sorted {
        let mut convs: Vec<&Conversation> = r.conversations.iter().collect();
        convs.sort_by(|a, b| a.persona_id.cmp(&b.persona_id));
        for c in convs {
            for (i, turn) in c.turns.iter().enumerate() {
                serde_json::to_writer(
                    &mut out,
                    &TurnLine { session_id: &r.session.session_id, persona_id: &c.persona_id, turn_index: i, turn },
                )?;
                out.write_all(b"\n")?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub file: String,
    /// 1-based data row; 0 is a CSV header without data rows.
    pub row: usize,
    pub field: String,
}

fn value_violations(value: &Value, kind: StoreKind) -> Vec<String> {
    match kind {
        StoreKind::Response => {
            let mut found = Vec::new();
            forbidden_keys(value, &mut found);
            found
        }
        StoreKind::Demographic => match value {
            Value::Object(map) => {
                map.keys().filter(|k| !DEMOGRAPHIC_ALLOWED.contains(&k.as_str())).cloned().collect()
            }
            _ => vec!["<non-object>".into()],
        },
    }
}

fn column_forbidden(column: &str, kind: StoreKind) -> bool {
    match kind {
        StoreKind::Response => {
            let lower = column.to_lowercase();
            DEMOGRAPHIC_FIELDS.iter().any(|f| lower == *f || lower.ends_with(&format!(".{f}")))
        }
        StoreKind::Demographic => !DEMOGRAPHIC_ALLOWED.contains(&column),
    }
}

/// Scans one file (`.json`, `.jsonl` or `.csv`) for fields that do not
/// belong in the given store.
pub fn privacy_audit(path: &Path, kind: StoreKind) -> Result<Vec<Violation>, StoreError> {
    let file = path.display().to_string();
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let mut violations = Vec::new();
    match ext.as_str() {
        "json" => {
            let value: Value = serde_json::from_slice(&fs::read(path)?)
                .map_err(|e| StoreError::Parse { file: file.clone(), message: e.to_string() })?;
            for field in value_violations(&value, kind) {
                violations.push(Violation { file: file.clone(), row: 1, field });
            }
        }
        "jsonl" | "ndjson" => {
            for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let value: Value = serde_json::from_str(&line)
                    .map_err(|e| StoreError::Parse { file: format!("{file}:{}", i + 1), message: e.to_string() })?;
                for field in value_violations(&value, kind) {
                    violations.push(Violation { file: file.clone(), row: i + 1, field });
                }
            }
        }
        "csv" => {
            let mut reader = csv::Reader::from_path(path)?;
            let header: Vec<String> = reader.headers()?.iter().map(String::from).collect();
            let bad: Vec<usize> = (0..header.len()).filter(|&i| column_forbidden(&header[i], kind)).collect();
            let mut first_row: HashMap<usize, usize> = HashMap::new();
            let mut rows = 0;
            for (r, rec) in reader.records().enumerate() {
                let rec = rec?;
                rows = r + 1;
                for &c in &bad {
                    if !first_row.contains_key(&c) && rec.get(c).is_some_and(|v| !v.is_empty()) {
                        first_row.insert(c, r + 1);
                    }
                }
            }
            for c in bad {
                let row = first_row.get(&c).copied().unwrap_or(if rows > 0 { 1 } else { 0 });
                violations.push(Violation { file: file.clone(), row, field: header[c].clone() });
            }
        }
        other => return Err(StoreError::UnsupportedFormat(other.to_string())),
    }
    Ok(violations)
}

/// Audits every `.json`, `.jsonl` and `.csv` file below `root`.
pub fn audit_store_dir(root: &Path, kind: StoreKind) -> Result<Vec<Violation>, StoreError> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().and_then(|e| e.to_str()).is_some_and(|e| matches!(e, "json" | "jsonl" | "csv")) {
                files.push(path);
            }
        }
    }
    files.sort();
    let mut out = Vec::new();
    for f in files {
        out.extend(privacy_audit(&f, kind)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct JoinedRow {
    pub record: ResponseRecord,
    pub demographics: Option<DemographicRecord>,
}

/// In-memory join of a response export and a demographic export.
/// Deliberately not serializable.
#[derive(Debug, Clone, PartialEq)]
pub struct JoinedTable {
    pub rows: Vec<JoinedRow>,
    pub warnings: Vec<String>,
}

fn read_demographic_export(path: &Path) -> Result<Vec<DemographicRecord>, StoreError> {
    let file = path.display().to_string();
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let values: Vec<Value> = match ext.as_str() {
        "csv" => {
            let mut reader = csv::Reader::from_path(path)?;
            let header: Vec<String> = reader.headers()?.iter().map(String::from).collect();
            let mut rows = Vec::new();
            for rec in reader.records() {
                let rec = rec?;
                let mut obj = serde_json::Map::new();
                for (h, v) in header.iter().zip(rec.iter()) {
                    let v = match (h.as_str(), v) {
                        (_, "") => Value::Null,
                        ("age", a) => a
                            .parse::<u32>()
                            .map(Value::from)
                            .map_err(|e| StoreError::Parse { file: file.clone(), message: e.to_string() })?,
                        (_, s) => Value::from(s),
                    };
                    obj.insert(h.clone(), v);
                }
                rows.push(Value::Object(obj));
            }
            rows
        }
        "jsonl" | "ndjson" => read_lines(path)?,
        other => return Err(StoreError::UnsupportedFormat(other.to_string())),
    };
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            if !v.get("external_id").is_some_and(|x| x.as_str().is_some_and(|s| !s.is_empty())) {
                return Err(StoreError::JoinKeyMissing { file: file.clone(), row: i + 1 });
            }
            serde_json::from_value(v).map_err(|e| StoreError::Parse { file: file.clone(), message: e.to_string() })
        })
        .collect()
}

/// Joins on `external_id` in memory. Passing any output path is refused.
pub fn joined_view(
    response_export: &Path,
    demographic_export: &Path,
    output: Option<&Path>,
) -> Result<JoinedTable, StoreError> {
    if output.is_some() {
        return Err(StoreError::JoinedWriteRefused);
    }
    let file = response_export.display().to_string();
    let raw: Vec<Value> = read_lines(response_export)?;
    let mut records = Vec::with_capacity(raw.len());
    for (i, v) in raw.into_iter().enumerate() {
        if !v.get("external_id").is_some_and(|x| x.as_str().is_some_and(|s| !s.is_empty())) {
            return Err(StoreError::JoinKeyMissing { file: file.clone(), row: i + 1 });
        }
        let r: ResponseRecord =
            serde_json::from_value(v).map_err(|e| StoreError::Parse { file: file.clone(), message: e.to_string() })?;
        records.push(r);
    }
    let demographics: HashMap<String, DemographicRecord> = read_demographic_export(demographic_export)?
        .into_iter()
        .map(|d| (d.external_id.clone(), d))
        .collect();
    let mut warnings = Vec::new();
    let rows = records
        .into_iter()
        .map(|record| {
            let demographics = demographics.get(&record.session.external_id).cloned();
            if demographics.is_none() {
                let msg = format!("no demographics for session {}", record.session.session_id);
                log::warn!("{msg}");
                warnings.push(msg);
            }
            JoinedRow { record, demographics }
        })
        .collect();
    Ok(JoinedTable { rows, warnings })
}

/// Number of participant turns per conversation, by persona id.
pub fn participant_turn_counts(records: &[ResponseRecord]) -> BTreeMap<String, Vec<usize>> {
    let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for r in records {
        for c in &r.conversations {
            out.entry(c.persona_id.clone())
                .or_default()
                .push(c.turns.iter().filter(|t| t.author == Author::Participant).count());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::Arm;
    use chrono::TimeZone;

    fn record(id: &str, ext: &str) -> ResponseRecord {
        let ts = Utc.timestamp_opt(1_700_000_000, 0).unwrap();
        ResponseRecord::new(ParticipantSession {
            session_id: id.into(),
            external_id: ext.into(),
            arm: Arm::Treatment,
            stage: Stage::Consent,
            block_cursor: 0,
            created_at: ts,
            updated_at: ts,
            completed: false,
        })
    }

    fn demo(ext: &str) -> DemographicRecord {
        DemographicRecord {
            external_id: ext.into(),
            age: Some(34),
            sex: Some("female".into()),
            ethnicity: None,
            country: Some("Switzerland".into()),
            employment: Some("full-time".into()),
        }
    }

    #[test]
    fn smuggled_age_is_cross_contamination() {
        let store = ResponseStore::in_memory();
        store.store_response(&record("s-1", "PX1")).unwrap();
        let mut bad = record("s-2", "PX2");
        bad.questionnaires.insert("traffic_habits".into(), [("age".to_string(), "34".to_string())].into());
        let err = store.store_response(&bad).unwrap_err();
        assert!(matches!(err, StoreError::CrossContamination { ref field, .. } if field == "age"));
        assert_eq!(store.responses().unwrap().len(), 1);
    }

    #[test]
    fn demographics_stored_separately() {
        let dir = tempfile::tempdir().unwrap();
        let (responses, demographics) = open_split(dir.path().join("r"), dir.path().join("d")).unwrap();
        demographics.store_demographics(&demo("PX1")).unwrap();
        responses.store_response(&record("s-1", "PX1")).unwrap();
        assert!(dir.path().join("d/records/PX1.json").exists());
        assert!(dir.path().join("r/sessions/s-1.json").exists());
        assert!(audit_store_dir(&dir.path().join("r"), StoreKind::Response).unwrap().is_empty());
        assert!(audit_store_dir(&dir.path().join("d"), StoreKind::Demographic).unwrap().is_empty());
        let err = demographics.store_demographics_value(&serde_json::json!({"external_id": "PX2", "recall": "trees"}));
        assert!(matches!(err, Err(StoreError::CrossContamination { .. })));
    }

    #[test]
    fn shared_location_refused() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(open_split(dir.path(), dir.path()), Err(StoreError::SharedLocation(..))));
        assert!(matches!(open_split(dir.path(), dir.path().join("inner")), Err(StoreError::SharedLocation(..))));
    }

    #[test]
    fn exports_are_ordered_and_stable() {
        let cats: Vec<String> = ["a", "b"].map(String::from).to_vec();
        let records = vec![record("s-3", "P3"), record("s-1", "P1"), record("s-2", "P2")];
        let mut jsonl = Vec::new();
        export_responses(&records, &cats, ExportFormat::Jsonl, &mut jsonl).unwrap();
        let text = String::from_utf8(jsonl.clone()).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().next().unwrap().contains("\"s-1\""));
        let mut again = Vec::new();
        export_responses(&records, &cats, ExportFormat::Jsonl, &mut again).unwrap();
        assert_eq!(jsonl, again);

        let mut csv_out = Vec::new();
        export_responses(&[], &cats, ExportFormat::Csv, &mut csv_out).unwrap();
        let csv_text = String::from_utf8(csv_out).unwrap();
        assert_eq!(csv_text.lines().count(), 1);
        assert!(csv_text.contains("approval_a,approval_b,rank_a,rank_b,overall"));
    }

    #[test]
    fn audit_names_row_and_field() {
        let dir = tempfile::tempdir().unwrap();
        let resp = dir.path().join("responses.csv");
        fs::write(&resp, "session_id,arm,country\ns-1,control,\ns-2,treatment,Spain\n").unwrap();
        assert_eq!(
            privacy_audit(&resp, StoreKind::Response).unwrap(),
            vec![Violation { file: resp.display().to_string(), row: 2, field: "country".into() }]
        );
        let demo_file = dir.path().join("demographics.jsonl");
        fs::write(&demo_file, "{\"external_id\":\"P1\",\"age\":30}\n{\"external_id\":\"P2\",\"recall\":\"trees\"}\n").unwrap();
        let v = privacy_audit(&demo_file, StoreKind::Demographic).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!((v[0].row, v[0].field.as_str()), (2, "recall"));
        let clean = dir.path().join("clean.jsonl");
        let mut out = Vec::new();
        export_responses(&[record("s-1", "P1")], &[], ExportFormat::Jsonl, &mut out).unwrap();
        fs::write(&clean, out).unwrap();
        assert!(privacy_audit(&clean, StoreKind::Response).unwrap().is_empty());
    }

    #[test]
    fn joined_view_contract() {
        let dir = tempfile::tempdir().unwrap();
        let resp = dir.path().join("responses.jsonl");
        let demo_path = dir.path().join("demographics.csv");
        let mut out = Vec::new();
        export_responses(&[record("s-1", "P1"), record("s-2", "P2")], &[], ExportFormat::Jsonl, &mut out).unwrap();
        fs::write(&resp, out).unwrap();
        let mut out = Vec::new();
        export_demographics(&[demo("P1")], ExportFormat::Csv, &mut out).unwrap();
        fs::write(&demo_path, out).unwrap();

        let table = joined_view(&resp, &demo_path, None).unwrap();
        assert_eq!(table.rows.len(), 2);
        assert_eq!(table.rows[0].demographics.as_ref().unwrap().age, Some(34));
        assert!(table.rows[1].demographics.is_none());
        assert_eq!(table.warnings.len(), 1);
        assert!(matches!(
            joined_view(&resp, &demo_path, Some(&dir.path().join("joined.csv"))),
            Err(StoreError::JoinedWriteRefused)
        ));
        assert!(!dir.path().join("joined.csv").exists());

        let keyless = dir.path().join("keyless.jsonl");
        fs::write(&keyless, "{\"age\":40}\n").unwrap();
        assert!(matches!(joined_view(&resp, &keyless, None), Err(StoreError::JoinKeyMissing { row: 1, .. })));
    }

    #[test]
    fn dir_store_round_trip_and_delete() {
        let dir = tempfile::tempdir().unwrap();
        let store = ResponseStore::open(dir.path()).unwrap();
        let r = record("s-1", "P1");
        store.store_response(&r).unwrap();
        store
            .append_event(&EventRecord { session_id: "s-1".into(), stage: Stage::Consent, payload: Value::Null, ts: r.session.created_at })
            .unwrap();
        assert_eq!(store.load_response("s-1").unwrap(), Some(r));
        assert_eq!(store.events().unwrap().len(), 1);
        assert!(store.delete_response("s-1").unwrap());
        assert!(store.events().unwrap().is_empty());
        assert!(store.load_response("s-1").unwrap().is_none());
        assert!(matches!(store.load_response("../etc"), Err(StoreError::InvalidId(_))));
    }
}

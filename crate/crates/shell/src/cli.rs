use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::Serialize;
use townhall_core::analytics::report::ReportError;
use townhall_core::persona::{ChatProvider, StubProvider};
use townhall_core::session::{EngineConfig, SystemClock};
use townhall_core::store::{
    export_demographics, export_responses, joined_view, open_split, ExportFormat, StoreError, DEMOGRAPHIC_STORE_ENV,
    RESPONSE_STORE_ENV,
};
use townhall_core::store::AuditRecord;
use townhall_core::study::{lausanne_fixture, load_study_file, StudyError};
use townhall_core::{
    build_report, Arm, ArmAssigner, DemographicRecord, DemographicStore, PersonaGateway, ReportOptions, ResponseRecord,
    ResponseStore, SessionEngine, StudyDefinition,
};

use crate::api::{self, AppState, ADMIN_TOKEN_ENV};
use crate::provider::{HttpProvider, MissingProviderEnv};
use crate::sim::{simulate, simulation_engine, BotPolicy, PolicyError};

#[derive(Debug, Parser)]
#[command(name = "townhall", version, about = "Run, simulate and analyze townhall studies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Serve the participant and admin HTTP API.
    Serve {
        #[arg(long)]
        study: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        /// Answer chats offline instead of calling the configured provider.
        #[arg(long)]
        stub_provider: bool,
        #[arg(long, env = RESPONSE_STORE_ENV)]
        responses: Option<PathBuf>,
        #[arg(long, env = DEMOGRAPHIC_STORE_ENV)]
        demographics: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Drive scripted bots through the study with the stub provider.
    Simulate {
        #[arg(long)]
        bots: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Study file; the bundled street-redesign study if omitted.
        #[arg(long)]
        study: Option<PathBuf>,
        #[arg(long, env = RESPONSE_STORE_ENV, default_value = "data/responses")]
        responses: PathBuf,
        #[arg(long, env = DEMOGRAPHIC_STORE_ENV, default_value = "data/demographics")]
        demographics: PathBuf,
        /// Also write exports here.
        #[arg(long)]
        export: Option<PathBuf>,
    },
    /// Build the report from a response store directory or JSONL export.
    Analyze {
        #[arg(long)]
        responses: PathBuf,
        #[arg(long)]
        demographics: Option<PathBuf>,
        /// Audit log (JSONL); read from the store when `--responses` is a directory.
        #[arg(long)]
        audit: Option<PathBuf>,
        #[arg(long)]
        study: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = townhall_core::analytics::stats::DEFAULT_RESAMPLES)]
        resamples: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Study(#[from] StudyError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Provider(#[from] MissingProviderEnv),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingFile(_) | CliError::Io(_) | CliError::Study(StudyError::Io(_)) => 2,
            CliError::Store(StoreError::Io(_)) => 2,
            _ => 1,
        }
    }
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingFile(path.to_path_buf()))
    }
}

fn study_from(path: Option<&Path>) -> Result<StudyDefinition, CliError> {
    match path {
        Some(p) => {
            require(p)?;
            Ok(load_study_file(p)?)
        }
        None => Ok(lausanne_fixture()),
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Serve { study, port, bind, stub_provider, responses, demographics, seed } => {
            let study = Arc::new(study_from(Some(&study))?);
            let (responses, demographics) = match (responses, demographics) {
                (Some(r), Some(d)) => {
                    let (r, d) = open_split(r, d)?;
                    (r, Some(Arc::new(d)))
                }
                (Some(r), None) => (ResponseStore::open(r)?, None),
                (None, _) => {
                    log::warn!("no response store configured; responses are kept in memory only");
                    (ResponseStore::in_memory(), None)
                }
            };
            let provider: Box<dyn ChatProvider> =
                if stub_provider { Box::new(StubProvider) } else { Box::new(HttpProvider::from_env()?) };
            let gateway = PersonaGateway::new(&study, provider);
            let assigner = match seed {
                Some(s) => ArmAssigner::simple(s),
                None => ArmAssigner::simple(rand::random()),
            };
            let engine = SessionEngine::new(
                study,
                gateway,
                Arc::new(responses),
                assigner,
                EngineConfig::default(),
                Arc::new(SystemClock),
            );
            let state = AppState {
                engine: Arc::new(engine),
                demographics,
                admin_token: std::env::var(ADMIN_TOKEN_ENV).ok().filter(|t| !t.is_empty()),
                report_options: ReportOptions::default(),
            };
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::bind((bind.as_str(), port)).await?;
                log::info!("listening on {}", listener.local_addr()?);
                api::serve(listener, state).await
            })?;
            Ok(())
        }
        Command::Simulate { bots, seed, study, responses, demographics, export } => {
            let study = Arc::new(study_from(study.as_deref())?);
            let (resp_store, demo_store) = open_split(&responses, &demographics)?;
            let engine = simulation_engine(study.clone(), Arc::new(resp_store), seed);
            let summary = simulate(&engine, Some(&demo_store), bots, &BotPolicy::calibrated(seed))?;
            println!("{} sessions completed, {} bots failed", summary.completed.len(), summary.failed.len());
            if let Some(dir) = export {
                write_exports(&dir, &study, engine.store(), &demo_store)?;
                println!("exports written to {}", dir.display());
            }
            Ok(())
        }
        Command::Analyze { responses, demographics, audit, study, out, resamples, seed } => {
            let study = study_from(study.as_deref())?;
            let options = ReportOptions { resamples, seed, ..ReportOptions::default() };
            analyze(&study, &responses, demographics.as_deref(), audit.as_deref(), &out, &options)
        }
    }
}

/// Writes `responses.jsonl`, `responses.csv`, `audit.jsonl` and
/// `demographics.jsonl` into `dir`.
pub fn write_exports(
    dir: &Path,
    study: &StudyDefinition,
    responses: &ResponseStore,
    demographics: &DemographicStore,
) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    let records = responses.responses()?;
    export_responses(&records, &study.categories, ExportFormat::Jsonl, File::create(dir.join("responses.jsonl"))?)?;
    export_responses(&records, &study.categories, ExportFormat::Csv, File::create(dir.join("responses.csv"))?)?;
    export_demographics(&demographics.records()?, ExportFormat::Jsonl, File::create(dir.join("demographics.jsonl"))?)?;
    let mut audit = std::io::BufWriter::new(File::create(dir.join("audit.jsonl"))?);
    for a in responses.audit_records()? {
        serde_json::to_writer(&mut audit, &a).map_err(StoreError::from)?;
        audit.write_all(b"\n")?;
    }
    audit.flush()?;
    Ok(())
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    require(path)?;
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

/// Aggregate description of the sample. Built from an in-memory join; the
/// joined rows themselves are never written.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleSummary {
    pub with_demographics: usize,
    pub without_demographics: usize,
    pub mean_age: BTreeMap<Arm, f64>,
}

fn summarize(rows: &[(ResponseRecord, Option<DemographicRecord>)]) -> SampleSummary {
    let mut ages: BTreeMap<Arm, Vec<f64>> = BTreeMap::new();
    let mut with = 0;
    for (r, d) in rows.iter().filter(|(r, _)| r.session.completed) {
        if let Some(d) = d {
            with += 1;
            if let Some(age) = d.age {
                ages.entry(r.session.arm).or_default().push(age as f64);
            }
        }
    }
    let completed = rows.iter().filter(|(r, _)| r.session.completed).count();
    SampleSummary {
        with_demographics: with,
        without_demographics: completed - with,
        mean_age: ages.into_iter().map(|(arm, xs)| (arm, xs.iter().sum::<f64>() / xs.len() as f64)).collect(),
    }
}

pub fn analyze(
    study: &StudyDefinition,
    responses: &Path,
    demographics: Option<&Path>,
    audit: Option<&Path>,
    out: &Path,
    options: &ReportOptions,
) -> Result<(), CliError> {
    require(responses)?;
    let (records, audit_records): (Vec<ResponseRecord>, Vec<AuditRecord>) = if responses.is_dir() {
        let store = ResponseStore::open(responses)?;
        let audit_records = match audit {
            Some(a) => read_jsonl(a)?,
            None => store.audit_records()?,
        };
        (store.responses()?, audit_records)
    } else {
        let audit_records = match audit {
            Some(a) => read_jsonl(a)?,
            None => Vec::new(),
        };
        (read_jsonl(responses)?, audit_records)
    };
    let report = build_report(study, &records, &audit_records, options)?;
    let mut markdown = report.to_markdown();

    if let Some(demo) = demographics {
        require(demo)?;
        let rows: Vec<(ResponseRecord, Option<DemographicRecord>)> = if responses.is_dir() || demo.is_dir() {
            if !(responses.is_dir() && demo.is_dir()) {
                return Err(CliError::Usage("pass two store directories or two export files".into()));
            }
            let demo: BTreeMap<String, DemographicRecord> =
                DemographicStore::open(demo)?.records()?.into_iter().map(|d| (d.external_id.clone(), d)).collect();
            records.iter().map(|r| (r.clone(), demo.get(&r.session.external_id).cloned())).collect()
        } else {
            joined_view(responses, demo, None)?.rows.into_iter().map(|r| (r.record, r.demographics)).collect()
        };
        let sample = summarize(&rows);
        markdown.push_str("\n## Sample\n\n");
        markdown.push_str(&format!(
            "{} completed sessions with demographics, {} without.\n",
            sample.with_demographics, sample.without_demographics
        ));
        for (arm, age) in &sample.mean_age {
            markdown.push_str(&format!("- mean age, {arm}: {age:.1}\n"));
        }
    }

    fs::create_dir_all(out)?;
    fs::write(out.join("report.json"), report.to_json())?;
    fs::write(out.join("report.md"), markdown)?;
    println!("report written to {}", out.display());
    Ok(())
}

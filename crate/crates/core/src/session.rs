//! Arm assignment and the fifteen-stage participant flow.
//!
//! The flow is a strict state machine: a submission is accepted only for the
//! session's current stage and moves it to the immediate successor. There is
//! no back-navigation. [`apply_submission`] is the pure transition function;
//! [`SessionEngine`] adds locking, persistence and the chat pipeline.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

use chrono::{DateTime, TimeZone, Utc};
use parking_lot::{Mutex, RwLock};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::participation::{self, ApprovalBallot, OverallVote, ParticipationError, RankBallot};
use crate::persona::{open_conversation, ChatTurn, GatewayError, PersonaGateway};
use crate::store::{AuditRecord, EventRecord, ResponseRecord, ResponseStore, StoreError};
use crate::study::{render_block, DeliveryPayload, PersonaRole, QuestionnaireDef, RenderError, StudyDefinition};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Treatment,
    Control,
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Treatment => "treatment",
            Arm::Control => "control",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Consent,
    Introduction,
    InfoBlocks,
    Recall,
    ChatFact,
    ChatDeliberative,
    VotingInfo,
    ApprovalVote,
    RankVote,
    OverallVote,
    Consultation,
    FormatEval,
    LlmEval,
    TrafficHabits,
    Debrief,
}

impl Stage {
    pub const ALL: [Stage; 15] = [
        Stage::Consent,
        Stage::Introduction,
        Stage::InfoBlocks,
        Stage::Recall,
        Stage::ChatFact,
        Stage::ChatDeliberative,
        Stage::VotingInfo,
        Stage::ApprovalVote,
        Stage::RankVote,
        Stage::OverallVote,
        Stage::Consultation,
        Stage::FormatEval,
        Stage::LlmEval,
        Stage::TrafficHabits,
        Stage::Debrief,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn next(self) -> Option<Stage> {
        Stage::ALL.get(self.index() + 1).copied()
    }

    pub fn is_questionnaire(self) -> bool {
        matches!(self, Stage::FormatEval | Stage::LlmEval | Stage::TrafficHabits)
    }

    pub fn chat_role(self) -> Option<PersonaRole> {
        match self {
            Stage::ChatFact => Some(PersonaRole::Fact),
            Stage::ChatDeliberative => Some(PersonaRole::Deliberative),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentMode {
    /// Independent fair coin per participant.
    Simple,
    /// Shuffled blocks with equal arm counts.
    Blocked,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("block size must be a positive even number, got {0}")]
pub struct InvalidBlockSize(pub usize);

/// Seeded arm assigner. The sequence of arms is a function of the seed and
/// the draw index only.
#[derive(Debug, Clone)]
pub struct ArmAssigner {
    mode: AssignmentMode,
    seed: u64,
    block_size: usize,
    rng: ChaCha8Rng,
    pending: Vec<Arm>,
    treatment: usize,
    control: usize,
}

impl ArmAssigner {
    pub fn simple(seed: u64) -> Self {
        Self {
            mode: AssignmentMode::Simple,
            seed,
            block_size: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            pending: Vec::new(),
            treatment: 0,
            control: 0,
        }
    }

    pub fn blocked(seed: u64, block_size: usize) -> Result<Self, InvalidBlockSize> {
        if block_size == 0 || !block_size.is_multiple_of(2) {
            return Err(InvalidBlockSize(block_size));
        }
        Ok(Self { mode: AssignmentMode::Blocked, block_size, ..Self::simple(seed) })
    }

    pub fn mode(&self) -> AssignmentMode {
        self.mode
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn counts(&self) -> (usize, usize) {
        (self.treatment, self.control)
    }

    pub fn draws(&self) -> usize {
        self.treatment + self.control
    }

    pub fn assign(&mut self) -> Arm {
        let arm = match self.mode {
            AssignmentMode::Simple => {
                if self.rng.random_bool(0.5) {
                    Arm::Treatment
                } else {
                    Arm::Control
                }
            }
            AssignmentMode::Blocked => {
                if self.pending.is_empty() {
                    let half = self.block_size / 2;
                    let mut block: Vec<Arm> =
                        std::iter::repeat_n(Arm::Treatment, half).chain(std::iter::repeat_n(Arm::Control, half)).collect();
                    block.shuffle(&mut self.rng);
                    block.reverse();
                    self.pending = block;
                }
                self.pending.pop().expect("refilled above")
            }
        };
        match arm {
            Arm::Treatment => self.treatment += 1,
            Arm::Control => self.control += 1,
        }
        arm
    }
}

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Deterministic clock advancing a fixed step per reading.
pub struct SteppingClock {
    next_ms: AtomicI64,
    step_ms: i64,
}

impl SteppingClock {
    pub fn new(start: DateTime<Utc>, step_ms: i64) -> Self {
        Self { next_ms: AtomicI64::new(start.timestamp_millis()), step_ms }
    }

    pub fn from_epoch_seconds(secs: i64) -> Self {
        Self::new(Utc.timestamp_opt(secs, 0).single().expect("valid timestamp"), 1_000)
    }
}

impl Clock for SteppingClock {
    fn now(&self) -> DateTime<Utc> {
        let ms = self.next_ms.fetch_add(self.step_ms, Ordering::Relaxed);
        Utc.timestamp_millis_opt(ms).single().expect("valid timestamp")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantSession {
    pub session_id: String,
    pub external_id: String,
    pub arm: Arm,
    pub stage: Stage,
    /// Number of information blocks viewed so far.
    pub block_cursor: usize,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    pub completed: bool,
}

pub type QuestionnaireAnswers = BTreeMap<String, BTreeMap<String, String>>;

/// A stage-tagged submission, e.g. `{"stage": "recall", "text": "..."}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum StageSubmission {
    Consent { accepted: bool },
    Introduction,
    InfoBlocks { block_id: String },
    Recall { text: String },
    ChatFact,
    ChatDeliberative,
    VotingInfo,
    ApprovalVote { grades: ApprovalBallot },
    RankVote { ranking: RankBallot },
    OverallVote { vote: OverallVote },
    Consultation { text: String },
    FormatEval { answers: QuestionnaireAnswers },
    LlmEval { answers: QuestionnaireAnswers },
    TrafficHabits { answers: QuestionnaireAnswers },
    Debrief { acknowledged: bool },
}

impl StageSubmission {
    pub fn stage(&self) -> Stage {
        match self {
            StageSubmission::Consent { .. } => Stage::Consent,
            StageSubmission::Introduction => Stage::Introduction,
            StageSubmission::InfoBlocks { .. } => Stage::InfoBlocks,
            StageSubmission::Recall { .. } => Stage::Recall,
            StageSubmission::ChatFact => Stage::ChatFact,
            StageSubmission::ChatDeliberative => Stage::ChatDeliberative,
            StageSubmission::VotingInfo => Stage::VotingInfo,
            StageSubmission::ApprovalVote { .. } => Stage::ApprovalVote,
            StageSubmission::RankVote { .. } => Stage::RankVote,
            StageSubmission::OverallVote { .. } => Stage::OverallVote,
            StageSubmission::Consultation { .. } => Stage::Consultation,
            StageSubmission::FormatEval { .. } => Stage::FormatEval,
            StageSubmission::LlmEval { .. } => Stage::LlmEval,
            StageSubmission::TrafficHabits { .. } => Stage::TrafficHabits,
            StageSubmission::Debrief { .. } => Stage::Debrief,
        }
    }

    /// The submission body without the stage tag.
    pub fn payload(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("submission serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("stage");
        }
        v
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("submission for {got:?} while the session is at {expected:?}")]
    OutOfOrder { expected: Stage, got: Stage },
    #[error("stage incomplete: {0}")]
    IncompleteStage(String),
    #[error("session already completed")]
    AlreadyCompleted,
    #[error("invalid submission: {0}")]
    Validation(String),
    #[error(transparent)]
    Ballot(#[from] ParticipationError),
    #[error("a session already exists for external id `{0}`")]
    DuplicateExternalId(String),
    #[error("external id must not be empty")]
    EmptyExternalId,
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid session token")]
    Unauthorized,
    #[error("chat limit of {0} participant turns reached")]
    ChatCapReached(usize),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    /// Minimum participant turns per chat stage.
    pub min_chat_turns: usize,
    /// Maximum participant turns per conversation.
    pub max_chat_turns: usize,
    /// Seed for session ids and tokens; `None` draws from the OS.
    pub id_seed: Option<u64>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self { min_chat_turns: 0, max_chat_turns: 50, id_seed: None }
    }
}

pub const CONSENT_TEXT: &str = "This study is run for research purposes. You will learn about a street redesign, \
talk with two AI assistants, vote and answer questionnaires. Please do not share personal data such as your name \
in the chats. You may withdraw at any time.";
pub const INTRODUCTION_TEXT: &str = "Imagine you live in Ville d'Ordinaire. The city plans to redesign one of its \
streets and wants to hear from its citizens. You will first learn about the project in six short parts.";
pub const RECALL_PROMPT: &str = "Please write down everything you remember about the project.";
pub const VOTING_INFO_TEXT: &str = "You will now vote on the project in three ways: grade each part of the project, \
rank the parts from best to worst, and give an overall yes or no.";
pub const CONSULTATION_PROMPT: &str = "Is there anything you would like to tell the city about the project? \
You may leave this field empty.";
pub const DEBRIEF_TEXT: &str = "Thank you for taking part. The city and its project are fictional, and the two \
assistants were AI systems. Please confirm to finish the study.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryView {
    pub category_id: String,
    pub title: String,
}

/// Exactly what a participant may see at their current stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StageContent {
    Text { text: String },
    InfoBlock { index: usize, total: usize, block: DeliveryPayload },
    FreeText { prompt: String, allow_empty: bool },
    Chat { persona_id: String, display_name: String, transcript: Vec<ChatTurn>, min_turns: usize, max_turns: usize },
    Approval { categories: Vec<CategoryView>, grades: Vec<participation::ApprovalGrade> },
    Ranking { categories: Vec<CategoryView> },
    YesNo { options: Vec<OverallVote> },
    Questionnaires { questionnaires: Vec<QuestionnaireDef> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePayload {
    pub session_id: String,
    pub stage: Stage,
    pub content: StageContent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreatedSession {
    pub session: ParticipantSession,
    /// Bearer token for all further requests of this session.
    pub token: String,
}

/// Applies one submission to a session record. On error the record is left
/// untouched.
pub fn apply_submission(
    record: &mut ResponseRecord,
    submission: &StageSubmission,
    study: &StudyDefinition,
    config: &EngineConfig,
    ts: DateTime<Utc>,
) -> Result<Stage, SessionError> {
    if record.session.completed {
        return Err(SessionError::AlreadyCompleted);
    }
    let stage = record.session.stage;
    if submission.stage() != stage {
        return Err(SessionError::OutOfOrder { expected: stage, got: submission.stage() });
    }

    let mut next = stage.next();
    match submission {
        StageSubmission::Consent { accepted } => {
            if !accepted {
                return Err(SessionError::Validation("consent must be given to take part".into()));
            }
        }
        StageSubmission::InfoBlocks { block_id } => {
            let cursor = record.session.block_cursor;
            let expected = &study.blocks[cursor].block_id;
            if block_id != expected {
                return Err(SessionError::Validation(format!("expected block `{expected}`, got `{block_id}`")));
            }
            if cursor + 1 < study.blocks.len() {
                next = Some(Stage::InfoBlocks);
            }
        }
        StageSubmission::ChatFact | StageSubmission::ChatDeliberative => {
            let role = stage.chat_role().expect("chat stage");
            let persona = study.persona_by_role(role);
            let turns = record.participant_turns(&persona.persona_id);
            if turns < config.min_chat_turns {
                return Err(SessionError::IncompleteStage(format!(
                    "{} participant turns with {}, at least {} required",
                    turns, persona.display_name, config.min_chat_turns
                )));
            }
        }
        StageSubmission::ApprovalVote { grades } => participation::validate_approval(grades, &study.categories)?,
        StageSubmission::RankVote { ranking } => participation::validate_rank(ranking, &study.categories)?,
        StageSubmission::FormatEval { answers }
        | StageSubmission::LlmEval { answers }
        | StageSubmission::TrafficHabits { answers } => validate_answers(study, stage, answers)?,
        StageSubmission::Debrief { acknowledged } => {
            if !acknowledged {
                return Err(SessionError::IncompleteStage("debrief must be acknowledged".into()));
            }
            next = None;
        }
        StageSubmission::Introduction
        | StageSubmission::VotingInfo
        | StageSubmission::Recall { .. }
        | StageSubmission::OverallVote { .. }
        | StageSubmission::Consultation { .. } => {}
    }

    // validated; commit
    match submission {
        StageSubmission::InfoBlocks { .. } => record.session.block_cursor += 1,
        StageSubmission::Recall { text } => record.recall = Some(text.clone()),
        StageSubmission::ApprovalVote { grades } => record.approval = Some(grades.clone()),
        StageSubmission::RankVote { ranking } => record.rank = Some(ranking.clone()),
        StageSubmission::OverallVote { vote } => record.overall = Some(*vote),
        StageSubmission::Consultation { text } => record.consultation = Some(text.clone()),
        StageSubmission::FormatEval { answers }
        | StageSubmission::LlmEval { answers }
        | StageSubmission::TrafficHabits { answers } => {
            record.questionnaires.extend(answers.iter().map(|(k, v)| (k.clone(), v.clone())));
        }
        StageSubmission::Debrief { .. } => record.session.completed = true,
        _ => {}
    }
    record.events.push(EventRecord {
        session_id: record.session.session_id.clone(),
        stage,
        payload: submission.payload(),
        ts,
    });
    if let Some(next) = next {
        record.session.stage = next;
    }
    record.session.updated_at = ts;
    Ok(record.session.stage)
}

fn validate_answers(study: &StudyDefinition, stage: Stage, answers: &QuestionnaireAnswers) -> Result<(), SessionError> {
    let expected: Vec<&QuestionnaireDef> = study.questionnaires_for(stage).collect();
    if let Some(unknown) = answers.keys().find(|k| !expected.iter().any(|q| &q.questionnaire_id == *k)) {
        return Err(SessionError::Validation(format!("unknown questionnaire `{unknown}` for {stage:?}")));
    }
    for q in expected {
        let given = answers
            .get(&q.questionnaire_id)
            .ok_or_else(|| SessionError::IncompleteStage(format!("questionnaire `{}` not answered", q.questionnaire_id)))?;
        if let Some(unknown) = given.keys().find(|k| !q.items.iter().any(|i| &i.item_id == *k)) {
            return Err(SessionError::Validation(format!("unknown item `{unknown}` in `{}`", q.questionnaire_id)));
        }
        for item in &q.items {
            match given.get(&item.item_id) {
                None => {
                    return Err(SessionError::IncompleteStage(format!(
                        "item `{}` of `{}` not answered",
                        item.item_id, q.questionnaire_id
                    )))
                }
                Some(choice) if !item.options.contains(choice) => {
                    return Err(SessionError::Validation(format!(
                        "`{choice}` is not an option of `{}`",
                        item.item_id
                    )))
                }
                Some(_) => {}
            }
        }
    }
    Ok(())
}

/// The payload visible to the participant at the record's current stage.
pub fn stage_payload(record: &ResponseRecord, study: &StudyDefinition, config: &EngineConfig) -> Result<StagePayload, SessionError> {
    if record.session.completed {
        return Err(SessionError::AlreadyCompleted);
    }
    let stage = record.session.stage;
    let categories = || {
        study
            .blocks
            .iter()
            .map(|b| CategoryView { category_id: b.block_id.clone(), title: b.title.clone() })
            .collect::<Vec<_>>()
    };
    let text = |t: &str| StageContent::Text { text: t.to_string() };
    let content = match stage {
        Stage::Consent => text(CONSENT_TEXT),
        Stage::Introduction => text(INTRODUCTION_TEXT),
        Stage::InfoBlocks => {
            let index = record.session.block_cursor;
            StageContent::InfoBlock {
                index,
                total: study.blocks.len(),
                block: render_block(&study.blocks[index], record.session.arm)?,
            }
        }
        Stage::Recall => StageContent::FreeText { prompt: RECALL_PROMPT.into(), allow_empty: true },
        Stage::ChatFact | Stage::ChatDeliberative => {
            let persona = study.persona_by_role(stage.chat_role().expect("chat stage"));
            StageContent::Chat {
                persona_id: persona.persona_id.clone(),
                display_name: persona.display_name.clone(),
                transcript: record.conversation(&persona.persona_id).map(|c| c.turns.clone()).unwrap_or_default(),
                min_turns: config.min_chat_turns,
                max_turns: config.max_chat_turns,
            }
        }
        Stage::VotingInfo => text(VOTING_INFO_TEXT),
        Stage::ApprovalVote => StageContent::Approval {
            categories: categories(),
            grades: vec![
                participation::ApprovalGrade::Approved,
                participation::ApprovalGrade::Neutral,
                participation::ApprovalGrade::Disapproved,
            ],
        },
        Stage::RankVote => StageContent::Ranking { categories: categories() },
        Stage::OverallVote => StageContent::YesNo { options: vec![OverallVote::Yes, OverallVote::No] },
        Stage::Consultation => StageContent::FreeText { prompt: CONSULTATION_PROMPT.into(), allow_empty: true },
        Stage::FormatEval | Stage::LlmEval | Stage::TrafficHabits => {
            StageContent::Questionnaires { questionnaires: study.questionnaires_for(stage).cloned().collect() }
        }
        Stage::Debrief => text(DEBRIEF_TEXT),
    };
    Ok(StagePayload { session_id: record.session.session_id.clone(), stage, content })
}

struct SessionEntry {
    record: ResponseRecord,
    token: String,
}

/// Result of one chat exchange: the participant's turn and the persona's reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub participant: ChatTurn,
    pub reply: ChatTurn,
}

/// Owns all live sessions. Updates to one session are serialized by its own
/// lock; the assigner is a single shared resource.
pub struct SessionEngine {
    study: Arc<StudyDefinition>,
    gateway: PersonaGateway,
    store: Arc<ResponseStore>,
    config: EngineConfig,
    clock: Arc<dyn Clock>,
    assigner: Mutex<ArmAssigner>,
    ids: Mutex<ChaCha8Rng>,
    sessions: RwLock<HashMap<String, Arc<Mutex<SessionEntry>>>>,
    external_ids: Mutex<HashMap<String, String>>,
}

impl SessionEngine {
    pub fn new(
        study: Arc<StudyDefinition>,
        gateway: PersonaGateway,
        store: Arc<ResponseStore>,
        assigner: ArmAssigner,
        config: EngineConfig,
        clock: Arc<dyn Clock>,
    ) -> Self {
        let ids = match config.id_seed {
            Some(seed) => ChaCha8Rng::seed_from_u64(seed),
            None => ChaCha8Rng::from_os_rng(),
        };
        Self {
            study,
            gateway,
            store,
            config,
            clock,
            assigner: Mutex::new(assigner),
            ids: Mutex::new(ids),
            sessions: RwLock::new(HashMap::new()),
            external_ids: Mutex::new(HashMap::new()),
        }
    }

    pub fn study(&self) -> &StudyDefinition {
        &self.study
    }

    pub fn gateway(&self) -> &PersonaGateway {
        &self.gateway
    }

    pub fn store(&self) -> &ResponseStore {
        &self.store
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn assignment_counts(&self) -> (usize, usize) {
        self.assigner.lock().counts()
    }

    pub fn create_session(&self, external_id: &str) -> Result<CreatedSession, SessionError> {
        let external_id = external_id.trim();
        if external_id.is_empty() {
            return Err(SessionError::EmptyExternalId);
        }
        let mut external_ids = self.external_ids.lock();
        if external_ids.contains_key(external_id) {
            return Err(SessionError::DuplicateExternalId(external_id.to_string()));
        }
        let arm = self.assigner.lock().assign();
        let (session_id, token) = {
            let mut ids = self.ids.lock();
            (format!("s-{:016x}", ids.next_u64()), format!("{:016x}{:016x}", ids.next_u64(), ids.next_u64()))
        };
        let now = self.clock.now();
        let session = ParticipantSession {
            session_id: session_id.clone(),
            external_id: external_id.to_string(),
            arm,
            stage: Stage::Consent,
            block_cursor: 0,
            created_at: now,
            updated_at: now,
            completed: false,
        };
        let record = ResponseRecord::new(session.clone());
        self.store.store_response(&record)?;
        external_ids.insert(external_id.to_string(), session_id.clone());
        self.sessions
            .write()
            .insert(session_id, Arc::new(Mutex::new(SessionEntry { record, token: token.clone() })));
        Ok(CreatedSession { session, token })
    }

    fn entry(&self, session_id: &str) -> Result<Arc<Mutex<SessionEntry>>, SessionError> {
        self.sessions
            .read()
            .get(session_id)
            .cloned()
            .ok_or_else(|| SessionError::NotFound(format!("session `{session_id}`")))
    }

    pub fn authorize(&self, session_id: &str, token: &str) -> Result<(), SessionError> {
        let entry = self.entry(session_id)?;
        let entry = entry.lock();
        if entry.token == token {
            Ok(())
        } else {
            Err(SessionError::Unauthorized)
        }
    }

    pub fn session(&self, session_id: &str) -> Result<ParticipantSession, SessionError> {
        Ok(self.entry(session_id)?.lock().record.session.clone())
    }

    pub fn snapshot(&self, session_id: &str) -> Result<ResponseRecord, SessionError> {
        Ok(self.entry(session_id)?.lock().record.clone())
    }

    /// All session records ordered by session id.
    pub fn snapshots(&self) -> Vec<ResponseRecord> {
        let entries: Vec<_> = self.sessions.read().values().cloned().collect();
        let mut records: Vec<ResponseRecord> = entries.iter().map(|e| e.lock().record.clone()).collect();
        records.sort_by(|a, b| a.session.session_id.cmp(&b.session.session_id));
        records
    }

    pub fn advance(&self, session_id: &str, submission: &StageSubmission) -> Result<Stage, SessionError> {
        let entry = self.entry(session_id)?;
        let mut entry = entry.lock();
        let mut record = entry.record.clone();
        let stage = apply_submission(&mut record, submission, &self.study, &self.config, self.clock.now())?;
        if let Some(role) = stage.chat_role() {
            if record.session.stage != entry.record.session.stage {
                let persona = self.study.persona_by_role(role);
                record.conversations.push(open_conversation(
                    session_id,
                    persona,
                    self.gateway.package(),
                    self.gateway.threshold(),
                    record.session.updated_at,
                ));
            }
        }
        let event = record.events.last().cloned().expect("event appended");
        self.store.store_response(&record)?;
        self.store.append_event(&event)?;
        entry.record = record;
        Ok(stage)
    }

    pub fn current_payload(&self, session_id: &str) -> Result<StagePayload, SessionError> {
        let entry = self.entry(session_id)?;
        let entry = entry.lock();
        stage_payload(&entry.record, &self.study, &self.config)
    }

    /// Runs one participant message through the persona pipeline and
    /// persists both turns. The session lock is held for the whole exchange.
    pub fn chat(&self, session_id: &str, persona_id: &str, user_text: &str) -> Result<ChatExchange, SessionError> {
        let persona = self
            .study
            .persona(persona_id)
            .ok_or_else(|| SessionError::NotFound(format!("persona `{persona_id}`")))?
            .clone();
        let entry = self.entry(session_id)?;
        let mut entry = entry.lock();
        if entry.record.session.completed {
            return Err(SessionError::AlreadyCompleted);
        }
        let stage = entry.record.session.stage;
        let wanted = persona.role.chat_stage();
        if stage != wanted {
            return Err(SessionError::OutOfOrder { expected: stage, got: wanted });
        }
        if user_text.trim().is_empty() {
            return Err(SessionError::Validation("message must not be empty".into()));
        }
        if entry.record.participant_turns(persona_id) >= self.config.max_chat_turns {
            return Err(SessionError::ChatCapReached(self.config.max_chat_turns));
        }

        let mut record = entry.record.clone();
        let conversation = record
            .conversations
            .iter_mut()
            .find(|c| c.persona_id == persona_id)
            .expect("conversation opened on stage entry");
        let participant = ChatTurn::participant(user_text, self.clock.now());
        conversation.turns.push(participant.clone());
        let outcome = self.gateway.respond(&persona, conversation)?;
        let reply = outcome.turn_at(self.clock.now());
        conversation.turns.push(reply.clone());
        let turn_index = conversation.turns.len() - 1;
        record.session.updated_at = reply.ts;

        self.store.store_response(&record)?;
        // every flagged fact-persona turn is audited
        if persona.role == PersonaRole::Fact && outcome.is_flagged() {
            self.store.append_audit(&AuditRecord {
                session_id: session_id.to_string(),
                persona_id: persona_id.to_string(),
                turn_index,
                reply: reply.text.clone(),
                verdict: outcome.verdict.clone(),
                ts: reply.ts,
            })?;
        }
        entry.record = record;
        Ok(ChatExchange { participant, reply })
    }
}

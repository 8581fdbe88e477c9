//! Scripted bot participants for desk-scale runs.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use townhall_core::analytics::recall::source_text;
use townhall_core::participation::ApprovalGrade;
use townhall_core::persona::StubProvider;
use townhall_core::session::{EngineConfig, QuestionnaireAnswers, SessionError, SteppingClock};
use townhall_core::{
    ApprovalBallot, Arm, ArmAssigner, DemographicRecord, DemographicStore, OverallVote, PersonaGateway, RankBallot,
    ResponseRecord, ResponseStore, SessionEngine, Stage, StageSubmission, StudyDefinition,
};

/// Fixed start of the simulated clock, so runs are reproducible.
pub const SIM_EPOCH: i64 = 1_700_000_000;

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("invalid bot policy: {0}")]
pub struct PolicyError(pub String);

/// Finite distribution over counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountDistribution(pub Vec<(usize, f64)>);

impl CountDistribution {
    pub fn mean(&self) -> f64 {
        self.0.iter().map(|(k, p)| *k as f64 * p).sum()
    }

    fn validate(&self, name: &str) -> Result<(), PolicyError> {
        check_weights(name, &self.0.iter().map(|(_, p)| *p).collect::<Vec<_>>())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let idx = WeightedIndex::new(self.0.iter().map(|(_, p)| *p)).expect("validated weights");
        self.0[idx.sample(rng)].0
    }
}

fn check_weights(name: &str, weights: &[f64]) -> Result<(), PolicyError> {
    if weights.is_empty() {
        return Err(PolicyError(format!("{name}: empty distribution")));
    }
    if weights.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(PolicyError(format!("{name}: negative or non-finite probability")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(PolicyError(format!("{name}: probabilities sum to {total}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BotPolicy {
    pub seed: u64,
    /// Inclusive word-count range of recall texts, per arm.
    pub recall_words: BTreeMap<Arm, (usize, usize)>,
    /// Participant messages per conversation, by persona id.
    pub chat_questions: BTreeMap<String, CountDistribution>,
    /// Approved, neutral, disapproved.
    pub approval: [f64; 3],
    pub overall_yes: f64,
    pub consultation_rate: f64,
    /// Option weights per questionnaire item; other items are uniform.
    pub item_weights: BTreeMap<String, Vec<f64>>,
}

impl BotPolicy {
    /// Calibrated to 3.2 messages to the fact persona and 5.5 to the
    /// deliberative one.
    pub fn calibrated(seed: u64) -> Self {
        let table = |rows: [(usize, usize, usize); 4]| {
            rows.into_iter()
                .map(|(id, a, b)| {
                    let n = 195.0;
                    let name = ["preferred_format", "engaging_format", "easier_to_understand", "easier_to_remember"][id];
                    (name.to_string(), vec![a as f64 / n, b as f64 / n, (195 - a - b) as f64 / n])
                })
                .collect::<BTreeMap<_, _>>()
        };
        Self {
            seed,
            recall_words: BTreeMap::from([(Arm::Treatment, (14, 30)), (Arm::Control, (9, 23))]),
            chat_questions: BTreeMap::from([
                ("flo".to_string(), CountDistribution(vec![(2, 0.1), (3, 0.6), (4, 0.3)])),
                ("gustavo".to_string(), CountDistribution(vec![(4, 0.1), (5, 0.3), (6, 0.6)])),
            ]),
            approval: [0.55, 0.25, 0.2],
            overall_yes: 0.7,
            consultation_rate: 0.7,
            item_weights: table([(0, 149, 34), (1, 148, 19), (2, 135, 31), (3, 112, 50)]),
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        for (arm, (lo, hi)) in &self.recall_words {
            if lo > hi || *hi == 0 {
                return Err(PolicyError(format!("recall range for {arm} is empty")));
            }
        }
        for (persona, d) in &self.chat_questions {
            d.validate(persona)?;
        }
        check_weights("approval", &self.approval)?;
        for p in [self.overall_yes, self.consultation_rate] {
            if !(0.0..=1.0).contains(&p) {
                return Err(PolicyError(format!("probability {p} outside [0, 1]")));
            }
        }
        for (item, w) in &self.item_weights {
            check_weights(item, w)?;
        }
        Ok(())
    }
}

const FLO_QUESTIONS: [&str; 14] = [
    "How many trees will be planted?",
    "How many parking spaces will be removed?",
    "What is the new speed limit?",
    "How many residents answered the surveys?",
    "How much water can the gravel layer hold?",
    "Where will people park their cars?",
    "How many native plant species will be used?",
    "How wide is the new bike lane?",
    "Will delivery vans still be able to stop?",
    "How much of the street will be de-paved?",
    "Who took part in the design workshops?",
    "What happens to rain water during storms?",
    "Will the trees give shade in summer?",
    "What do you think about removing the parking?",
];

const GUSTAVO_MESSAGES: [&str; 12] = [
    "I worry that older neighbours will have trouble without parking nearby.",
    "I like the idea of more trees but the construction will be noisy.",
    "Shop owners might lose customers who arrive by car.",
    "Cycling to work would be safer with the new lane.",
    "Families with children would enjoy a calmer street.",
    "I am not sure the garage is close enough for everyone.",
    "The shade would help during hot summers.",
    "Some people will feel the city did not listen to them.",
    "Delivery drivers need space to stop.",
    "A greener street could bring neighbours together.",
    "I wonder how long the works will take.",
    "Rain flooding has been a problem on my street.",
];

const CONSULTATION_TEXTS: [&str; 10] = [
    "Great project, the trees and the bike lane are a wonderful improvement.",
    "Please keep some parking for people with reduced mobility.",
    "I am worried the construction will be a mess for local shops.",
    "The information was clear and the videos were helpful.",
    "Losing the parking spaces is a bad idea for this neighbourhood.",
    "When does construction start?",
    "Nice to see more plants and shade on the street.",
    "The speed limit change is useful for safety.",
    "Too expensive and the garage is too far away.",
    "I have no further comments.",
];

const SEXES: [&str; 3] = ["female", "male", "other"];
const ETHNICITIES: [&str; 5] = ["white", "black", "asian", "mixed", "other"];
const COUNTRIES: [&str; 6] = ["CH", "FR", "DE", "IT", "UK", "US"];
const EMPLOYMENT: [&str; 5] = ["full-time", "part-time", "student", "unemployed", "retired"];

fn pick<'a>(rng: &mut ChaCha8Rng, items: &[&'a str]) -> &'a str {
    items[rng.random_range(0..items.len())]
}

fn recall_text(study: &StudyDefinition, arm: Arm, words: usize, rng: &mut ChaCha8Rng) -> String {
    let sentences: Vec<&str> = study
        .blocks
        .iter()
        .flat_map(|b| source_text(b, arm).split_inclusive(['.', '!', '?']))
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    let mut out: Vec<&str> = Vec::with_capacity(words);
    let mut i = rng.random_range(0..sentences.len());
    while out.len() < words {
        out.extend(sentences[i % sentences.len()].split_whitespace());
        i += rng.random_range(1..4);
    }
    out.truncate(words);
    out.join(" ")
}

fn answers(study: &StudyDefinition, stage: Stage, policy: &BotPolicy, rng: &mut ChaCha8Rng) -> QuestionnaireAnswers {
    study
        .questionnaires_for(stage)
        .map(|q| {
            let items = q
                .items
                .iter()
                .map(|item| {
                    let choice = match policy.item_weights.get(&item.item_id) {
                        Some(w) if w.len() == item.options.len() => {
                            WeightedIndex::new(w).expect("validated weights").sample(rng)
                        }
                        _ => rng.random_range(0..item.options.len()),
                    };
                    (item.item_id.clone(), item.options[choice].clone())
                })
                .collect();
            (q.questionnaire_id.clone(), items)
        })
        .collect()
}

fn submission(
    study: &StudyDefinition,
    record: &ResponseRecord,
    policy: &BotPolicy,
    rng: &mut ChaCha8Rng,
) -> StageSubmission {
    let grades = [ApprovalGrade::Approved, ApprovalGrade::Neutral, ApprovalGrade::Disapproved];
    match record.session.stage {
        Stage::Consent => StageSubmission::Consent { accepted: true },
        Stage::Introduction => StageSubmission::Introduction,
        Stage::InfoBlocks => StageSubmission::InfoBlocks { block_id: study.blocks[record.session.block_cursor].block_id.clone() },
        Stage::Recall => {
            let arm = record.session.arm;
            let (lo, hi) = policy.recall_words.get(&arm).copied().unwrap_or((10, 20));
            let n = rng.random_range(lo..=hi);
            StageSubmission::Recall { text: recall_text(study, arm, n, rng) }
        }
        Stage::ChatFact => StageSubmission::ChatFact,
        Stage::ChatDeliberative => StageSubmission::ChatDeliberative,
        Stage::VotingInfo => StageSubmission::VotingInfo,
        Stage::ApprovalVote => {
            let w = WeightedIndex::new(policy.approval).expect("validated weights");
            StageSubmission::ApprovalVote {
                grades: ApprovalBallot(study.categories.iter().map(|c| (c.clone(), grades[w.sample(rng)])).collect()),
            }
        }
        Stage::RankVote => {
            let mut order = study.categories.clone();
            order.shuffle(rng);
            StageSubmission::RankVote { ranking: RankBallot(order) }
        }
        Stage::OverallVote => StageSubmission::OverallVote {
            vote: if rng.random_bool(policy.overall_yes) { OverallVote::Yes } else { OverallVote::No },
        },
        Stage::Consultation => StageSubmission::Consultation {
            text: if rng.random_bool(policy.consultation_rate) {
                pick(rng, &CONSULTATION_TEXTS).to_string()
            } else {
                String::new()
            },
        },
        Stage::FormatEval => StageSubmission::FormatEval { answers: answers(study, Stage::FormatEval, policy, rng) },
        Stage::LlmEval => StageSubmission::LlmEval { answers: answers(study, Stage::LlmEval, policy, rng) },
        Stage::TrafficHabits => StageSubmission::TrafficHabits { answers: answers(study, Stage::TrafficHabits, policy, rng) },
        Stage::Debrief => StageSubmission::Debrief { acknowledged: true },
    }
}

fn demographics_for(external_id: &str, rng: &mut ChaCha8Rng) -> DemographicRecord {
    DemographicRecord {
        external_id: external_id.to_string(),
        age: Some(rng.random_range(18..=80)),
        sex: Some(pick(rng, &SEXES).to_string()),
        ethnicity: Some(pick(rng, &ETHNICITIES).to_string()),
        country: Some(pick(rng, &COUNTRIES).to_string()),
        employment: Some(pick(rng, &EMPLOYMENT).to_string()),
    }
}

fn run_bot(
    engine: &SessionEngine,
    demographics: Option<&DemographicStore>,
    policy: &BotPolicy,
    bot: usize,
) -> Result<String, SessionError> {
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    rng.set_stream(bot as u64 + 1);
    let external_id = format!("bot-{bot:05}");
    let created = engine.create_session(&external_id)?;
    let id = created.session.session_id;
    if let Some(store) = demographics {
        store.store_demographics(&demographics_for(&external_id, &mut rng))?;
    }
    let study = engine.study();
    loop {
        let record = engine.snapshot(&id)?;
        if record.session.completed {
            return Ok(id);
        }
        if let Some(role) = record.session.stage.chat_role() {
            let persona = study.persona_by_role(role);
            let bank: &[&str] = match role {
                townhall_core::study::PersonaRole::Fact => &FLO_QUESTIONS,
                townhall_core::study::PersonaRole::Deliberative => &GUSTAVO_MESSAGES,
            };
            let n = policy.chat_questions.get(&persona.persona_id).map_or(0, |d| d.sample(&mut rng));
            let start = rng.random_range(0..bank.len());
            for k in 0..n {
                engine.chat(&id, &persona.persona_id, bank[(start + k) % bank.len()])?;
            }
        }
        engine.advance(&id, &submission(study, &record, policy, &mut rng))?;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BotFailure {
    pub bot: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub completed: Vec<String>,
    pub failed: Vec<BotFailure>,
}

/// Drives `n_bots` sessions through every stage, one after another so that
/// session ids and arm draws follow the seed.
pub fn simulate(
    engine: &SessionEngine,
    demographics: Option<&DemographicStore>,
    n_bots: usize,
    policy: &BotPolicy,
) -> Result<SimulationSummary, PolicyError> {
    policy.validate()?;
    let mut summary = SimulationSummary::default();
    for bot in 0..n_bots {
        match run_bot(engine, demographics, policy, bot) {
            Ok(id) => summary.completed.push(id),
            Err(e) => {
                log::warn!("bot {bot} aborted: {e}");
                summary.failed.push(BotFailure { bot, error: e.to_string() });
            }
        }
    }
    Ok(summary)
}

/// Engine with the offline provider, a stepping clock and seeded ids.
pub fn simulation_engine(study: Arc<StudyDefinition>, store: Arc<ResponseStore>, seed: u64) -> SessionEngine {
    let gateway = PersonaGateway::new(&study, Box::new(StubProvider));
    SessionEngine::new(
        study,
        gateway,
        store,
        ArmAssigner::simple(seed),
        EngineConfig { id_seed: Some(seed), ..EngineConfig::default() },
        Arc::new(SteppingClock::from_epoch_seconds(SIM_EPOCH)),
    )
}

//! Study content: information blocks in two presentation variants, the fact
//! package, personas, voting categories and questionnaires.
//!
//! A study file is a single UTF-8 JSON document. Unknown fields are rejected
//! and every structural invariant is checked on load, so a loaded
//! [`StudyDefinition`] can be shared read-only across sessions.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::session::{Arm, Stage};

pub const SCHEMA_VERSION: u32 = 1;

/// The bundled six-block study (residents, traffic, parking, canopy,
/// biodiversity, sponge).
pub const LAUSANNE_FIXTURE: &str = include_str!("../fixtures/lausanne_6block.study.json");

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("study file does not parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid study at `{path}`: {message}")]
    Validation { path: String, message: String },
    #[error("cannot read study file: {0}")]
    Io(#[from] std::io::Error),
}

impl StudyError {
    fn at(path: impl Into<String>, message: impl Into<String>) -> Self {
        StudyError::Validation { path: path.into(), message: message.into() }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RenderError {
    #[error("block `{block_id}` has no {arm:?} media")]
    MissingVariant { block_id: String, arm: Arm },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyDefinition {
    pub schema_version: u32,
    pub study_id: String,
    pub title: String,
    pub blocks: Vec<InformationBlock>,
    pub facts: Vec<FactEntry>,
    pub personas: Vec<PersonaConfig>,
    pub questionnaires: Vec<QuestionnaireDef>,
    pub categories: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InformationBlock {
    pub block_id: String,
    pub title: String,
    /// Audio narration script of the treatment walkthrough.
    pub narration_script: String,
    #[serde(default)]
    pub anchor_notes: Vec<AnchorNote>,
    #[serde(default)]
    pub media_treatment: Vec<String>,
    #[serde(default)]
    pub media_control: Vec<String>,
    pub body_control: String,
}

/// A landmark in the scene that a fact is anchored to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorNote {
    pub landmark: String,
    pub fact_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactEntry {
    pub fact_id: String,
    pub block_id: String,
    pub text: String,
    pub source_label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PersonaRole {
    /// Answers only from the fact package, with citations.
    Fact,
    /// Open discussion of the project; may ask follow-up questions.
    Deliberative,
}

impl PersonaRole {
    pub fn chat_stage(self) -> Stage {
        match self {
            PersonaRole::Fact => Stage::ChatFact,
            PersonaRole::Deliberative => Stage::ChatDeliberative,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonaConfig {
    pub persona_id: String,
    pub role: PersonaRole,
    pub display_name: String,
    /// Template with `{facts}` and `{history}` placeholders.
    pub system_template: String,
    /// Opening turn of every conversation.
    pub greeting: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_followup_questions: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refusal_message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionnaireDef {
    pub questionnaire_id: String,
    /// Questionnaire stage this instrument is shown in.
    pub stage: Stage,
    pub items: Vec<QuestionItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionItem {
    pub item_id: String,
    pub prompt: String,
    pub options: Vec<String>,
}

/// What a participant receives for one information block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum DeliveryPayload {
    Video {
        block_id: String,
        title: String,
        video_urls: Vec<String>,
        #[serde(skip_serializing_if = "Option::is_none")]
        transcript: Option<String>,
    },
    TextImages {
        block_id: String,
        title: String,
        image_urls: Vec<String>,
        body: String,
    },
}

impl DeliveryPayload {
    pub fn block_id(&self) -> &str {
        match self {
            DeliveryPayload::Video { block_id, .. } | DeliveryPayload::TextImages { block_id, .. } => block_id,
        }
    }

    pub fn title(&self) -> &str {
        match self {
            DeliveryPayload::Video { title, .. } | DeliveryPayload::TextImages { title, .. } => title,
        }
    }
}

/// Payload for `arm` without the narration transcript.
pub fn render_block(block: &InformationBlock, arm: Arm) -> Result<DeliveryPayload, RenderError> {
    render_block_with(block, arm, false)
}

pub fn render_block_with(
    block: &InformationBlock,
    arm: Arm,
    include_transcript: bool,
) -> Result<DeliveryPayload, RenderError> {
    let missing = || RenderError::MissingVariant { block_id: block.block_id.clone(), arm };
    match arm {
        Arm::Treatment => {
            if block.media_treatment.is_empty() {
                return Err(missing());
            }
            Ok(DeliveryPayload::Video {
                block_id: block.block_id.clone(),
                title: block.title.clone(),
                video_urls: block.media_treatment.clone(),
                transcript: include_transcript.then(|| block.narration_script.clone()),
            })
        }
        Arm::Control => {
            if block.media_control.is_empty() {
                return Err(missing());
            }
            Ok(DeliveryPayload::TextImages {
                block_id: block.block_id.clone(),
                title: block.title.clone(),
                image_urls: block.media_control.clone(),
                body: block.body_control.clone(),
            })
        }
    }
}

/// Parses and validates a study document.
pub fn load_study(document: &str) -> Result<StudyDefinition, StudyError> {
    let study: StudyDefinition = serde_json::from_str(document)?;
    study.validate()?;
    Ok(study)
}

pub fn load_study_file(path: impl AsRef<Path>) -> Result<StudyDefinition, StudyError> {
    load_study(&std::fs::read_to_string(path)?)
}

pub fn lausanne_fixture() -> StudyDefinition {
    load_study(LAUSANNE_FIXTURE).expect("bundled study fixture is valid")
}

impl StudyDefinition {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("study serializes")
    }

    pub fn arms(&self) -> [Arm; 2] {
        [Arm::Treatment, Arm::Control]
    }

    pub fn block(&self, block_id: &str) -> Option<&InformationBlock> {
        self.blocks.iter().find(|b| b.block_id == block_id)
    }

    pub fn persona(&self, persona_id: &str) -> Option<&PersonaConfig> {
        self.personas.iter().find(|p| p.persona_id == persona_id)
    }

    pub fn persona_by_role(&self, role: PersonaRole) -> &PersonaConfig {
        self.personas
            .iter()
            .find(|p| p.role == role)
            .expect("validated study has one persona per role")
    }

    pub fn questionnaires_for(&self, stage: Stage) -> impl Iterator<Item = &QuestionnaireDef> {
        self.questionnaires.iter().filter(move |q| q.stage == stage)
    }

    /// Checks every invariant, reporting the path of the first violation.
    pub fn validate(&self) -> Result<(), StudyError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(StudyError::at(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        if self.study_id.trim().is_empty() {
            return Err(StudyError::at("study_id", "must not be empty"));
        }
        if self.blocks.is_empty() {
            return Err(StudyError::at("blocks", "a study needs at least one information block"));
        }

        let mut block_ids = HashSet::new();
        for (i, block) in self.blocks.iter().enumerate() {
            if block.block_id.trim().is_empty() {
                return Err(StudyError::at(format!("blocks[{i}].block_id"), "must not be empty"));
            }
            if !block_ids.insert(block.block_id.as_str()) {
                return Err(StudyError::at(
                    format!("blocks[{i}].block_id"),
                    format!("duplicate block id `{}`", block.block_id),
                ));
            }
            if block.narration_script.trim().is_empty() {
                return Err(StudyError::at(format!("blocks[{i}].narration_script"), "must not be empty"));
            }
            if block.body_control.trim().is_empty() {
                return Err(StudyError::at(format!("blocks[{i}].body_control"), "must not be empty"));
            }
            for (field, urls) in [("media_treatment", &block.media_treatment), ("media_control", &block.media_control)] {
                for (j, raw) in urls.iter().enumerate() {
                    let ok = url::Url::parse(raw).is_ok_and(|u| matches!(u.scheme(), "http" | "https"));
                    if !ok {
                        return Err(StudyError::at(
                            format!("blocks[{i}].{field}[{j}]"),
                            format!("`{raw}` is not an absolute http(s) URL"),
                        ));
                    }
                }
            }
        }

        let block_order: Vec<&str> = self.blocks.iter().map(|b| b.block_id.as_str()).collect();
        let categories: Vec<&str> = self.categories.iter().map(String::as_str).collect();
        if categories != block_order {
            return Err(StudyError::at("categories", "category ids must equal the block ids in block order"));
        }

        let mut fact_ids = HashSet::new();
        for (i, fact) in self.facts.iter().enumerate() {
            if !fact_ids.insert(fact.fact_id.as_str()) {
                return Err(StudyError::at(
                    format!("facts[{i}].fact_id"),
                    format!("duplicate fact id `{}`", fact.fact_id),
                ));
            }
            if fact.text.trim().is_empty() {
                return Err(StudyError::at(format!("facts[{i}].text"), "must not be empty"));
            }
            if !block_ids.contains(fact.block_id.as_str()) {
                return Err(StudyError::at(
                    format!("facts[{i}].block_id"),
                    format!("fact `{}` references unknown block `{}`", fact.fact_id, fact.block_id),
                ));
            }
        }
        for (i, block) in self.blocks.iter().enumerate() {
            for (j, note) in block.anchor_notes.iter().enumerate() {
                if !fact_ids.contains(note.fact_id.as_str()) {
                    return Err(StudyError::at(
                        format!("blocks[{i}].anchor_notes[{j}].fact_id"),
                        format!("unknown fact `{}`", note.fact_id),
                    ));
                }
            }
        }

        let mut persona_ids = HashSet::new();
        let mut roles: HashMap<PersonaRole, usize> = HashMap::new();
        for (i, persona) in self.personas.iter().enumerate() {
            if !persona_ids.insert(persona.persona_id.as_str()) {
                return Err(StudyError::at(
                    format!("personas[{i}].persona_id"),
                    format!("duplicate persona id `{}`", persona.persona_id),
                ));
            }
            *roles.entry(persona.role).or_default() += 1;
            match persona.role {
                PersonaRole::Fact if persona.refusal_message.as_deref().is_none_or(|m| m.trim().is_empty()) => {
                    return Err(StudyError::at(
                        format!("personas[{i}].refusal_message"),
                        "the fact persona needs a refusal message",
                    ));
                }
                PersonaRole::Deliberative if persona.max_followup_questions.is_none() => {
                    return Err(StudyError::at(
                        format!("personas[{i}].max_followup_questions"),
                        "the deliberative persona needs a follow-up question cap",
                    ));
                }
                _ => {}
            }
        }
        for role in [PersonaRole::Fact, PersonaRole::Deliberative] {
            if roles.get(&role).copied().unwrap_or(0) != 1 {
                return Err(StudyError::at("personas", format!("exactly one {role:?} persona required")));
            }
        }

        let mut questionnaire_ids = HashSet::new();
        for (i, q) in self.questionnaires.iter().enumerate() {
            if !questionnaire_ids.insert(q.questionnaire_id.as_str()) {
                return Err(StudyError::at(
                    format!("questionnaires[{i}].questionnaire_id"),
                    format!("duplicate questionnaire id `{}`", q.questionnaire_id),
                ));
            }
            if !q.stage.is_questionnaire() {
                return Err(StudyError::at(
                    format!("questionnaires[{i}].stage"),
                    format!("{:?} is not a questionnaire stage", q.stage),
                ));
            }
            let mut item_ids = HashSet::new();
            for (j, item) in q.items.iter().enumerate() {
                if !item_ids.insert(item.item_id.as_str()) {
                    return Err(StudyError::at(
                        format!("questionnaires[{i}].items[{j}].item_id"),
                        format!("duplicate item id `{}`", item.item_id),
                    ));
                }
                if item.options.is_empty() {
                    return Err(StudyError::at(
                        format!("questionnaires[{i}].items[{j}].options"),
                        "option list must not be empty",
                    ));
                }
            }
        }
        Ok(())
    }
}

/// The closed set of citable facts, indexed by fact id and by block id.
#[derive(Debug, Clone, PartialEq)]
pub struct FactPackage {
    facts: Vec<FactEntry>,
    by_id: HashMap<String, usize>,
    by_block: Vec<(String, Vec<usize>)>,
}

impl FactPackage {
    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    pub fn facts(&self) -> &[FactEntry] {
        &self.facts
    }

    pub fn get(&self, fact_id: &str) -> Option<&FactEntry> {
        self.by_id.get(fact_id).map(|&i| &self.facts[i])
    }

    /// Position of a fact in package order.
    pub fn position(&self, fact_id: &str) -> Option<usize> {
        self.by_id.get(fact_id).copied()
    }

    pub fn for_block(&self, block_id: &str) -> Vec<&FactEntry> {
        self.by_block
            .iter()
            .find(|(b, _)| b == block_id)
            .map(|(_, idx)| idx.iter().map(|&i| &self.facts[i]).collect())
            .unwrap_or_default()
    }

    /// One line per fact with its citation, in package order.
    pub fn digest(&self) -> String {
        self.facts
            .iter()
            .map(|f| format!("- [{}] {} (Source: {})", f.fact_id, f.text, f.source_label))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Collects the study's facts in block order, then declaration order.
pub fn build_fact_package(study: &StudyDefinition) -> FactPackage {
    let mut facts = Vec::with_capacity(study.facts.len());
    let mut by_block = Vec::with_capacity(study.blocks.len());
    for block in &study.blocks {
        let mut idx = Vec::new();
        for fact in study.facts.iter().filter(|f| f.block_id == block.block_id) {
            idx.push(facts.len());
            facts.push(fact.clone());
        }
        by_block.push((block.block_id.clone(), idx));
    }
    let by_id = facts.iter().enumerate().map(|(i, f)| (f.fact_id.clone(), i)).collect();
    FactPackage { facts, by_id, by_block }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> serde_json::Value {
        serde_json::json!({
            "schema_version": 1,
            "study_id": "mini",
            "title": "Mini",
            "categories": ["a"],
            "blocks": [{
                "block_id": "a", "title": "A", "narration_script": "Look here.",
                "media_treatment": ["https://v.example/a.mp4"],
                "media_control": ["https://i.example/a.jpg"],
                "body_control": "Text."
            }],
            "facts": [{"fact_id": "a1", "block_id": "a", "text": "Fact one.", "source_label": "Doc"}],
            "personas": [
                {"persona_id": "flo", "role": "fact", "display_name": "Flo",
                 "system_template": "{facts} {history}", "greeting": "Hi.", "refusal_message": "No opinions."},
                {"persona_id": "gus", "role": "deliberative", "display_name": "Gus",
                 "system_template": "{facts} {history}", "greeting": "Hi.", "max_followup_questions": 1}
            ],
            "questionnaires": []
        })
    }

    fn load(v: &serde_json::Value) -> Result<StudyDefinition, StudyError> {
        load_study(&v.to_string())
    }

    fn path_of(err: StudyError) -> String {
        match err {
            StudyError::Validation { path, .. } => path,
            other => panic!("expected validation error, got {other}"),
        }
    }

    #[test]
    fn fixture_loads_with_six_blocks() {
        let study = lausanne_fixture();
        assert_eq!(study.blocks.len(), 6);
        assert_eq!(
            study.categories,
            ["residents", "traffic", "parking", "canopy", "biodiversity", "sponge"]
        );
    }

    #[test]
    fn zero_blocks_rejected_at_blocks() {
        let mut v = minimal();
        v["blocks"] = serde_json::json!([]);
        v["categories"] = serde_json::json!([]);
        v["facts"] = serde_json::json!([]);
        assert_eq!(path_of(load(&v).unwrap_err()), "blocks");
    }

    #[test]
    fn dangling_fact_names_the_fact() {
        let mut v = minimal();
        v["facts"][0]["block_id"] = "water".into();
        let err = load(&v).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("facts[0].block_id"), "{msg}");
        assert!(msg.contains("a1") && msg.contains("water"), "{msg}");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v = minimal();
        v["extra"] = true.into();
        assert!(matches!(load(&v), Err(StudyError::Parse(_))));
        let mut v = minimal();
        v["blocks"][0]["colour"] = "red".into();
        assert!(matches!(load(&v), Err(StudyError::Parse(_))));
    }

    #[test]
    fn malformed_document_is_parse_error() {
        assert!(matches!(load_study("{not json"), Err(StudyError::Parse(_))));
    }

    #[test]
    fn persona_contracts_checked() {
        let mut v = minimal();
        v["personas"][0]["refusal_message"] = serde_json::Value::Null;
        assert_eq!(path_of(load(&v).unwrap_err()), "personas[0].refusal_message");

        let mut v = minimal();
        v["personas"][1]["max_followup_questions"] = serde_json::Value::Null;
        assert_eq!(path_of(load(&v).unwrap_err()), "personas[1].max_followup_questions");

        let mut v = minimal();
        v["personas"][1]["role"] = "fact".into();
        v["personas"][1]["refusal_message"] = "x".into();
        assert_eq!(path_of(load(&v).unwrap_err()), "personas");
    }

    #[test]
    fn categories_must_match_blocks() {
        let mut v = minimal();
        v["categories"] = serde_json::json!(["b"]);
        assert_eq!(path_of(load(&v).unwrap_err()), "categories");
    }

    #[test]
    fn relative_media_urls_rejected() {
        let mut v = minimal();
        v["blocks"][0]["media_control"] = serde_json::json!(["/img/a.jpg"]);
        assert_eq!(path_of(load(&v).unwrap_err()), "blocks[0].media_control[0]");
    }

    #[test]
    fn anchor_notes_must_reference_facts() {
        let mut v = minimal();
        v["blocks"][0]["anchor_notes"] = serde_json::json!([{"landmark": "bench", "fact_id": "zz"}]);
        assert_eq!(path_of(load(&v).unwrap_err()), "blocks[0].anchor_notes[0].fact_id");
    }

    #[test]
    fn questionnaire_items_checked() {
        let mut v = minimal();
        v["questionnaires"] = serde_json::json!([{
            "questionnaire_id": "q", "stage": "format_eval",
            "items": [{"item_id": "x", "prompt": "?", "options": []}]
        }]);
        assert_eq!(path_of(load(&v).unwrap_err()), "questionnaires[0].items[0].options");
        v["questionnaires"][0]["stage"] = "recall".into();
        assert_eq!(path_of(load(&v).unwrap_err()), "questionnaires[0].stage");
    }

    #[test]
    fn sponge_block_renders_per_arm() {
        let study = lausanne_fixture();
        let sponge = study.block("sponge").unwrap();
        assert!(sponge.narration_script.contains("ten bathtubs"));
        match render_block(sponge, Arm::Treatment).unwrap() {
            DeliveryPayload::Video { video_urls, transcript, .. } => {
                assert!(!video_urls.is_empty());
                assert!(transcript.is_none());
            }
            other => panic!("unexpected {other:?}"),
        }
        match render_block(sponge, Arm::Control).unwrap() {
            DeliveryPayload::TextImages { image_urls, body, .. } => {
                assert!(!image_urls.is_empty());
                assert!(!body.is_empty());
            }
            other => panic!("unexpected {other:?}"),
        }
        let t = render_block_with(sponge, Arm::Treatment, true).unwrap();
        assert!(matches!(t, DeliveryPayload::Video { transcript: Some(_), .. }));
    }

    #[test]
    fn both_arms_share_id_and_title() {
        let study = lausanne_fixture();
        for block in &study.blocks {
            let t = render_block(block, Arm::Treatment).unwrap();
            let c = render_block(block, Arm::Control).unwrap();
            assert_eq!(t.block_id(), c.block_id());
            assert_eq!(t.title(), c.title());
        }
    }

    #[test]
    fn empty_control_media_is_missing_variant() {
        let mut block = lausanne_fixture().blocks[0].clone();
        block.media_control.clear();
        assert_eq!(
            render_block(&block, Arm::Control),
            Err(RenderError::MissingVariant { block_id: block.block_id.clone(), arm: Arm::Control })
        );
        assert!(render_block(&block, Arm::Treatment).is_ok());
    }

    #[test]
    fn fact_package_from_fixture() {
        let study = lausanne_fixture();
        let package = build_fact_package(&study);
        assert_eq!(package.len(), study.facts.len());
        let wanted = "layer 30 centimeters deep can hold up to 2,000 liters";
        assert!(package.facts().iter().any(|f| f.text.to_lowercase().contains(wanted)));
        for fact in package.facts() {
            assert_eq!(package.get(&fact.fact_id), Some(fact));
            assert!(package.for_block(&fact.block_id).contains(&fact));
        }
        // block order first
        let blocks: Vec<usize> = package
            .facts()
            .iter()
            .map(|f| study.blocks.iter().position(|b| b.block_id == f.block_id).unwrap())
            .collect();
        assert!(blocks.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn fact_package_keys_on_ids() {
        let mut v = minimal();
        let study = load(&v).unwrap();
        assert_eq!(build_fact_package(&study).len(), 1);

        v["facts"] = serde_json::json!([
            {"fact_id": "a1", "block_id": "a", "text": "Same.", "source_label": "Doc"},
            {"fact_id": "a2", "block_id": "a", "text": "Same.", "source_label": "Doc"}
        ]);
        let package = build_fact_package(&load(&v).unwrap());
        assert_eq!(package.len(), 2);
        assert!(package.get("a1").is_some() && package.get("a2").is_some());
    }

    #[test]
    fn fixture_round_trips() {
        let study = lausanne_fixture();
        assert_eq!(load_study(&study.to_json()).unwrap(), study);
    }
}

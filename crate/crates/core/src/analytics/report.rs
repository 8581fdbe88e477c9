//! The analysis report over a set of session snapshots.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::codebook::{apply_codebook, bundled_codebooks, Codebook, CodebookError};
use super::recall::{recall_metrics, RecallError};
use super::sentiment::{comment_corpus, sentiment_distribution, LexiconClassifier, SentimentClassifier, SentimentError};
use super::stats::{
    chi_square_uniform, fisher_exact, mean, permutation_test_means, ContingencyTable2x2, DEFAULT_RESAMPLES,
};
use super::tags::tag_diff_filter;
use crate::participation::{tally_approval, tally_overall, tally_rank, ParticipationError};
use crate::persona::Author;
use crate::session::{Arm, Stage};
use crate::store::{AuditRecord, ResponseRecord};
use crate::study::{PersonaRole, StudyDefinition};
use crate::{
    ApprovalTally, OverallTally, PermutationResult, RankTally, SentimentDistribution, TagDiff, TestResult,
};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no completed sessions")]
    NoCompletedSessions,
    #[error(transparent)]
    Recall(#[from] RecallError),
    #[error(transparent)]
    Ballot(#[from] ParticipationError),
    #[error(transparent)]
    Sentiment(#[from] SentimentError),
    #[error(transparent)]
    Codebook(#[from] CodebookError),
}

#[derive(Debug, Clone)]
pub struct ReportOptions {
    pub resamples: usize,
    pub seed: u64,
    pub codebooks: Vec<Codebook>,
    /// Add the bundled public-comment corpus to the sentiment section.
    pub comparison_corpus: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self { resamples: DEFAULT_RESAMPLES, seed: 7, codebooks: bundled_codebooks(), comparison_corpus: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSizes {
    pub treatment: usize,
    pub control: usize,
    pub incomplete: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallSummary {
    pub n: usize,
    pub mean_words: f64,
    pub mean_overlap: f64,
    pub mean_overlap_by_block: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockMention {
    pub code: String,
    pub treatment: u64,
    pub control: u64,
    pub test: Option<TestResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallSection {
    pub by_arm: BTreeMap<Arm, RecallSummary>,
    pub word_count_test: Option<PermutationResult>,
    pub overlap_test: Option<PermutationResult>,
    /// Fisher test per recall code, present/absent by arm.
    pub mentions: Vec<BlockMention>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormatItem {
    pub item_id: String,
    pub options: Vec<String>,
    pub counts: Vec<u64>,
    pub shares: Vec<f64>,
    pub test: Option<TestResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VotingSummary {
    pub approval: ApprovalTally,
    pub rank: RankTally,
    pub overall: OverallTally,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentimentSection {
    pub consultation: Option<SentimentDistribution>,
    pub chat: Option<SentimentDistribution>,
    pub comparison_corpus: Option<SentimentDistribution>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundednessSummary {
    pub fact_turns: usize,
    pub fact_flagged: usize,
    pub deliberative_turns: usize,
    pub deliberative_flagged: usize,
    pub audit_records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Engagement {
    pub persona_id: String,
    pub display_name: String,
    pub sessions: usize,
    pub questions: usize,
    pub mean_questions: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub study_id: String,
    pub completed_sessions: usize,
    pub caveats: Vec<String>,
    pub arm_sizes: ArmSizes,
    pub recall: RecallSection,
    pub format_preference: Vec<FormatItem>,
    /// Keyed by `all`, `treatment` and `control`.
    pub voting: BTreeMap<String, VotingSummary>,
    /// Keyed by free-text field.
    pub tag_diffs: BTreeMap<String, Vec<TagDiff>>,
    pub sentiment: SentimentSection,
    pub groundedness: GroundednessSummary,
    pub engagement: Vec<Engagement>,
}

fn field_text(r: &ResponseRecord, study: &StudyDefinition, field: &str) -> String {
    let chat = |role: PersonaRole| {
        let persona = study.persona_by_role(role);
        r.conversation(&persona.persona_id)
            .map(|c| {
                c.turns
                    .iter()
                    .filter(|t| t.author == Author::Participant)
                    .map(|t| t.text.as_str())
                    .collect::<Vec<_>>()
                    .join("\n")
            })
            .unwrap_or_default()
    };
    match field {
        "recall" => r.recall.clone().unwrap_or_default(),
        "consultation" => r.consultation.clone().unwrap_or_default(),
        "flo_chat" | "fact_chat" => chat(PersonaRole::Fact),
        "gustavo_chat" | "deliberative_chat" => chat(PersonaRole::Deliberative),
        _ => String::new(),
    }
}

/// Per-arm counts of sessions whose text in `field` carries each code.
fn code_counts(
    records: &[&ResponseRecord],
    study: &StudyDefinition,
    codebook: &Codebook,
) -> Result<BTreeMap<Arm, BTreeMap<String, u64>>, CodebookError> {
    let responses: Vec<(String, String)> = records
        .iter()
        .map(|r| (r.session.session_id.clone(), field_text(r, study, &codebook.field)))
        .collect();
    let (coded, _) = apply_codebook(&responses, codebook, None, 0)?;
    let mut out: BTreeMap<Arm, BTreeMap<String, u64>> = BTreeMap::new();
    for arm in [Arm::Treatment, Arm::Control] {
        out.insert(arm, codebook.codes.iter().map(|c| (c.code_id.clone(), 0)).collect());
    }
    for (r, c) in records.iter().zip(coded) {
        let counts = out.get_mut(&r.session.arm).expect("both arms present");
        for code in c.codes {
            *counts.entry(code).or_default() += 1;
        }
    }
    Ok(out)
}

fn mean_or_zero(xs: &[f64]) -> f64 {
    mean(xs).unwrap_or(0.0)
}

pub fn build_report(
    study: &StudyDefinition,
    records: &[ResponseRecord],
    audit: &[AuditRecord],
    options: &ReportOptions,
) -> Result<Report, ReportError> {
    let completed: Vec<&ResponseRecord> = records.iter().filter(|r| r.session.completed).collect();
    if completed.is_empty() {
        return Err(ReportError::NoCompletedSessions);
    }
    let of_arm = |arm: Arm| completed.iter().copied().filter(move |r| r.session.arm == arm);
    let arm_sizes = ArmSizes {
        treatment: of_arm(Arm::Treatment).count(),
        control: of_arm(Arm::Control).count(),
        incomplete: records.len() - completed.len(),
    };
    let both_arms = arm_sizes.treatment > 0 && arm_sizes.control > 0;
    let mut caveats = Vec::new();
    if !both_arms {
        caveats.push("only one arm has completed sessions; between-group tests are omitted".to_string());
    }
    if completed.len() < 10 {
        caveats.push(format!("only {} completed sessions", completed.len()));
    }

    // recall
    let mut by_arm = BTreeMap::new();
    let mut words: BTreeMap<Arm, Vec<f64>> = BTreeMap::new();
    let mut overlaps: BTreeMap<Arm, Vec<f64>> = BTreeMap::new();
    for arm in [Arm::Treatment, Arm::Control] {
        let metrics = of_arm(arm)
            .map(|r| {
                recall_metrics::<f64>(study, arm, &r.session.session_id, r.recall.as_deref().unwrap_or(""))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if metrics.is_empty() {
            continue;
        }
        let w: Vec<f64> = metrics.iter().map(|m| m.word_count as f64).collect();
        let o: Vec<f64> = metrics.iter().map(|m| m.overlap_total).collect();
        let by_block = study
            .blocks
            .iter()
            .map(|b| {
                let xs: Vec<f64> = metrics.iter().map(|m| m.overlap_by_block[&b.block_id]).collect();
                (b.block_id.clone(), mean_or_zero(&xs))
            })
            .collect();
        by_arm.insert(
            arm,
            RecallSummary { n: metrics.len(), mean_words: mean_or_zero(&w), mean_overlap: mean_or_zero(&o), mean_overlap_by_block: by_block },
        );
        words.insert(arm, w);
        overlaps.insert(arm, o);
    }
    let perm = |m: &BTreeMap<Arm, Vec<f64>>| {
        both_arms
            .then(|| permutation_test_means(&m[&Arm::Treatment], &m[&Arm::Control], options.resamples, options.seed).ok())
            .flatten()
    };
    let mut mentions = Vec::new();
    let mut tag_diffs = BTreeMap::new();
    for book in &options.codebooks {
        let counts = code_counts(&completed, study, book)?;
        let (t, c) = (&counts[&Arm::Treatment], &counts[&Arm::Control]);
        if book.field == "recall" {
            for code in &book.codes {
                let (ct, cc) = (t[&code.code_id], c[&code.code_id]);
                mentions.push(BlockMention {
                    code: code.code_id.clone(),
                    treatment: ct,
                    control: cc,
                    test: both_arms.then(|| {
                        fisher_exact(ContingencyTable2x2::from_counts(
                            ct,
                            arm_sizes.treatment as u64,
                            cc,
                            arm_sizes.control as u64,
                        ))
                    }),
                });
            }
        } else {
            tag_diffs.insert(
                book.field.clone(),
                tag_diff_filter(t, c, arm_sizes.treatment as u64, arm_sizes.control as u64),
            );
        }
    }
    let recall = RecallSection { by_arm, word_count_test: perm(&words), overlap_test: perm(&overlaps), mentions };

    // format preference
    let mut format_preference = Vec::new();
    for q in study.questionnaires_for(Stage::FormatEval) {
        for item in &q.items {
            let counts: Vec<u64> = item
                .options
                .iter()
                .map(|o| completed.iter().filter(|r| r.answer(&q.questionnaire_id, &item.item_id) == Some(o)).count() as u64)
                .collect();
            let total: u64 = counts.iter().sum();
            format_preference.push(FormatItem {
                item_id: item.item_id.clone(),
                options: item.options.clone(),
                shares: counts.iter().map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 }).collect(),
                test: (total > 0).then(|| chi_square_uniform(&counts).ok()).flatten(),
                counts,
            });
        }
    }

    // voting
    let mut voting = BTreeMap::new();
    let groups: [(&str, Vec<&ResponseRecord>); 3] = [
        ("all", completed.clone()),
        ("treatment", of_arm(Arm::Treatment).collect()),
        ("control", of_arm(Arm::Control).collect()),
    ];
    for (key, group) in groups {
        let approvals: Vec<_> = group.iter().filter_map(|r| r.approval.clone()).collect();
        let ranks: Vec<_> = group.iter().filter_map(|r| r.rank.clone()).collect();
        let overall: Vec<_> = group.iter().filter_map(|r| r.overall).collect();
        if approvals.is_empty() || ranks.is_empty() || overall.is_empty() {
            continue;
        }
        let approval = tally_approval(&approvals, &study.categories)?;
        let rank = tally_rank(&ranks, &study.categories, Some(&approval))?;
        voting.insert(key.to_string(), VotingSummary { approval, rank, overall: tally_overall(&overall)? });
    }

    // sentiment
    let classifier = LexiconClassifier;
    let distribution = |texts: Vec<String>| -> Result<Option<SentimentDistribution>, SentimentError> {
        if texts.is_empty() {
            return Ok(None);
        }
        sentiment_distribution(&texts, &classifier as &dyn SentimentClassifier).map(Some)
    };
    let consultation: Vec<String> = completed
        .iter()
        .filter_map(|r| r.consultation.clone())
        .filter(|t| !t.trim().is_empty())
        .collect();
    let chat: Vec<String> = completed
        .iter()
        .flat_map(|r| r.conversations.iter())
        .flat_map(|c| c.turns.iter().filter(|t| t.author == Author::Participant).map(|t| t.text.clone()))
        .collect();
    let sentiment = SentimentSection {
        consultation: distribution(consultation)?,
        chat: distribution(chat)?,
        comparison_corpus: if options.comparison_corpus {
            distribution(comment_corpus().into_iter().map(|c| c.text).collect())?
        } else {
            None
        },
    };

    // groundedness over all sessions, completed or not
    let mut groundedness = GroundednessSummary {
        fact_turns: 0,
        fact_flagged: 0,
        deliberative_turns: 0,
        deliberative_flagged: 0,
        audit_records: audit.len(),
    };
    for r in records {
        for c in &r.conversations {
            let Some(p) = study.persona(&c.persona_id) else { continue };
            for t in c.persona_turns() {
                match p.role {
                    PersonaRole::Fact => {
                        groundedness.fact_turns += 1;
                        groundedness.fact_flagged += usize::from(t.is_flagged());
                    }
                    PersonaRole::Deliberative => {
                        groundedness.deliberative_turns += 1;
                        groundedness.deliberative_flagged += usize::from(t.is_flagged());
                    }
                }
            }
        }
    }

    let engagement = study
        .personas
        .iter()
        .map(|p| {
            let counts: Vec<usize> = completed.iter().map(|r| r.participant_turns(&p.persona_id)).collect();
            let questions: usize = counts.iter().sum();
            Engagement {
                persona_id: p.persona_id.clone(),
                display_name: p.display_name.clone(),
                sessions: counts.len(),
                questions,
                mean_questions: questions as f64 / counts.len() as f64,
            }
        })
        .collect();

    Ok(Report {
        study_id: study.study_id.clone(),
        completed_sessions: completed.len(),
        caveats,
        arm_sizes,
        recall,
        format_preference,
        voting,
        tag_diffs,
        sentiment,
        groundedness,
        engagement,
    })
}

fn pct(x: f64) -> String {
    format!("{:.1}%", 100.0 * x)
}

fn p_fmt(p: f64) -> String {
    if p < 0.001 {
        "< 0.001".to_string()
    } else {
        format!("{p:.3}")
    }
}

fn p_label(p: f64) -> String {
    if p < 0.001 {
        "p < 0.001".to_string()
    } else {
        format!("p = {p:.3}")
    }
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn engagement_of(&self, persona_id: &str) -> Option<&Engagement> {
        self.engagement.iter().find(|e| e.persona_id == persona_id)
    }

    pub fn to_markdown(&self) -> String {
        let mut md = String::new();
        let _ = writeln!(md, "# Report: {}\n", self.study_id);
        let _ = writeln!(md, "Completed sessions: {}\n", self.completed_sessions);
        for c in &self.caveats {
            let _ = writeln!(md, "> Note: {c}");
        }

        let a = &self.arm_sizes;
        let _ = writeln!(md, "\n## Arm sizes\n\n| Arm | Completed |\n|---|---|");
        let _ = writeln!(md, "| treatment | {} |\n| control | {} |\n| incomplete | {} |", a.treatment, a.control, a.incomplete);

        let _ = writeln!(md, "\n## Recall\n\n| Arm | n | Mean words | Mean overlap |\n|---|---|---|---|");
        for (arm, s) in &self.recall.by_arm {
            let _ = writeln!(md, "| {arm} | {} | {:.1} | {} |", s.n, s.mean_words, pct(s.mean_overlap));
        }
        if let Some(t) = &self.recall.word_count_test {
            let _ = writeln!(md, "\nWord count difference {:.2}, permutation {}", t.observed_diff, p_label(t.p_value));
        }
        if let Some(t) = &self.recall.overlap_test {
            let _ = writeln!(md, "Overlap difference {}, permutation {}", pct(t.observed_diff), p_label(t.p_value));
        }
        if !self.recall.mentions.is_empty() {
            let _ = writeln!(md, "\n| Part mentioned | Treatment | Control | Fisher p |\n|---|---|---|---|");
            for m in &self.recall.mentions {
                let p = m.test.map(|t| p_fmt(t.p_value)).unwrap_or_else(|| "-".into());
                let _ = writeln!(md, "| {} | {} | {} | {p} |", m.code, m.treatment, m.control);
            }
        }

        let _ = writeln!(md, "\n## Format preference\n\n| Item | Shares | Chi-square | p |\n|---|---|---|---|");
        for f in &self.format_preference {
            let shares: Vec<String> = f.options.iter().zip(&f.shares).map(|(o, s)| format!("{o} {}", pct(*s))).collect();
            let (stat, p) = match &f.test {
                Some(t) => (format!("{:.2}", t.statistic.unwrap_or(0.0)), p_fmt(t.p_value)),
                None => ("-".into(), "-".into()),
            };
            let _ = writeln!(md, "| {} | {} | {stat} | {p} |", f.item_id, shares.join(", "));
        }

        let _ = writeln!(md, "\n## Voting");
        for (group, v) in &self.voting {
            let _ = writeln!(
                md,
                "\n### {group}\n\nOverall yes {} of {} ({}); mean approval {}\n\n| Rank | Part | Mean rank | Approved |\n|---|---|---|---|",
                v.overall.yes,
                v.overall.votes,
                pct(v.overall.yes_rate),
                pct(v.approval.overall_approval)
            );
            for (i, r) in v.rank.order.iter().enumerate() {
                let _ = writeln!(md, "| {} | {} | {:.2} | {} |", i + 1, r.category, r.mean_rank, pct(r.approve_rate.unwrap_or(0.0)));
            }
        }

        let _ = writeln!(md, "\n## Code differences");
        for (field, rows) in &self.tag_diffs {
            let _ = writeln!(md, "\n### {field}\n\n| Code | Treatment | Control | Selected | p |\n|---|---|---|---|---|");
            for r in rows {
                let p = r.p_value.map(p_fmt).unwrap_or_else(|| "-".into());
                let star = if r.significant { " *" } else { "" };
                let _ = writeln!(md, "| {} | {} | {} | {} | {p}{star} |", r.code, r.count_treatment, r.count_control, r.selected);
            }
        }

        let _ = writeln!(md, "\n## Sentiment\n\n| Corpus | n | Negative | Neutral | Positive |\n|---|---|---|---|---|");
        for (name, d) in [
            ("consultation", &self.sentiment.consultation),
            ("chat", &self.sentiment.chat),
            ("public comments", &self.sentiment.comparison_corpus),
        ] {
            if let Some(d) = d {
                let _ = writeln!(md, "| {name} | {} | {} | {} | {} |", d.n, pct(d.negative), pct(d.neutral), pct(d.positive));
            }
        }

        let g = &self.groundedness;
        let _ = writeln!(
            md,
            "\n## Groundedness\n\nFact persona: {} of {} turns flagged ({} audit records). Deliberative persona: {} of {} turns flagged.",
            g.fact_flagged, g.fact_turns, g.audit_records, g.deliberative_flagged, g.deliberative_turns
        );

        let _ = writeln!(md, "\n## Engagement\n\n| Persona | Sessions | Questions | Mean |\n|---|---|---|---|");
        for e in &self.engagement {
            let _ = writeln!(md, "| {} | {} | {} | {:.2} |", e.display_name, e.sessions, e.questions, e.mean_questions);
        }
        md
    }
}

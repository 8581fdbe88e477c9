//! The three voting instruments: per-category approval grades, a complete
//! ranking of the categories, and an overall yes/no vote.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Scalar;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParticipationError {
    #[error("ballot is incomplete: missing {0}")]
    IncompleteBallot(String),
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
    #[error("category `{0}` ranked more than once")]
    DuplicateRank(String),
    #[error("nothing to tally")]
    EmptyTally,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApprovalGrade {
    Approved,
    Neutral,
    Disapproved,
}

/// One grade per configured category.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ApprovalBallot(pub BTreeMap<String, ApprovalGrade>);

/// Categories from best (rank 1) to worst.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RankBallot(pub Vec<String>);

impl RankBallot {
    /// 1-based rank of `category`.
    pub fn rank_of(&self, category: &str) -> Option<usize> {
        self.0.iter().position(|c| c == category).map(|i| i + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverallVote {
    Yes,
    No,
}

#[derive(Debug, Clone, Copy)]
pub enum Ballot<'a> {
    Approval(&'a ApprovalBallot),
    Rank(&'a RankBallot),
    Overall(OverallVote),
}

pub fn validate_ballot(ballot: Ballot<'_>, categories: &[String]) -> Result<(), ParticipationError> {
    match ballot {
        Ballot::Approval(b) => validate_approval(b, categories),
        Ballot::Rank(b) => validate_rank(b, categories),
        Ballot::Overall(_) => Ok(()),
    }
}

pub fn validate_approval(ballot: &ApprovalBallot, categories: &[String]) -> Result<(), ParticipationError> {
    if let Some(unknown) = ballot.0.keys().find(|k| !categories.contains(k)) {
        return Err(ParticipationError::UnknownCategory(unknown.clone()));
    }
    let missing: Vec<&str> = categories
        .iter()
        .filter(|c| !ballot.0.contains_key(*c))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(ParticipationError::IncompleteBallot(missing.join(", ")));
    }
    Ok(())
}

pub fn validate_rank(ballot: &RankBallot, categories: &[String]) -> Result<(), ParticipationError> {
    let mut seen = HashSet::new();
    for c in &ballot.0 {
        if !seen.insert(c.as_str()) {
            return Err(ParticipationError::DuplicateRank(c.clone()));
        }
    }
    if let Some(unknown) = ballot.0.iter().find(|c| !categories.contains(c)) {
        return Err(ParticipationError::UnknownCategory(unknown.clone()));
    }
    let missing: Vec<&str> = categories
        .iter()
        .filter(|c| !seen.contains(c.as_str()))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(ParticipationError::IncompleteBallot(missing.join(", ")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryApproval<F> {
    pub category: String,
    pub approved: usize,
    pub neutral: usize,
    pub disapproved: usize,
    pub approve_rate: F,
    pub neutral_rate: F,
    pub disapprove_rate: F,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApprovalTally<F> {
    pub ballots: usize,
    pub categories: Vec<CategoryApproval<F>>,
    /// Mean of the per-category approval rates.
    pub overall_approval: F,
}

impl<F: Scalar> ApprovalTally<F> {
    pub fn approve_rate(&self, category: &str) -> Option<F> {
        self.categories.iter().find(|c| c.category == category).map(|c| c.approve_rate)
    }
}

/// Per-category grade shares. Neutral counts toward neither side.
pub fn tally_approval<F: Scalar>(
    ballots: &[ApprovalBallot],
    categories: &[String],
) -> Result<ApprovalTally<F>, ParticipationError> {
    if ballots.is_empty() {
        return Err(ParticipationError::EmptyTally);
    }
    for b in ballots {
        validate_approval(b, categories)?;
    }
    let n = F::of_usize(ballots.len());
    let rows: Vec<CategoryApproval<F>> = categories
        .iter()
        .map(|cat| {
            let count = |g: ApprovalGrade| ballots.iter().filter(|b| b.0.get(cat) == Some(&g)).count();
            let (approved, neutral, disapproved) =
                (count(ApprovalGrade::Approved), count(ApprovalGrade::Neutral), count(ApprovalGrade::Disapproved));
            CategoryApproval {
                category: cat.clone(),
                approved,
                neutral,
                disapproved,
                approve_rate: F::of_usize(approved) / n,
                neutral_rate: F::of_usize(neutral) / n,
                disapprove_rate: F::of_usize(disapproved) / n,
            }
        })
        .collect();
    let overall_approval = if rows.is_empty() {
        F::zero()
    } else {
        rows.iter().fold(F::zero(), |acc, r| acc + r.approve_rate) / F::of_usize(rows.len())
    };
    Ok(ApprovalTally { ballots: ballots.len(), categories: rows, overall_approval })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCategory<F> {
    pub category: String,
    pub mean_rank: F,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub approve_rate: Option<F>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTally<F> {
    pub ballots: usize,
    /// Best first.
    pub order: Vec<RankedCategory<F>>,
}

impl<F> RankTally<F> {
    pub fn categories(&self) -> Vec<&str> {
        self.order.iter().map(|r| r.category.as_str()).collect()
    }
}

/// Orders categories by ascending mean rank. Equal mean ranks fall back to
/// the higher approval rate (when a tally over the same sessions is given),
/// then to the category id.
pub fn tally_rank<F: Scalar>(
    ballots: &[RankBallot],
    categories: &[String],
    approval: Option<&ApprovalTally<F>>,
) -> Result<RankTally<F>, ParticipationError> {
    if ballots.is_empty() {
        return Err(ParticipationError::EmptyTally);
    }
    for b in ballots {
        validate_rank(b, categories)?;
    }
    // Integer rank sums compare exactly; all categories share the same divisor.
    let mut rows: Vec<(String, usize)> = categories
        .iter()
        .map(|cat| {
            let sum = ballots.iter().map(|b| b.rank_of(cat).expect("validated")).sum();
            (cat.clone(), sum)
        })
        .collect();
    let approve = |cat: &str| approval.and_then(|a| a.approve_rate(cat));
    rows.sort_by(|(ca, sa), (cb, sb)| {
        sa.cmp(sb)
            .then_with(|| {
                let (ra, rb) = (approve(ca).unwrap_or(F::zero()), approve(cb).unwrap_or(F::zero()));
                rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
            })
            .then_with(|| ca.cmp(cb))
    });
    let n = F::of_usize(ballots.len());
    let order = rows
        .into_iter()
        .map(|(category, sum)| RankedCategory {
            mean_rank: F::of_usize(sum) / n,
            approve_rate: approve(&category),
            category,
        })
        .collect();
    Ok(RankTally { ballots: ballots.len(), order })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallTally<F> {
    pub votes: usize,
    pub yes: usize,
    pub no: usize,
    pub yes_rate: F,
    pub no_rate: F,
}

pub fn tally_overall<F: Scalar>(votes: &[OverallVote]) -> Result<OverallTally<F>, ParticipationError> {
    if votes.is_empty() {
        return Err(ParticipationError::EmptyTally);
    }
    let yes = votes.iter().filter(|v| **v == OverallVote::Yes).count();
    let no = votes.len() - yes;
    let n = F::of_usize(votes.len());
    Ok(OverallTally { votes: votes.len(), yes, no, yes_rate: F::of_usize(yes) / n, no_rate: F::of_usize(no) / n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cats() -> Vec<String> {
        ["residents", "traffic", "parking", "canopy", "biodiversity", "sponge"].map(String::from).to_vec()
    }

    fn approval_all(grade: ApprovalGrade) -> ApprovalBallot {
        ApprovalBallot(cats().into_iter().map(|c| (c, grade)).collect())
    }

    fn rank(order: &[&str]) -> RankBallot {
        RankBallot(order.iter().map(|s| s.to_string()).collect())
    }

    #[test]
    fn approval_ballot_validation() {
        assert_eq!(validate_ballot(Ballot::Approval(&approval_all(ApprovalGrade::Neutral)), &cats()), Ok(()));
        let mut partial = approval_all(ApprovalGrade::Approved);
        partial.0.remove("sponge");
        assert!(matches!(validate_approval(&partial, &cats()), Err(ParticipationError::IncompleteBallot(m)) if m == "sponge"));
        partial.0.insert("water".into(), ApprovalGrade::Approved);
        assert_eq!(validate_approval(&partial, &cats()), Err(ParticipationError::UnknownCategory("water".into())));
    }

    #[test]
    fn rank_ballot_validation() {
        let five = rank(&["residents", "traffic", "parking", "canopy", "biodiversity"]);
        assert!(matches!(validate_ballot(Ballot::Rank(&five), &cats()), Err(ParticipationError::IncompleteBallot(_))));
        let dup = rank(&["residents", "parking", "parking", "canopy", "biodiversity", "sponge"]);
        assert_eq!(validate_rank(&dup, &cats()), Err(ParticipationError::DuplicateRank("parking".into())));
        let full = rank(&["sponge", "residents", "traffic", "parking", "canopy", "biodiversity"]);
        assert_eq!(validate_rank(&full, &cats()), Ok(()));
        let unknown = rank(&["sponge", "residents", "traffic", "parking", "canopy", "water"]);
        assert_eq!(validate_rank(&unknown, &cats()), Err(ParticipationError::UnknownCategory("water".into())));
        assert_eq!(validate_ballot(Ballot::Overall(OverallVote::No), &cats()), Ok(()));
    }

    #[test]
    fn all_approved() {
        let t = tally_approval::<f64>(&[approval_all(ApprovalGrade::Approved), approval_all(ApprovalGrade::Approved)], &cats())
            .unwrap();
        assert!(t.categories.iter().all(|c| c.approve_rate == 1.0));
        assert_eq!(t.overall_approval, 1.0);
    }

    #[test]
    fn three_of_four_approved() {
        let mut ballots = vec![approval_all(ApprovalGrade::Approved); 3];
        ballots.push(approval_all(ApprovalGrade::Disapproved));
        let t = tally_approval::<f64>(&ballots, &cats()).unwrap();
        for c in &t.categories {
            assert_eq!(c.approve_rate, 0.75);
            assert_eq!(c.disapprove_rate, 0.25);
        }
        assert_eq!(t.overall_approval, 0.75);
    }

    #[test]
    fn engineered_84_percent() {
        // 21 of 25 approve every category; the rest split neutral/disapproved.
        let mut ballots = vec![approval_all(ApprovalGrade::Approved); 21];
        ballots.extend(vec![approval_all(ApprovalGrade::Neutral); 2]);
        ballots.extend(vec![approval_all(ApprovalGrade::Disapproved); 2]);
        let t = tally_approval::<f64>(&ballots, &cats()).unwrap();
        assert!((t.overall_approval - 0.84).abs() <= 1e-12);
        let t32 = tally_approval::<f32>(&ballots, &cats()).unwrap();
        assert!((t32.overall_approval - 0.84).abs() <= 1e-6);
    }

    #[test]
    fn empty_tallies() {
        assert_eq!(tally_approval::<f64>(&[], &cats()), Err(ParticipationError::EmptyTally));
        assert_eq!(tally_rank::<f64>(&[], &cats(), None), Err(ParticipationError::EmptyTally));
        assert_eq!(tally_overall::<f64>(&[]), Err(ParticipationError::EmptyTally));
    }

    #[test]
    fn single_rank_ballot_is_its_order() {
        let order = ["parking", "sponge", "traffic", "residents", "canopy", "biodiversity"];
        let t = tally_rank::<f64>(&[rank(&order)], &cats(), None).unwrap();
        assert_eq!(t.categories(), order);
    }

    #[test]
    fn mean_rank_tie_break_chain() {
        let abc: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
        let ballots = [rank(&["a", "b", "c"]), rank(&["a", "c", "b"])];
        let t = tally_rank::<f64>(&ballots, &abc, None).unwrap();
        assert_eq!(t.categories(), ["a", "b", "c"]);
        assert_eq!(t.order.iter().map(|r| r.mean_rank).collect::<Vec<_>>(), vec![1.0, 2.5, 2.5]);

        // approval beats lexicographic order
        let approvals = [
            ApprovalBallot([("a", ApprovalGrade::Approved), ("b", ApprovalGrade::Neutral), ("c", ApprovalGrade::Approved)]
                .map(|(k, g)| (k.to_string(), g))
                .into()),
            ApprovalBallot([("a", ApprovalGrade::Approved), ("b", ApprovalGrade::Approved), ("c", ApprovalGrade::Approved)]
                .map(|(k, g)| (k.to_string(), g))
                .into()),
        ];
        let at = tally_approval::<f64>(&approvals, &abc).unwrap();
        let t = tally_rank(&ballots, &abc, Some(&at)).unwrap();
        assert_eq!(t.categories(), ["a", "c", "b"]);
    }

    #[test]
    fn reported_order_replay() {
        // Ten ballots in the target order plus two dissenting ones; rank sums
        // 18, 26, 38, 46, 58, 66.
        let target = ["biodiversity", "residents", "canopy", "parking", "sponge", "traffic"];
        let mut ballots = vec![rank(&target); 10];
        ballots.push(rank(&["residents", "biodiversity", "parking", "canopy", "traffic", "sponge"]));
        ballots.push(rank(&["traffic", "sponge", "parking", "canopy", "residents", "biodiversity"]));
        let t = tally_rank::<f64>(&ballots, &cats(), None).unwrap();
        assert_eq!(t.categories(), target);
    }

    #[test]
    fn overall_rates() {
        let t = tally_overall::<f64>(&[OverallVote::Yes]).unwrap();
        assert_eq!(t.yes_rate, 1.0);
        let t = tally_overall::<f64>(&[OverallVote::Yes, OverallVote::No]).unwrap();
        assert_eq!((t.yes_rate, t.no_rate), (0.5, 0.5));
        let mut votes = vec![OverallVote::Yes; 150];
        votes.extend(vec![OverallVote::No; 45]);
        let t = tally_overall::<f64>(&votes).unwrap();
        assert!((t.yes_rate - 150.0 / 195.0).abs() < 1e-15);
        assert!((t.yes_rate - 0.7692).abs() < 1e-4);
    }

    fn grade() -> impl Strategy<Value = ApprovalGrade> {
        prop_oneof![Just(ApprovalGrade::Approved), Just(ApprovalGrade::Neutral), Just(ApprovalGrade::Disapproved)]
    }

    fn approval_ballot() -> impl Strategy<Value = ApprovalBallot> {
        proptest::collection::vec(grade(), 6)
            .prop_map(|gs| ApprovalBallot(cats().into_iter().zip(gs).collect()))
    }

    fn rank_ballot() -> impl Strategy<Value = RankBallot> {
        Just(cats()).prop_shuffle().prop_map(RankBallot)
    }

    proptest! {
        #[test]
        fn tallies_ignore_ballot_order(
            approvals in proptest::collection::vec(approval_ballot(), 1..30),
            ranks in proptest::collection::vec(rank_ballot(), 1..30),
            seed in any::<u64>(),
        ) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut a2 = approvals.clone();
            a2.shuffle(&mut rng);
            let mut r2 = ranks.clone();
            r2.shuffle(&mut rng);
            let t1 = tally_approval::<f64>(&approvals, &cats()).unwrap();
            let t2 = tally_approval::<f64>(&a2, &cats()).unwrap();
            prop_assert_eq!(&t1, &t2);
            prop_assert_eq!(tally_rank(&ranks, &cats(), Some(&t1)).unwrap(), tally_rank(&r2, &cats(), Some(&t2)).unwrap());
            for c in &t1.categories {
                prop_assert!((c.approve_rate + c.neutral_rate + c.disapprove_rate - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn identical_rank_ballots_return_that_permutation(b in rank_ballot(), n in 1usize..20) {
            let t = tally_rank::<f64>(&vec![b.clone(); n], &cats(), None).unwrap();
            prop_assert_eq!(t.categories(), b.0.iter().map(String::as_str).collect::<Vec<_>>());
        }

        #[test]
        fn adding_a_ballot_moves_counts_by_at_most_one(
            approvals in proptest::collection::vec(approval_ballot(), 1..20),
            extra in approval_ballot(),
        ) {
            let before = tally_approval::<f64>(&approvals, &cats()).unwrap();
            let mut more = approvals.clone();
            more.push(extra);
            let after = tally_approval::<f64>(&more, &cats()).unwrap();
            for (b, a) in before.categories.iter().zip(&after.categories) {
                prop_assert!(a.approved - b.approved <= 1);
            }
        }
    }
}

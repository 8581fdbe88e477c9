//! Core of the townhall civic-participation platform.
//!
//! * [`study`] loads and validates the study content and builds the fact package.
//! * [`session`] assigns arms and walks each participant through the fifteen stages.
//! * [`persona`] runs the fact persona and the deliberative persona over a chat provider.
//! * [`participation`] validates and tallies the three voting instruments.
//! * [`analytics`] computes recall metrics, exact tests, tag comparisons, sentiment and the report.
//! * [`store`] keeps responses and demographics in separate stores and exports them.
//!
//! Numeric code is generic over [`Scalar`]; the aliases below fix it to `f64`.

pub mod analytics;
pub mod participation;
pub mod persona;
pub mod session;
pub mod store;
pub mod study;
pub mod text;

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point type the statistics and tallies are computed in.
pub trait Scalar: Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static {
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite constant")
    }

    fn of_usize(v: usize) -> Self {
        Self::from_usize(v).expect("count fits scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub type TestResult = analytics::stats::TestResult<f64>;
pub type PermutationResult = analytics::stats::PermutationResult<f64>;
pub type RecallMetrics = analytics::recall::RecallMetrics<f64>;
pub type TagDiff = analytics::tags::TagDiff<f64>;
pub type SentimentDistribution = analytics::sentiment::SentimentDistribution<f64>;
pub type ApprovalTally = participation::ApprovalTally<f64>;
pub type RankTally = participation::RankTally<f64>;
pub type OverallTally = participation::OverallTally<f64>;

pub type TestResult32 = analytics::stats::TestResult<f32>;
pub type ApprovalTally32 = participation::ApprovalTally<f32>;

pub use analytics::report::{build_report, Report, ReportOptions};
pub use participation::{ApprovalBallot, ApprovalGrade, OverallVote, RankBallot};
pub use persona::{ChatProvider, Conversation, PersonaGateway};
pub use session::{Arm, ArmAssigner, AssignmentMode, SessionEngine, Stage, StageSubmission};
pub use store::{DemographicRecord, DemographicStore, ResponseRecord, ResponseStore};
pub use study::{build_fact_package, load_study, FactPackage, StudyDefinition};

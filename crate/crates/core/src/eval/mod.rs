//! Offline evaluation: synthetic test cases, the four metrics and report
//! tables.

pub mod judge;
pub mod metrics;
pub mod report;
pub mod testgen;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use judge::{RelevanceJudge, SubstringJudge};
pub use metrics::{
    answer_relevancy, context_precision, context_recall, faithfulness, MetricValue,
    DEFAULT_REGENERATED_QUESTIONS,
};
pub use report::{run_eval, CaseResult, ContextScores, EvalOptions, EvalReport, EvalThresholds};
pub use testgen::{
    generate_testcases, largest_remainder, read_testcases, write_testcases, DifficultyMix,
    GenerationOutput, ModeMix, TestCase, TestGenOptions,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Simple,
    Reasoning,
    MultiContext,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [
        Difficulty::Simple,
        Difficulty::Reasoning,
        Difficulty::MultiContext,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Simple => "simple",
            Difficulty::Reasoning => "reasoning",
            Difficulty::MultiContext => "multi_context",
        }
    }

    /// Style hint substituted into generation prompts.
    pub fn instruction(self) -> &'static str {
        match self {
            Difficulty::Simple => "a simple question answered by one statement in the source",
            Difficulty::Reasoning => "a question that needs reasoning over the source to answer",
            Difficulty::MultiContext => {
                "a question whose answer combines information from every source comment"
            }
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

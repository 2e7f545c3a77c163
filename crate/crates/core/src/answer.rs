//! Answer formulation over the refined context.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::LazyLock;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::prompt::{RenderedPrompt, Template};
use crate::providers::{ChatProvider, ChatRequest, ChatTask, Passage, ProviderError, RetryPolicy};
use crate::retrieval::{RankedDoc, RetrievalOverrides, RetrievalResult};
use crate::text::{citation_ids, citation_tag};

pub const INSUFFICIENT_DATA_NOTICE: &str =
    "Insufficient data: no comments relevant to this query were found.";

pub const TEMPLATE_VERSION: &str = "v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    AnswerQuestion,
    TopicsOfDiscussion,
    Summarise,
    PublicConcerns,
}

impl OutputMode {
    pub const ALL: [OutputMode; 4] = [
        OutputMode::AnswerQuestion,
        OutputMode::TopicsOfDiscussion,
        OutputMode::Summarise,
        OutputMode::PublicConcerns,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OutputMode::AnswerQuestion => "answer_question",
            OutputMode::TopicsOfDiscussion => "topics_of_discussion",
            OutputMode::Summarise => "summarise",
            OutputMode::PublicConcerns => "public_concerns",
        }
    }

    /// Row label used in reports and the UI.
    pub fn label(self) -> &'static str {
        match self {
            OutputMode::AnswerQuestion => "Answer the Question",
            OutputMode::TopicsOfDiscussion => "Topics of Discussion",
            OutputMode::Summarise => "Summarise",
            OutputMode::PublicConcerns => "Public Concerns",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            OutputMode::AnswerQuestion => "A direct prose answer to the question.",
            OutputMode::TopicsOfDiscussion => "A bulleted list of the topics people discuss.",
            OutputMode::Summarise => "A short prose summary of the relevant comments.",
            OutputMode::PublicConcerns => "A bulleted list of concerns and hesitations raised.",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }

    pub fn template(self) -> &'static Template {
        &ANSWER_TEMPLATES[self as usize]
    }
}

impl fmt::Display for OutputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

static ANSWER_TEMPLATES: LazyLock<[Template; 4]> = LazyLock::new(|| {
    let parse = |name, src| Template::parse(name, src).expect("shipped answer template parses");
    [
        parse(
            "answer/answer_question.v1",
            include_str!("../templates/answer/answer_question.v1.txt"),
        ),
        parse(
            "answer/topics_of_discussion.v1",
            include_str!("../templates/answer/topics_of_discussion.v1.txt"),
        ),
        parse(
            "answer/summarise.v1",
            include_str!("../templates/answer/summarise.v1.txt"),
        ),
        parse(
            "answer/public_concerns.v1",
            include_str!("../templates/answer/public_concerns.v1.txt"),
        ),
    ]
});

/// Serialisable descriptor for listing modes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeDescriptor {
    pub id: OutputMode,
    pub label: String,
    pub description: String,
}

pub fn mode_descriptors() -> Vec<ModeDescriptor> {
    OutputMode::ALL
        .into_iter()
        .map(|m| ModeDescriptor {
            id: m,
            label: m.label().to_string(),
            description: m.description().to_string(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    pub query_text: String,
    pub mode: OutputMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vaccine_filter: Option<String>,
    #[serde(default)]
    pub overrides: RetrievalOverrides,
}

impl QueryRequest {
    pub fn new(query_text: impl Into<String>, mode: OutputMode) -> Self {
        Self {
            query_text: query_text.into(),
            mode,
            vaccine_filter: None,
            overrides: RetrievalOverrides::default(),
        }
    }

    pub fn validate(&self) -> Result<(), AnswerError> {
        if self.query_text.trim().is_empty() {
            return Err(AnswerError::EmptyQuery);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    pub mode: OutputMode,
    /// Cited ids present in the context, in first-citation order.
    pub supporting_ids: Vec<String>,
    /// Cited ids that are not in the context. Never part of `supporting_ids`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dropped_citations: Vec<String>,
    pub insufficient_data: bool,
    pub context_used: Vec<RankedDoc>,
    pub model_id: String,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Error)]
pub enum AnswerError {
    #[error("query text is empty")]
    EmptyQuery,
    #[error("chat provider failed: {0}")]
    Provider(#[from] ProviderError),
}

/// Numbered context lines, each tagged with its comment id.
pub fn render_context(docs: &[RankedDoc]) -> String {
    docs.iter()
        .enumerate()
        .map(|(i, d)| format!("{}. {} {}", i + 1, citation_tag(&d.comment_id), d.text))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_prompt(mode: OutputMode, query: &str, docs: &[RankedDoc]) -> RenderedPrompt {
    mode.template()
        .render(&[("query", query), ("context", &render_context(docs))])
}

/// Splits cited ids into those backed by the context and those that are not.
pub fn sort_citations(text: &str, context: &[RankedDoc]) -> (Vec<String>, Vec<String>) {
    let known: BTreeSet<&str> = context.iter().map(|d| d.comment_id.as_str()).collect();
    let mut seen = BTreeSet::new();
    let mut supporting = Vec::new();
    let mut dropped = Vec::new();
    for id in citation_ids(text) {
        if !seen.insert(id.clone()) {
            continue;
        }
        if known.contains(id.as_str()) {
            supporting.push(id);
        } else {
            dropped.push(id);
        }
    }
    (supporting, dropped)
}

/// One chat call over the iteration-2 context. An empty context yields the
/// insufficient-data notice without calling the provider.
pub fn formulate_answer(
    request: &QueryRequest,
    result: &RetrievalResult,
    llm: &dyn ChatProvider,
    retry: &RetryPolicy,
    clock: &Clock,
) -> Result<Answer, AnswerError> {
    request.validate()?;
    let context = &result.iteration2;
    if context.is_empty() {
        return Ok(Answer {
            text: INSUFFICIENT_DATA_NOTICE.to_string(),
            mode: request.mode,
            supporting_ids: Vec::new(),
            dropped_citations: Vec::new(),
            insufficient_data: true,
            context_used: Vec::new(),
            model_id: llm.model_id().to_string(),
            created_at: clock.now(),
        });
    }
    let prompt = render_prompt(request.mode, &request.query_text, context);
    let chat = ChatRequest {
        system: prompt.system,
        user: prompt.user,
        task: ChatTask::Answer {
            mode: request.mode,
            query: request.query_text.clone(),
            passages: context
                .iter()
                .map(|d| Passage {
                    id: d.comment_id.clone(),
                    text: d.text.clone(),
                })
                .collect(),
        },
    };
    let text = retry.run(|| llm.complete(&chat))?;
    let (supporting_ids, dropped_citations) = sort_citations(&text, context);
    if !dropped_citations.is_empty() {
        tracing::warn!(dropped = ?dropped_citations, "answer cites comments outside its context");
    }
    Ok(Answer {
        text,
        mode: request.mode,
        supporting_ids,
        dropped_citations,
        insufficient_data: false,
        context_used: context.clone(),
        model_id: llm.model_id().to_string(),
        created_at: clock.now(),
    })
}

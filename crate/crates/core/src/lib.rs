//! Retrieval-augmented question answering over social media comments about
//! vaccines.
//!
//! The crate covers the whole offline path: cleaning and segregating posts
//! ([`corpus`]), embedding and top-k% search ([`index`]), the two-iteration
//! refinement pipeline ([`retrieval`]), answer formulation in four output
//! modes ([`answer`]) and automated evaluation ([`eval`]). Every model-backed
//! step sits behind a trait in [`providers`] with a deterministic stub.

pub mod answer;
pub mod clock;
pub mod concurrency;
pub mod corpus;
pub mod engine;
pub mod eval;
pub mod index;
pub mod prompt;
pub mod providers;
pub mod retrieval;
pub mod text;

pub use answer::{Answer, OutputMode, QueryRequest};
pub use clock::Clock;
pub use engine::{Engine, EngineError, QueryOutcome};
pub use index::VectorIndex;
pub use providers::Providers;
pub use retrieval::{RetrievalConfig, RetrievalResult};

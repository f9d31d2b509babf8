//! Retrieval and generation stages for LLM-backed conversational
//! recommendation.

pub mod corpus;
pub mod jsonl;
pub mod embed;
pub mod http;
pub mod index;
pub mod llm;
pub mod prompts;
pub mod query_expert;
pub mod item_generator;
pub mod eval;
pub mod pipeline;

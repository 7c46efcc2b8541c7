//! The three-stage reasoning chain (comprehension, analysis, reflection)
//! against a chat-completion endpoint, with record/replay transcripts so
//! runs can be repeated offline.

pub mod client;
pub mod runner;
pub mod template;
pub mod transcript;

pub use client::{ChatClient, ChatRequest, HttpChatClient, HttpChatConfig, Message};
pub use runner::{load_inputs, run_stage, ChainInput, ChainRunner, ChainSettings};
pub use template::{extract_label, ChainStage, PromptTemplate, TemplateSet, DEFAULT_EXTRACTION};
pub use transcript::{key_hash, TranscriptEntry, TranscriptMode, TranscriptStore};

//! Toolkit for mining quantum software engineering discussions from Q&A
//! forums, co-annotating them with a human and an LLM, and training,
//! evaluating, explaining and serving a six-way challenge classifier.

pub mod annotation;
pub mod cli;
pub mod dataset;
pub mod evaluator;
pub mod explainer;
pub mod ingest;
pub mod llm;
pub mod model;
pub mod plot;
pub mod service;
pub mod synthetic;
pub mod taxonomy;
pub mod tokenizer;
pub mod trainer;

pub use annotation::{AnnotationRecord, AnnotationStore, ConflictCase, GoldRecord};
pub use ingest::{Forum, Post, TagFilter};
pub use taxonomy::{CategoryHistogram, ChallengeCategory};

//! Faithfulness probes for chain-of-thought answers on medical
//! multiple-choice questions.

pub mod detectors;
pub mod domain;
pub mod humaneval;
pub mod ingest;
pub mod metrics;
pub mod modelio;
pub mod probe;
pub mod report;
pub mod seeding;
pub mod stats;

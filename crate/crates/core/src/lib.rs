//! Core of the pentrail pipeline.
//!
//! One iteration summarizes the previous tool output, updates the pentest
//! task tree, picks the next step, checks it against earlier steps, generates
//! commands with retrieved knowledge, executes them through the tool
//! interface and verifies the outcome. A run ends in a CSV vulnerability
//! report and a set of run metrics.

pub mod aci;
pub mod events;
pub mod generator;
pub mod llm;
pub mod metrics;
pub mod operator;
pub mod orchestrator;
pub mod phase;
pub mod ptt;
pub mod rag;
pub mod repetition;
pub mod report;
pub mod runlog;
pub mod sim;
pub mod strategy;
pub mod summarizer;
pub mod text;
pub mod verifier;

pub mod env;
pub mod episode;
pub mod policy;
pub mod rng;
pub mod critic;
pub mod hae;
pub mod oracle;
pub mod parser;
pub mod jsonl;
pub mod checkpoint;
pub mod config;
pub mod verify;
pub mod trainer;
pub mod cli;

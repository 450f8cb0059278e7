pub mod cli;
pub mod config;
pub mod engine;
pub mod http;
pub mod ingest;
pub mod storage;

pub mod agents;
pub mod backtest;
pub mod econometrics;
pub mod error;
pub mod events;
pub mod ingest;
pub mod panel;
pub mod pipeline;
pub mod stats;
pub mod synth;
pub mod washtrade;

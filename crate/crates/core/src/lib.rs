pub mod envelope;
pub mod reliability;
pub mod transport;
pub mod executor;
pub mod nodegraph;
pub mod services;
pub mod actions;
pub mod metrics;
pub mod datalogger;
pub mod bench;
pub mod cli;

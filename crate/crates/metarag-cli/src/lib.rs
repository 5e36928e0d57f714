//! Library surface of the CLI: settings loading and the HTTP service, kept
//! separate from the binary so integration tests can run the service
//! in-process.

pub mod server;
pub mod settings;
